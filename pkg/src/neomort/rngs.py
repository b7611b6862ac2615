"""Deterministic derivation of independent random streams.

Every stochastic component of the pipeline draws from a Generator derived
from (master seed, *string or integer keys).  Derivation goes through
SHA-256, not Python's ``hash``, so streams are stable across processes and
interpreter runs; parallel execution therefore cannot change results.
"""

from __future__ import annotations

import hashlib

import numpy as np


def seed_sequence(master_seed: int, *keys) -> np.random.SeedSequence:
    """Build a SeedSequence from a master seed and arbitrary key parts."""
    entropy = [int(master_seed) & 0xFFFFFFFF]
    for key in keys:
        if isinstance(key, (int, np.integer)):
            entropy.append(int(key) & 0xFFFFFFFFFFFFFFFF)
        else:
            digest = hashlib.sha256(str(key).encode("utf-8")).digest()
            entropy.append(int.from_bytes(digest[:8], "little"))
    return np.random.SeedSequence(entropy)


def rng_for(master_seed: int, *keys) -> np.random.Generator:
    """Generator for the stream identified by (master_seed, *keys)."""
    return np.random.default_rng(seed_sequence(master_seed, *keys))
