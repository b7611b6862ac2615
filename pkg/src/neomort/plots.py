"""Standalone SVG plots of data and estimates, one file per country.

Output is byte-deterministic: the SVG hash salt is pinned and no
timestamps are embedded.
"""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .estimates import EstimateGrid
from .model import CountryInput, Observation

_SERIES_COLORS = plt.get_cmap("tab10")


def _obs_nmr_band(obs: Observation) -> tuple[float, float, float]:
    """Observed NMR with bounds at two error SDs on the log-ratio scale."""
    if obs.series_type in ("VR", "SVR"):
        sd = obs.stochastic_sd or 0.0
    else:
        sd = obs.sampling_sd or 0.0
    r = math.exp(obs.log_ratio)
    u = obs.u5mr if obs.u5mr is not None else 1000.0 * r / (1.0 + r)
    lo_r, hi_r = r * math.exp(-2.0 * sd), r * math.exp(2.0 * sd)
    point = obs.nmr if obs.nmr is not None else u * r / (1.0 + r)
    return point, u * lo_r / (1.0 + lo_r), u * hi_r / (1.0 + hi_r)


def plot_country(
    grid: EstimateGrid,
    observations: list,
    country: CountryInput,
    path,
) -> None:
    """Median line with 95 per cent band, expected line, and the data
    points with two-SD shading per series."""
    plt.rcParams["svg.hashsalt"] = country.country_id
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.fill_between(
        grid.years, grid.lower, grid.upper, color="#d62728", alpha=0.15, linewidth=0
    )
    ax.plot(grid.years, grid.median, color="#d62728", label="estimate")
    ax.plot(
        grid.years,
        grid.expected_nmr,
        color="#1f77b4",
        linestyle="--",
        label="expected from U5MR",
    )
    series_ids = sorted({o.series_id for o in observations})
    for k, sid in enumerate(series_ids):
        members = sorted(
            (o for o in observations if o.series_id == sid), key=lambda o: o.t
        )
        pts = np.asarray([_obs_nmr_band(o) for o in members])
        ts = np.asarray([o.t for o in members])
        color = _SERIES_COLORS(k % 10)
        if len(members) > 1:
            ax.fill_between(ts, pts[:, 1], pts[:, 2], color=color, alpha=0.2, linewidth=0)
        else:
            ax.vlines(ts, pts[:, 1], pts[:, 2], color=color, alpha=0.5)
        ax.plot(ts, pts[:, 0], "o", color=color, markersize=3, label=sid)
    ax.set_xlabel("year")
    ax.set_ylabel("NMR (deaths per 1,000 live births)")
    ax.set_title(f"{country.name or country.country_id}")
    ax.legend(loc="best", fontsize=7)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
