"""Shared test helpers: exact Gaussian posterior oracle and tiny datasets."""

import numpy as np

from neomort.model import SURVEY_TYPES, CountryInput
from neomort.sampler import FitData


def gaussian_posterior(
    data: FitData,
    theta: float,
    omega: np.ndarray,
    sigma_lambda: float,
    sigma2_eps: np.ndarray,
):
    """Exact posterior of (beta0, beta1, intercepts, fluctuations) with the
    cutpoint and all variances fixed: the model is then linear-Gaussian.

    Returns (names, mean, cov).
    """
    omega = np.asarray(omega, dtype=float)
    delta2 = np.where(
        data.is_tau, data.tau2, data.nu2 + np.square(omega)[np.maximum(data.stype, 0)]
    )
    w = 1.0 / delta2
    h = np.maximum(data.log_u - np.log(theta), 0.0)
    C = data.n_countries
    q_list = [c.n_fluct for c in data.countries]
    p = 2 + C + sum(q_list)
    A = np.zeros((data.n_obs, p))
    A[:, 0] = 1.0
    A[:, 1] = h
    names = ["beta0", "beta1"]
    col = 2
    lam_cols, eps_cols = {}, {}
    for ci, c in enumerate(data.countries):
        lam_cols[ci] = col
        names.append(f"lambda[{c.country_id}]")
        col += 1
    for ci, c in enumerate(data.countries):
        eps_cols[ci] = col
        names += [f"eps[{c.country_id}][{k}]" for k in range(c.n_fluct)]
        col += c.n_fluct
    offsets = np.concatenate([[0], np.cumsum([c.n_obs for c in data.countries])])
    for ci, c in enumerate(data.countries):
        rows = slice(offsets[ci], offsets[ci + 1])
        A[rows, lam_cols[ci]] = 1.0
        A[rows, eps_cols[ci] : eps_cols[ci] + c.n_fluct] = c.fluct_design
    prior = np.concatenate(
        [
            [1e-2, 1e-2],
            np.full(C, 1.0 / sigma_lambda**2),
            np.concatenate(
                [np.full(q, 1.0 / s2) for q, s2 in zip(q_list, sigma2_eps)]
            )
            if sum(q_list)
            else np.zeros(0),
        ]
    )
    precision = A.T @ (A * w[:, None]) + np.diag(prior)
    cov = np.linalg.inv(precision)
    cov = 0.5 * (cov + cov.T)
    mean = cov @ (A.T @ (w * data.x))
    return names, mean, cov


def linear_country(cid, n_obs, u5mr, log_r_fn, tau, seed, t_start=1995.5):
    """Manually constructed VR-style observations with known noise."""
    from neomort.model import Observation

    rng = np.random.default_rng(seed)
    ts = t_start + np.arange(n_obs) * 1.0
    obs = []
    for t in ts:
        log_r = log_r_fn(t) + rng.normal(0.0, tau)
        obs.append(
            Observation(
                country_id=cid,
                t=float(t),
                log_ratio=float(log_r),
                series_type="VR",
                series_id=f"{cid}-VR",
                stochastic_sd=tau,
                nmr=None,
                u5mr=None,
            )
        )
    country = CountryInput(
        country_id=cid,
        name=cid,
        u5mr_point={y + 0.5: u5mr for y in range(1980, 2016)},
        births={y: 1e6 for y in range(1980, 2016)},
    )
    return obs, country


class FakeRng:
    """Deterministic stand-in: scalar normals pop from a queue, array
    normals are zero, uniforms are 0.5."""

    def __init__(self, normals=()):
        self.normals = list(normals)

    def standard_normal(self, size=None):
        if size is None:
            return self.normals.pop(0) if self.normals else 0.0
        return np.zeros(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        mid = 0.5 * (np.asarray(low) + np.asarray(high))
        if size is None:
            return float(mid) if np.ndim(mid) == 0 else mid
        return np.broadcast_to(mid, size).copy()

    def exponential(self, scale=1.0, size=None):
        if size is None:
            return 0.0
        return np.zeros(size)

    def integers(self, low, high=None, size=None):
        if size is None:
            return int(low)
        return np.full(size, int(low))

    def normal(self, loc=0.0, scale=1.0, size=None):
        if size is None:
            return float(loc)
        return np.broadcast_to(np.asarray(loc, dtype=float), size).copy()
