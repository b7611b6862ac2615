"""From posterior draws to country-year NMR trajectories and summaries.

Fitted spline coefficients cover the data period; beyond it each draw is
extended by a random walk with the country's own smoothing variance.
Countries without data get trajectories simulated from the global
relation with hierarchical uncertainty.  Ratio trajectories are combined
with U5MR draws (randomly paired) to produce NMR trajectories, crisis
adjustments are added after the transform, and medians with 2.5/97.5
percentile bands are reported.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import rngs
from .ingest import DataError, _fmt
from .model import CountryInput, ratio_to_nmr
from .sampler import FitData, PosteriorDraws
from .splines import (
    DEFAULT_HORIZON,
    SplineBasis,
    build_knot_grid,
    difference_transform,
)

CREDIBLE_PERCENTILES = (2.5, 50.0, 97.5)
NEONATAL_SHARE_OF_CRISIS_DEATHS = 1.0 / 60.0


@dataclass
class EstimateGrid:
    """Posterior NMR trajectories and summaries for one country."""

    country_id: str
    years: np.ndarray
    trajectories: np.ndarray  # (draw, year), crisis-adjusted NMR
    expected_trajectories: np.ndarray  # (draw, year), global relation only
    median: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    expected_nmr: np.ndarray
    smoothing_precision: tuple | None = None  # (median, lower, upper) of 1/sigma2

    def __post_init__(self):
        order_ok = np.all(self.lower <= self.median) and np.all(
            self.median <= self.upper
        )
        if not order_ok:
            raise ValueError(f"{self.country_id}: percentile ordering violated")


@dataclass
class RatioDiagnostic:
    """Estimated-to-expected NMR ratio with the outlier rule applied."""

    country_id: str
    years: np.ndarray
    median: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    flag_year: float
    flagged: bool
    direction: str  # "high", "low" or "none"


def project_coefficients(
    alpha_draws: np.ndarray,
    sigma2_draws: np.ndarray,
    n_basis: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Extend fitted coefficient draws to ``n_basis`` by a random walk.

    Each projected step adds N(0, sigma2) of the same draw, so the fitted
    and projected curves agree at the last data-period coefficient and
    projection variance grows linearly in the number of steps.
    """
    alpha_draws = np.atleast_2d(np.asarray(alpha_draws, dtype=float))
    if alpha_draws.shape[1] < 1:
        raise ValueError("need at least one fitted coefficient")
    extra = n_basis - alpha_draws.shape[1]
    if extra <= 0:
        return alpha_draws
    sigma = np.sqrt(np.asarray(sigma2_draws, dtype=float))[:, None]
    steps = rng.standard_normal((alpha_draws.shape[0], extra)) * sigma
    walk = alpha_draws[:, -1:] + np.cumsum(steps, axis=1)
    return np.hstack([alpha_draws, walk])


def simulate_no_data_country(
    sigma_lambda_draws: np.ndarray,
    chi_draws: np.ndarray,
    n_basis: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Coefficient draws for a country with no observations.

    Per draw: an intercept from the country-intercept prior seeds the
    first coefficient, then a random walk whose step variance is the
    global smoothing level exp(chi).
    """
    sigma_lambda_draws = np.asarray(sigma_lambda_draws, dtype=float)
    n_draws = sigma_lambda_draws.size
    lam = rng.standard_normal(n_draws) * sigma_lambda_draws
    step_sd = np.exp(0.5 * np.asarray(chi_draws, dtype=float))
    steps = rng.standard_normal((n_draws, n_basis - 1)) * step_sd[:, None]
    return lam[:, None] + np.hstack(
        [np.zeros((n_draws, 1)), np.cumsum(steps, axis=1)]
    )


def ratio_trajectories(
    alpha_draws: np.ndarray,
    grid,
    years: np.ndarray,
    u5mr_at_years: np.ndarray,
    beta0_draws: np.ndarray,
    beta1_draws: np.ndarray,
    theta_draws: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """(estimated, expected) ratio trajectories, shape (draw, year)."""
    basis = SplineBasis(grid).design_matrix(years)  # (year, K)
    log_p = alpha_draws @ basis.T
    log_u = np.log(np.asarray(u5mr_at_years, dtype=float))[None, :]
    hinge = np.maximum(log_u - np.log(theta_draws)[:, None], 0.0)
    log_f_draws = beta0_draws[:, None] + beta1_draws[:, None] * hinge
    # clip far beyond any observable difference so exp stays finite positive
    return (
        np.exp(np.clip(log_f_draws + log_p, -600.0, 600.0)),
        np.exp(np.clip(log_f_draws, -600.0, 600.0)),
    )


def combine_with_u5mr(
    r_trajectories: np.ndarray,
    country: CountryInput,
    years: np.ndarray,
    rng: np.random.Generator,
    expected_r: np.ndarray | None = None,
    smoothing_precision: tuple | None = None,
) -> EstimateGrid:
    """NMR trajectories from ratio draws and the country's U5MR.

    Each ratio draw is paired with a uniformly chosen U5MR draw when
    draws are available (the point series otherwise); crisis adjustments
    are added on the NMR scale after the transform.  The expected
    trajectories (global relation only) use the same U5MR pairing.
    """
    years = np.asarray(years, dtype=float)
    n_draws = r_trajectories.shape[0]
    if r_trajectories.shape[1] != years.size:
        raise DataError(
            f"{country.country_id}: ratio trajectories cover {r_trajectories.shape[1]}"
            f" years, grid has {years.size}"
        )
    if country.u5mr_draws is not None:
        draw_years = np.asarray(country.draw_years, dtype=float)
        positions = np.searchsorted(draw_years, years)
        positions = np.minimum(positions, draw_years.size - 1)
        if years.size and not np.allclose(draw_years[positions], years):
            raise DataError(
                f"{country.country_id}: U5MR draw years do not cover the estimate grid"
            )
        picks = rng.integers(0, country.u5mr_draws.shape[0], size=n_draws)
        u = country.u5mr_draws[picks][:, positions]
    else:
        u = np.broadcast_to(
            np.asarray(country.u5mr_at(years), dtype=float), r_trajectories.shape
        )
    crisis = country.crisis_at(years)[None, :]
    nmr = ratio_to_nmr(r_trajectories, u) + crisis
    if expected_r is None:
        expected_r = r_trajectories
    expected = ratio_to_nmr(expected_r, u)
    lower, median, upper = np.percentile(nmr, CREDIBLE_PERCENTILES, axis=0)
    return EstimateGrid(
        country_id=country.country_id,
        years=years,
        trajectories=nmr,
        expected_trajectories=expected,
        median=median,
        lower=lower,
        upper=upper,
        expected_nmr=np.median(expected, axis=0),
        smoothing_precision=smoothing_precision,
    )


def crisis_adjustment_from_deaths(crisis_under5_deaths: float, births: float) -> float:
    """Additive NMR adjustment from crisis under-five deaths.

    One sixtieth of crisis under-five deaths is allocated to the neonatal
    period, expressed per 1,000 live births.
    """
    if births <= 0:
        raise ValueError("births must be positive")
    return crisis_under5_deaths * NEONATAL_SHARE_OF_CRISIS_DEATHS / births * 1000.0


def expected_vs_estimated(
    grid: EstimateGrid, flag_year: float = 2015.5
) -> RatioDiagnostic:
    """Per-year ratio of estimated to expected NMR with the outlier rule.

    A country is flagged when the ratio's point estimate in the flag year
    is at least 10 per cent away from one and its 95 per cent interval
    excludes one.
    """
    ratio = grid.trajectories / grid.expected_trajectories
    lower, median, upper = np.percentile(ratio, CREDIBLE_PERCENTILES, axis=0)
    j = int(np.argmin(np.abs(grid.years - flag_year)))
    point, lo, hi = median[j], lower[j], upper[j]
    if point >= 1.1 and lo > 1.0:
        flagged, direction = True, "high"
    elif point <= 0.9 and hi < 1.0:
        flagged, direction = True, "low"
    else:
        flagged, direction = False, "none"
    return RatioDiagnostic(
        country_id=grid.country_id,
        years=grid.years,
        median=median,
        lower=lower,
        upper=upper,
        flag_year=float(grid.years[j]),
        flagged=flagged,
        direction=direction,
    )


def estimate_years(
    first_obs_t: float | None, horizon: float, t_floor: float | None = None
) -> np.ndarray:
    """Annual midyear grid: 1990.5 through the horizon, earlier with data.

    ``t_floor`` (the knot-grid start) caps how far back the grid can go.
    """
    start = 1990.5
    if first_obs_t is not None and first_obs_t < start:
        start = math.floor(first_obs_t) + 0.5
        if start > first_obs_t:
            start -= 1.0
    if t_floor is not None:
        while start < t_floor:
            start += 1.0
    return np.arange(start, horizon + 1e-9, 1.0)


def _pooled(posterior: PosteriorDraws, name: str) -> np.ndarray:
    return posterior.pooled(name)


def estimate_country(
    posterior: PosteriorDraws,
    data: FitData,
    country: CountryInput,
    seed: int = 0,
    horizon: float | None = None,
) -> EstimateGrid:
    """Estimate grid for one fitted country."""
    horizon = data.horizon if horizon is None else horizon
    pos = data.country_position(country.country_id)
    fc = data.countries[pos]
    rng = rngs.rng_for(seed, "estimate", country.country_id)

    lam = _pooled(posterior, f"lambda[{country.country_id}]")
    eps = np.column_stack(
        [
            _pooled(posterior, f"eps[{country.country_id}][{q}]")
            for q in range(fc.n_fluct)
        ]
    )
    sigma2 = _pooled(posterior, f"sigma2_eps[{country.country_id}]")
    transform = difference_transform(fc.k_fit)
    alpha = lam[:, None] + eps @ transform.matrix.T
    alpha = project_coefficients(alpha, sigma2, fc.grid.n_basis, rng)

    first_obs = float(fc.t.min()) if fc.n_obs else None
    years = estimate_years(first_obs, horizon, t_floor=fc.grid.t_start)
    r_est, r_exp = ratio_trajectories(
        alpha,
        fc.grid,
        years,
        country.u5mr_at(years),
        _pooled(posterior, "beta0"),
        _pooled(posterior, "beta1"),
        _pooled(posterior, "theta"),
    )
    precision = 1.0 / sigma2
    prec_lo, prec_med, prec_hi = np.percentile(precision, CREDIBLE_PERCENTILES)
    return combine_with_u5mr(
        r_est,
        country,
        years,
        rng,
        expected_r=r_exp,
        smoothing_precision=(prec_med, prec_lo, prec_hi),
    )


def estimate_no_data_country(
    posterior: PosteriorDraws,
    country: CountryInput,
    seed: int = 0,
    horizon: float = DEFAULT_HORIZON,
) -> EstimateGrid:
    """Estimate grid for a country with no usable observations."""
    rng = rngs.rng_for(seed, "estimate", country.country_id)
    grid = build_knot_grid(None, horizon=horizon, country_id=country.country_id)
    alpha = simulate_no_data_country(
        _pooled(posterior, "sigma_lambda"),
        _pooled(posterior, "chi"),
        grid.n_basis,
        rng,
    )
    years = estimate_years(None, horizon)
    r_est, r_exp = ratio_trajectories(
        alpha,
        grid,
        years,
        country.u5mr_at(years),
        _pooled(posterior, "beta0"),
        _pooled(posterior, "beta1"),
        _pooled(posterior, "theta"),
    )
    return combine_with_u5mr(r_est, country, years, rng, expected_r=r_exp)


def estimate_all(
    posterior: PosteriorDraws,
    data: FitData,
    countries: dict,
    seed: int = 0,
    horizon: float | None = None,
) -> dict:
    """Estimate grids for every country, fitted or not."""
    horizon = data.horizon if horizon is None else horizon
    fitted = {c.country_id for c in data.countries}
    grids = {}
    for cid in sorted(countries):
        if cid in fitted:
            grids[cid] = estimate_country(
                posterior, data, countries[cid], seed=seed, horizon=horizon
            )
        else:
            grids[cid] = estimate_no_data_country(
                posterior, countries[cid], seed=seed, horizon=horizon
            )
    return grids


def write_estimates(path, grids: dict) -> None:
    """estimates.csv: one row per country-year with summaries."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["country_id", "year", "median", "lower95", "upper95", "expected_nmr"]
        )
        for cid in sorted(grids):
            g = grids[cid]
            for j, year in enumerate(g.years):
                writer.writerow(
                    [
                        cid,
                        _fmt(float(year)),
                        _fmt(float(g.median[j])),
                        _fmt(float(g.lower[j])),
                        _fmt(float(g.upper[j])),
                        _fmt(float(g.expected_nmr[j])),
                    ]
                )


def write_trajectories(path, grids: dict) -> None:
    """Optional draws.csv: full NMR trajectories in long format."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["country_id", "draw", "year", "nmr"])
        for cid in sorted(grids):
            g = grids[cid]
            for d in range(g.trajectories.shape[0]):
                for j, year in enumerate(g.years):
                    writer.writerow(
                        [cid, d, _fmt(float(year)), _fmt(float(g.trajectories[d, j]))]
                    )


def write_ratio_diagnostics(path, diagnostics: list) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["country_id", "flag_year", "ratio_median", "ratio_lower", "ratio_upper",
             "flagged", "direction"]
        )
        for d in diagnostics:
            j = int(np.argmin(np.abs(d.years - d.flag_year)))
            writer.writerow(
                [
                    d.country_id,
                    _fmt(d.flag_year),
                    _fmt(float(d.median[j])),
                    _fmt(float(d.lower[j])),
                    _fmt(float(d.upper[j])),
                    _fmt(d.flagged),
                    d.direction,
                ]
            )
