"""Model parameters, transforms, observation likelihood and priors.

The quantity modeled is the ratio of neonatal deaths to deaths in months
2-59, R = N / (U - N), on the log scale.  Its expectation given the
under-five mortality level U is flat below a cutpoint and log-log linear
above it; a per-country spline multiplier captures deviations.  Observed
log ratios are normal around the model value with source-specific error
variances.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .splines import SplineBasis, coefficients_from, difference_transform

VR_TYPES = ("VR", "SVR")
SURVEY_TYPES = ("DHS", "OtherDHS", "MICS", "Others")
SERIES_TYPES = VR_TYPES + SURVEY_TYPES

# Appendix-style vague priors: N(0, variance 100) on the line coefficients
# and the log global smoothing level, uniforms on the scale parameters.
COEF_PRIOR_VARIANCE = 100.0
SCALE_PRIOR_UPPER = 40.0
CUTPOINT_PRIOR_UPPER = 500.0

LOG_2PI = math.log(2.0 * math.pi)


def normal_logpdf(x, variance):
    """Log density of N(0, variance) at x (vectorized)."""
    return -0.5 * (LOG_2PI + np.log(variance)) - 0.5 * np.square(x) / variance


@dataclass
class GlobalParams:
    """Global parameters shared by all countries."""

    beta0: float
    beta1: float
    theta: float
    omega: dict = field(default_factory=dict)  # series type -> non-sampling SD
    sigma_lambda: float = 1.0
    chi: float = 0.0
    psi: float = 1.0


@dataclass
class CountryParams:
    """Country-level spline parameters: intercept, fluctuations, smoothing."""

    lam: float
    eps: np.ndarray
    sigma2_eps: float

    def __post_init__(self):
        self.eps = np.asarray(self.eps, dtype=float)
        if self.sigma2_eps <= 0:
            raise ValueError("sigma2_eps must be positive")


@dataclass
class Observation:
    """One fit-ready observation of the log neonatal/non-neonatal ratio.

    ``nmr`` and ``u5mr`` keep the source's own rates; the model only sees
    the log ratio, but validation scores predictions on the NMR scale.
    """

    country_id: str
    t: float
    log_ratio: float
    series_type: str
    series_id: str
    sampling_sd: float | None = None
    stochastic_sd: float | None = None
    included: bool = True
    nmr: float | None = None
    u5mr: float | None = None


@dataclass
class CountryInput:
    """Per-country inputs: U5MR series/draws, births, crisis adjustments."""

    country_id: str
    name: str = ""
    size_category: str = "other"
    u5mr_point: dict = field(default_factory=dict)  # decimal year -> per 1,000
    u5mr_draws: np.ndarray | None = None  # (draw, year) aligned with draw_years
    draw_years: np.ndarray | None = None
    births: dict = field(default_factory=dict)  # year -> live births
    crisis_adjustments: dict = field(default_factory=dict)  # year -> NMR add-on

    def __post_init__(self):
        years = sorted(self.u5mr_point)
        self._u5mr_years = np.asarray(years, dtype=float)
        self._u5mr_values = np.asarray([self.u5mr_point[y] for y in years], dtype=float)
        if np.any(self._u5mr_values <= 0):
            raise ValueError(f"{self.country_id}: U5MR series must be positive")

    def u5mr_at(self, t) -> np.ndarray:
        """U5MR linearly interpolated at time(s) t, clamped at series ends."""
        if self._u5mr_years.size == 0:
            raise ValueError(f"{self.country_id}: no U5MR series available")
        return np.interp(np.asarray(t, dtype=float), self._u5mr_years, self._u5mr_values)

    def crisis_at(self, t) -> np.ndarray:
        """Additive NMR crisis adjustment at time(s) t (0 when none)."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        out = np.zeros_like(t)
        for i, ti in enumerate(t):
            out[i] = self.crisis_adjustments.get(int(np.floor(ti)), 0.0)
        return out


def log_f(u5mr, beta0: float, beta1: float, theta: float):
    """Log of the expected ratio given the U5MR level.

    Flat at ``beta0`` for u5mr <= theta, then linear in log(u5mr) with
    slope ``beta1``; continuous at the cutpoint by construction.
    """
    u5mr = np.asarray(u5mr, dtype=float)
    if np.any(u5mr <= 0):
        raise ValueError("u5mr must be positive")
    if theta <= 0:
        raise ValueError("theta must be positive")
    hinge = np.maximum(np.log(u5mr) - math.log(theta), 0.0)
    out = beta0 + beta1 * hinge
    return out if out.ndim else float(out)


def log_ratio_model(
    country: CountryInput,
    t: float,
    global_params: GlobalParams,
    cparams: CountryParams,
    basis: SplineBasis,
) -> float:
    """Model log ratio at time t: global relation plus country multiplier."""
    u = float(country.u5mr_at(t))
    transform = difference_transform(basis.grid.n_basis)
    alpha = coefficients_from(cparams.lam, cparams.eps, transform)
    return float(
        log_f(u, global_params.beta0, global_params.beta1, global_params.theta)
        + basis.eval(t) @ alpha
    )


def ratio_to_nmr(ratio, u5mr):
    """NMR implied by ratio R and U5MR level: N = U * R / (1 + R).

    Evaluated branch-wise so overflowing ratios saturate at U instead of
    producing inf/inf.
    """
    ratio = np.asarray(ratio, dtype=float)
    u5mr = np.asarray(u5mr, dtype=float)
    if np.any(ratio <= 0):
        raise ValueError("ratio must be positive")
    if np.any(u5mr <= 0):
        raise ValueError("u5mr must be positive")
    with np.errstate(over="ignore"):
        share = np.where(ratio <= 1.0, ratio / (1.0 + ratio), 1.0 / (1.0 + 1.0 / ratio))
    out = u5mr * share
    return out if out.ndim else float(out)


def nmr_to_ratio(nmr, u5mr):
    """Ratio R = N / (U - N); requires 0 < nmr < u5mr, never clamps."""
    nmr = np.asarray(nmr, dtype=float)
    u5mr = np.asarray(u5mr, dtype=float)
    if np.any(nmr <= 0):
        raise ValueError("nmr must be positive")
    if np.any(nmr >= u5mr):
        raise ValueError("nmr must be strictly below u5mr")
    out = nmr / (u5mr - nmr)
    return out if out.ndim else float(out)


def observation_variance(obs: Observation, global_params: GlobalParams) -> float:
    """Total error variance of one observation on the log-ratio scale.

    VR and SVR observations carry a stochastic SD; survey observations
    combine their sampling SD with the series-type non-sampling SD.
    """
    if obs.series_type in VR_TYPES:
        if obs.stochastic_sd is None:
            raise ValueError(
                f"{obs.country_id}/{obs.series_id}: VR-type observation lacks stochastic_sd"
            )
        return float(obs.stochastic_sd) ** 2
    if obs.sampling_sd is None:
        raise ValueError(
            f"{obs.country_id}/{obs.series_id}: survey observation lacks sampling_sd"
        )
    if obs.series_type not in global_params.omega:
        raise ValueError(f"no non-sampling SD configured for {obs.series_type!r}")
    return float(obs.sampling_sd) ** 2 + float(global_params.omega[obs.series_type]) ** 2


def obs_log_likelihood(
    obs: Observation, log_ratio_at_t: float, global_params: GlobalParams
) -> float:
    """Normal log density of the observed log ratio around the model value."""
    variance = observation_variance(obs, global_params)
    return float(normal_logpdf(obs.log_ratio - log_ratio_at_t, variance))


def log_prior(global_params: GlobalParams, country_params: list) -> float:
    """Joint log prior density over global and country parameters.

    Returns -inf off support.  The smoothing variances enter through their
    log-normal density (Jacobian included), matching the hierarchical
    log-variance model.
    """
    gp = global_params
    if not 0.0 < gp.theta < CUTPOINT_PRIOR_UPPER:
        return -math.inf
    scales = [gp.sigma_lambda, gp.psi] + [gp.omega[s] for s in sorted(gp.omega)]
    for value in scales:
        if not 0.0 <= value <= SCALE_PRIOR_UPPER:
            return -math.inf
    if gp.sigma_lambda == 0.0 or gp.psi == 0.0:
        return -math.inf  # degenerate hierarchy

    total = -math.log(CUTPOINT_PRIOR_UPPER)
    total += len(scales) * -math.log(SCALE_PRIOR_UPPER)
    total += float(
        normal_logpdf(gp.beta0, COEF_PRIOR_VARIANCE)
        + normal_logpdf(gp.beta1, COEF_PRIOR_VARIANCE)
        + normal_logpdf(gp.chi, COEF_PRIOR_VARIANCE)
    )
    for cp in country_params:
        if cp.sigma2_eps <= 0:
            return -math.inf
        total += float(normal_logpdf(cp.lam, gp.sigma_lambda**2))
        total += float(np.sum(normal_logpdf(cp.eps, cp.sigma2_eps)))
        log_s2 = math.log(cp.sigma2_eps)
        total += float(normal_logpdf(log_s2 - gp.chi, gp.psi**2)) - log_s2
    return total
