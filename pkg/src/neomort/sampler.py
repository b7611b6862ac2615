"""Metropolis-within-Gibbs engine for the hierarchical spline model.

Update scheme per sweep:

* cutpoint: random-walk Metropolis on the log cutpoint, with the two line
  coefficients analytically marginalized out of the target (they are
  redrawn from their exact conditional immediately after, so the pair is
  a valid partially collapsed Gibbs move);
* line coefficients (jointly), country intercepts, and country fluctuation
  vectors: exact normal full conditionals, the fluctuation blocks via
  batched Cholesky factorizations grouped by block size;
* a translation move along the non-identified direction between the global
  intercept and the country intercepts (their joint conditional along that
  line is Gaussian), which removes the slowest mixing direction;
* scale parameters: slice sampling on the log scale; the mean of the log
  smoothing variances is conjugate normal.

Chains are independent, each seeded from (master seed, chain index), so
results are identical for any degree of parallelism.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from . import rngs
from .ingest import DataError
from .model import (
    COEF_PRIOR_VARIANCE,
    CUTPOINT_PRIOR_UPPER,
    SCALE_PRIOR_UPPER,
    SURVEY_TYPES,
    CountryParams,
    GlobalParams,
    normal_logpdf,
)
from .splines import (
    DEFAULT_HORIZON,
    SplineBasis,
    build_knot_grid,
    difference_transform,
)

_COEF_PREC = 1.0 / COEF_PRIOR_VARIANCE


class SamplerError(Exception):
    """Raised when a chain reaches an invalid state; carries a state dump."""

    def __init__(self, message, dump=None):
        super().__init__(message)
        self.dump = dump or {}


# ---------------------------------------------------------------------------
# Prepared data


@dataclass
class FitCountry:
    """Per-country observation block and spline machinery."""

    country_id: str
    t: np.ndarray
    x: np.ndarray  # observed log ratios
    log_u: np.ndarray  # log U5MR covariate at observation times
    is_tau: np.ndarray  # True for VR/SVR observations
    tau2: np.ndarray
    nu2: np.ndarray
    stype: np.ndarray  # survey-type index, -1 for VR/SVR
    grid: object
    k_fit: int  # coefficients kept in the fit (through the last-data knot)
    design: np.ndarray  # (n, k_fit) basis values at observation times
    fluct_design: np.ndarray  # (n, k_fit - 1) = design @ difference transform

    @property
    def n_obs(self) -> int:
        return self.x.size

    @property
    def n_fluct(self) -> int:
        return self.k_fit - 1


@dataclass
class _EpsGroup:
    """Countries sharing a fluctuation-vector length, padded for batching."""

    q: int
    members: np.ndarray  # country positions
    design3: np.ndarray  # (m, n_max, q)
    level3: np.ndarray  # (m, n_max, 1 + q): intercept column plus design3
    gather_idx: np.ndarray  # (m, n_max) flat obs index, pads clipped to 0
    scatter_idx: np.ndarray  # (m, n_max) flat obs index, pads -> n_total slot
    mask: np.ndarray  # (m, n_max) 1.0 on real observations


@dataclass
class FitData:
    """Everything the sampler needs, precomputed once."""

    countries: list
    x: np.ndarray
    log_u: np.ndarray
    tau2: np.ndarray
    nu2: np.ndarray
    is_tau: np.ndarray
    stype: np.ndarray
    country_idx: np.ndarray
    survey_obs: list  # per survey type, flat indices
    groups: list
    horizon: float

    @property
    def n_obs(self) -> int:
        return self.x.size

    @property
    def n_countries(self) -> int:
        return len(self.countries)

    def country_position(self, country_id: str) -> int:
        for i, c in enumerate(self.countries):
            if c.country_id == country_id:
                return i
        raise KeyError(country_id)


def build_fit_data(
    observations,
    countries: dict,
    horizon: float = DEFAULT_HORIZON,
    country_ids: list | None = None,
    grid_start: dict | None = None,
) -> FitData:
    """Assemble sampler inputs from fit-ready observations.

    By default every country with at least one included observation is
    fitted; pass ``country_ids`` to force the country set (countries
    without data are then carried with prior-only updates).  ``grid_start``
    optionally maps country ids to an earlier first-observation time so a
    training fit can share the full dataset's knot grid.
    """
    by_country: dict[str, list] = {}
    for obs in observations:
        if obs.included:
            by_country.setdefault(obs.country_id, []).append(obs)
    if country_ids is None:
        country_ids = sorted(by_country)
    fit_countries = []
    type_index = {s: k for k, s in enumerate(SURVEY_TYPES)}
    for cid in country_ids:
        group = sorted(by_country.get(cid, []), key=lambda o: (o.t, o.series_id))
        country = countries.get(cid)
        if country is None:
            raise DataError(f"no country input for {cid}")
        t = np.asarray([o.t for o in group])
        x = np.asarray([o.log_ratio for o in group])
        if group:
            log_u = np.log(np.asarray(country.u5mr_at(t), dtype=float))
        else:
            log_u = np.zeros(0)
        is_tau = np.asarray([o.series_type in ("VR", "SVR") for o in group], dtype=bool)
        tau2 = np.zeros(len(group))
        nu2 = np.zeros(len(group))
        stype = np.full(len(group), -1, dtype=np.int64)
        for i, o in enumerate(group):
            if is_tau[i]:
                if o.stochastic_sd is None:
                    raise DataError(f"{cid}/{o.series_id}: missing stochastic sd")
                tau2[i] = float(o.stochastic_sd) ** 2
            else:
                if o.sampling_sd is None:
                    raise DataError(f"{cid}/{o.series_id}: missing sampling sd")
                nu2[i] = float(o.sampling_sd) ** 2
                stype[i] = type_index[o.series_type]
        first_obs = float(t.min()) if group else None
        if grid_start and cid in grid_start:
            hint = float(grid_start[cid])
            first_obs = hint if first_obs is None else min(first_obs, hint)
        grid = build_knot_grid(first_obs, horizon=horizon, country_id=cid)
        if group:
            k_fit = grid.last_supported_basis(t) + 1
            design = SplineBasis(grid).design_matrix(t)[:, :k_fit]
        else:
            k_fit = 4
            design = np.zeros((0, k_fit))
        fluct = design @ difference_transform(k_fit).matrix
        fit_countries.append(
            FitCountry(
                country_id=cid,
                t=t,
                x=x,
                log_u=log_u,
                is_tau=is_tau,
                tau2=tau2,
                nu2=nu2,
                stype=stype,
                grid=grid,
                k_fit=k_fit,
                design=design,
                fluct_design=fluct,
            )
        )

    def cat(attr):
        arrays = [getattr(c, attr) for c in fit_countries]
        return np.concatenate(arrays) if arrays else np.zeros(0)

    x = cat("x")
    n_total = x.size
    country_idx = np.concatenate(
        [np.full(c.n_obs, i, dtype=np.int64) for i, c in enumerate(fit_countries)]
    ) if fit_countries else np.zeros(0, dtype=np.int64)
    stype = cat("stype").astype(np.int64) if n_total else np.zeros(0, dtype=np.int64)
    survey_obs = [np.where(stype == k)[0] for k in range(len(SURVEY_TYPES))]

    offsets = np.zeros(len(fit_countries) + 1, dtype=np.int64)
    for i, c in enumerate(fit_countries):
        offsets[i + 1] = offsets[i] + c.n_obs

    groups = []
    by_q: dict[int, list[int]] = {}
    for i, c in enumerate(fit_countries):
        by_q.setdefault(c.n_fluct, []).append(i)
    for q in sorted(by_q):
        members = by_q[q]
        n_max = max(fit_countries[i].n_obs for i in members)
        m = len(members)
        design3 = np.zeros((m, max(n_max, 1), q))
        gather = np.zeros((m, max(n_max, 1)), dtype=np.int64)
        scatter = np.full((m, max(n_max, 1)), n_total, dtype=np.int64)
        mask = np.zeros((m, max(n_max, 1)))
        for row, i in enumerate(members):
            c = fit_countries[i]
            n = c.n_obs
            if n:
                design3[row, :n, :] = c.fluct_design
                idx = np.arange(offsets[i], offsets[i + 1])
                gather[row, :n] = idx
                scatter[row, :n] = idx
                mask[row, :n] = 1.0
        groups.append(
            _EpsGroup(
                q=q,
                members=np.asarray(members, dtype=np.int64),
                design3=design3,
                level3=np.concatenate([mask[:, :, None], design3], axis=2),
                gather_idx=gather,
                scatter_idx=scatter,
                mask=mask,
            )
        )

    return FitData(
        countries=fit_countries,
        x=x,
        log_u=cat("log_u"),
        tau2=cat("tau2"),
        nu2=cat("nu2"),
        is_tau=cat("is_tau").astype(bool) if n_total else np.zeros(0, dtype=bool),
        stype=stype,
        country_idx=country_idx,
        survey_obs=survey_obs,
        groups=groups,
        horizon=horizon,
    )


# ---------------------------------------------------------------------------
# Parameter state


@dataclass
class ParameterState:
    """One point in parameter space."""

    beta0: float
    beta1: float
    theta: float
    omega: np.ndarray  # aligned with SURVEY_TYPES
    sigma_lambda: float
    chi: float
    psi: float
    lam: np.ndarray  # (C,)
    eps: list  # per-country fluctuation vectors
    sigma2_eps: np.ndarray  # (C,)

    def copy(self) -> "ParameterState":
        return ParameterState(
            beta0=self.beta0,
            beta1=self.beta1,
            theta=self.theta,
            omega=self.omega.copy(),
            sigma_lambda=self.sigma_lambda,
            chi=self.chi,
            psi=self.psi,
            lam=self.lam.copy(),
            eps=[e.copy() for e in self.eps],
            sigma2_eps=self.sigma2_eps.copy(),
        )

    def global_params(self) -> GlobalParams:
        return GlobalParams(
            beta0=self.beta0,
            beta1=self.beta1,
            theta=self.theta,
            omega={s: float(self.omega[k]) for k, s in enumerate(SURVEY_TYPES)},
            sigma_lambda=self.sigma_lambda,
            chi=self.chi,
            psi=self.psi,
        )

    def country_params(self) -> list:
        return [
            CountryParams(lam=float(l), eps=e, sigma2_eps=float(s2))
            for l, e, s2 in zip(self.lam, self.eps, self.sigma2_eps)
        ]


def parameter_names(data: FitData) -> list:
    names = ["beta0", "beta1", "theta"]
    names += [f"omega[{s}]" for s in SURVEY_TYPES]
    names += ["sigma_lambda", "chi", "psi"]
    for c in data.countries:
        names.append(f"lambda[{c.country_id}]")
        names += [f"eps[{c.country_id}][{q}]" for q in range(c.n_fluct)]
        names.append(f"sigma2_eps[{c.country_id}]")
    return names


def flatten_state(state: ParameterState) -> np.ndarray:
    parts = [
        np.asarray([state.beta0, state.beta1, state.theta]),
        state.omega,
        np.asarray([state.sigma_lambda, state.chi, state.psi]),
    ]
    for lam, eps, s2 in zip(state.lam, state.eps, state.sigma2_eps):
        parts.append(np.asarray([lam]))
        parts.append(eps)
        parts.append(np.asarray([s2]))
    return np.concatenate(parts)


# ---------------------------------------------------------------------------
# Configuration


@dataclass
class ChainConfig:
    """Chain protocol: defaults mirror the production run configuration."""

    n_chains: int = 3
    n_iter: int = 20_000
    burn_in: int = 10_000
    thin: int = 10
    master_seed: int = 0
    adapt_window: int = 50
    target_accept_low: float = 0.30
    target_accept_high: float = 0.45
    threads: int = 1
    fixed: dict | None = None

    def __post_init__(self):
        if self.burn_in >= self.n_iter:
            raise ValueError("burn_in must be below n_iter")
        if self.thin < 1:
            raise ValueError("thin must be at least 1")
        if self.n_chains < 1:
            raise ValueError("need at least one chain")

    @property
    def retained_per_chain(self) -> int:
        return (self.n_iter - self.burn_in + self.thin - 1) // self.thin


# ---------------------------------------------------------------------------
# Shared sweep machinery


def _delta2(state: ParameterState, data: FitData) -> np.ndarray:
    """Total observation variances under the current non-sampling SDs."""
    if data.n_obs == 0:
        return np.zeros(0)
    omega2 = np.square(state.omega)[np.maximum(data.stype, 0)]
    return np.where(data.is_tau, data.tau2, data.nu2 + omega2)


def _hinge(state_theta: float, data: FitData) -> np.ndarray:
    return np.maximum(data.log_u - math.log(state_theta), 0.0)


def _fluct_effect(state: ParameterState, data: FitData) -> np.ndarray:
    """Per-observation spline-fluctuation effect (design @ eps), flattened."""
    buf = np.zeros(data.n_obs + 1)
    for g in data.groups:
        if g.design3.shape[1] == 0:
            continue
        eps_block = np.stack([state.eps[i] for i in g.members])
        vals = np.einsum("mnq,mq->mn", g.design3, eps_block)
        buf[g.scatter_idx.ravel()] = (vals * g.mask).ravel()
    return buf[: data.n_obs]


def _line_suffstats(y, w, h):
    s0 = float(w.sum()) + _COEF_PREC
    s1 = float(w @ h)
    s2 = float(w @ (h * h)) + _COEF_PREC
    b0 = float(w @ y)
    b1 = float((w * h) @ y)
    return s0, s1, s2, b0, b1


class _ThetaWorkspace:
    """Per-sweep scaffolding for the collapsed cutpoint update.

    Given the current weights and variances, the entire Gaussian block
    (line coefficients, country intercepts, fluctuation vectors) is
    marginalized out of the cutpoint target.  The per-country precision
    blocks do not involve the cutpoint, so they are factorized once per
    sweep; each cutpoint evaluation only reassembles a 2x2 Schur
    complement for the line coefficients.
    """

    def __init__(self, state: ParameterState, data: FitData, w: np.ndarray):
        self.data = data
        self.w = w
        self.blocks = []
        for g in data.groups:
            p = g.q + 1
            wg = w[g.gather_idx] * g.mask if data.n_obs else g.mask * 0.0
            xg = data.x[g.gather_idx] * g.mask if data.n_obs else g.mask * 0.0
            aw = g.level3 * wg[:, :, None]
            precision = np.swapaxes(aw, 1, 2) @ g.level3
            rr = np.arange(p)
            prior = np.empty((g.members.size, p))
            prior[:, 0] = 1.0 / state.sigma_lambda**2
            prior[:, 1:] = (1.0 / state.sigma2_eps[g.members])[:, None]
            precision[:, rr, rr] += prior
            b_y = (np.swapaxes(aw, 1, 2) @ xg[:, :, None])[:, :, 0]
            # the blocks do not involve the cutpoint: factor once per sweep
            inv = np.linalg.inv(precision)
            inv = 0.5 * (inv + np.swapaxes(inv, 1, 2))
            self.blocks.append(
                {
                    "group": g,
                    "aw": aw,
                    "inv": inv,
                    "cov_chol": np.linalg.cholesky(inv),
                    "b_y": b_y,
                    "u_y": (inv @ b_y[:, :, None])[:, :, 0],
                }
            )

    def _line_stats(self, h):
        w, x = self.w, self.data.x
        s0 = float(w.sum()) + _COEF_PREC
        s1 = float(w @ h)
        s2 = float(w @ (h * h)) + _COEF_PREC
        b0 = float(w @ x)
        b1 = float((w * h) @ x)
        return np.asarray([[s0, s1], [s1, s2]]), np.asarray([b0, b1])

    def components(self, theta: float):
        """Schur-complement precision and rhs for the line coefficients,
        plus per-block cross terms, at the given cutpoint."""
        data = self.data
        h = _hinge(theta, data)
        line_prec, line_rhs = self._line_stats(h)
        crosses = []
        for blk in self.blocks:
            g = blk["group"]
            hg = h[g.gather_idx] * g.mask if data.n_obs else g.mask * 0.0
            xdes = np.stack([g.mask, hg], axis=2)  # (m, n, 2)
            cross = np.swapaxes(blk["aw"], 1, 2) @ xdes  # (m, p, 2)
            solved = blk["inv"] @ cross  # (m, p, 2)
            line_prec = line_prec - np.einsum("mpi,mpj->ij", cross, solved)
            line_rhs = line_rhs - np.einsum("mpi,mp->i", cross, blk["u_y"])
            crosses.append(cross)
        return line_prec, line_rhs, crosses

    def log_marginal(self, theta: float) -> float:
        """Cutpoint-dependent part of the marginal data density."""
        prec, rhs, _ = self.components(theta)
        det = prec[0, 0] * prec[1, 1] - prec[0, 1] ** 2
        quad = (
            prec[1, 1] * rhs[0] ** 2
            - 2.0 * prec[0, 1] * rhs[0] * rhs[1]
            + prec[0, 0] * rhs[1] ** 2
        ) / det
        return 0.5 * quad - 0.5 * math.log(det)

    def draw_joint(self, state: ParameterState, theta: float, rng) -> None:
        """Exact joint draw of line coefficients, intercepts and
        fluctuations given the cutpoint; writes into ``state``."""
        prec, rhs, crosses = self.components(theta)
        chol = np.linalg.cholesky(prec)
        mean = np.linalg.solve(prec, rhs)
        noise = np.linalg.solve(chol.T, rng.standard_normal(2))
        beta = mean + noise
        state.beta0, state.beta1 = float(beta[0]), float(beta[1])
        for blk, cross in zip(self.blocks, crosses):
            g = blk["group"]
            b_beta = blk["b_y"] - cross @ beta  # (m, p)
            mean_c = (blk["inv"] @ b_beta[:, :, None])[:, :, 0]
            z = rng.standard_normal(mean_c.shape)
            noise_c = (blk["cov_chol"] @ z[:, :, None])[:, :, 0]
            draws = mean_c + noise_c
            for row, i in enumerate(g.members):
                state.lam[i] = draws[row, 0]
                state.eps[i] = draws[row, 1:].copy()


def _draw_line_coefs(y, w, h, rng) -> tuple[float, float]:
    """Exact normal draw of (intercept, slope) given everything else."""
    s0, s1, s2, b0, b1 = _line_suffstats(y, w, h)
    # 2x2 Cholesky: P = L L'
    l00 = math.sqrt(s0)
    l10 = s1 / l00
    l11 = math.sqrt(max(s2 - l10 * l10, 1e-300))
    # mean = P^-1 b
    c0 = b0 / l00
    c1 = (b1 - l10 * c0) / l11
    mu1 = c1 / l11
    mu0 = (c0 - l10 * mu1) / l00
    z0, z1 = rng.standard_normal(2)
    d1 = z1 / l11
    d0 = (z0 - l10 * d1) / l00
    return mu0 + d0, mu1 + d1


# ---------------------------------------------------------------------------
# Slice sampling


def _slice_scalar(x0, logf, rng, width=1.0, max_out=50, max_shrink=200):
    """Neal's slice sampler with stepping out, one scalar coordinate."""
    f0 = logf(x0)
    if not np.isfinite(f0):
        raise SamplerError(f"slice sampler started off support (logf({x0}) = {f0})")
    level = f0 - rng.exponential(1.0)
    left = x0 - width * rng.uniform()
    right = left + width
    steps = int(rng.integers(0, max_out))
    for _ in range(steps):
        if logf(left) <= level:
            break
        left -= width
    for _ in range(max_out - steps):
        if logf(right) <= level:
            break
        right += width
    for _ in range(max_shrink):
        prop = rng.uniform(left, right)
        if logf(prop) > level:
            return prop
        if prop < x0:
            left = prop
        else:
            right = prop
    return x0


def _slice_vector(x0: np.ndarray, logf, rng, width=1.0, max_out=50, max_shrink=200):
    """Independent slice updates for a vector of coordinates, in lockstep.

    ``logf`` maps a vector to per-coordinate log densities; coordinates are
    independent targets so the lockstep evaluation changes nothing.
    """
    n = x0.size
    if n == 0:
        return x0
    f0 = logf(x0)
    if not np.all(np.isfinite(f0)):
        raise SamplerError("vector slice sampler started off support")
    level = f0 - rng.exponential(1.0, size=n)
    left = x0 - width * rng.uniform(size=n)
    right = left + width
    for _ in range(max_out):
        grow = logf(left) > level
        if not grow.any():
            break
        left[grow] -= width
    for _ in range(max_out):
        grow = logf(right) > level
        if not grow.any():
            break
        right[grow] += width
    out = x0.copy()
    pending = np.ones(n, dtype=bool)
    for _ in range(max_shrink):
        prop = rng.uniform(left, right)
        accept = (logf(prop) > level) & pending
        out[accept] = prop[accept]
        pending &= ~accept
        if not pending.any():
            break
        shrink_left = pending & (prop < x0)
        shrink_right = pending & ~shrink_left
        left[shrink_left] = prop[shrink_left]
        right[shrink_right] = prop[shrink_right]
    return out


# ---------------------------------------------------------------------------
# Updates


@dataclass
class ThetaStep:
    """Adaptive random-walk state for the cutpoint update."""

    scale: float = 0.25
    accepted: int = 0
    proposed: int = 0

    def adapt(self, low: float, high: float):
        if self.proposed == 0:
            return
        rate = self.accepted / self.proposed
        if rate < low:
            self.scale = max(self.scale * 0.7, 1e-3)
        elif rate > high:
            self.scale = min(self.scale * 1.4, 2.0)
        self.accepted = 0
        self.proposed = 0


def update_theta(
    state: ParameterState,
    data: FitData,
    rng: np.random.Generator,
    step: ThetaStep | None = None,
) -> bool:
    """Random-walk Metropolis on the log cutpoint.

    The full Gaussian block (line coefficients, country intercepts and
    fluctuation vectors) is marginalized out of the target and redrawn
    jointly from its exact conditional afterwards, so the whole step is a
    valid partially collapsed Gibbs move and the cutpoint effectively
    sees its marginal posterior.  Returns the acceptance flag.
    """
    if step is None:
        step = ThetaStep()
    delta2 = _delta2(state, data)
    w = 1.0 / delta2 if data.n_obs else delta2
    ws = _ThetaWorkspace(state, data, w)

    log_theta = math.log(state.theta)
    prop_log = log_theta + step.scale * rng.standard_normal()
    z = rng.uniform()  # drawn unconditionally to keep the stream aligned
    step.proposed += 1
    accept = False
    if prop_log < math.log(CUTPOINT_PRIOR_UPPER):
        cur = ws.log_marginal(state.theta) + log_theta
        prop_theta = math.exp(prop_log)
        prop = ws.log_marginal(prop_theta) + prop_log
        if math.log(z) < prop - cur:
            state.theta = prop_theta
            accept = True
    if accept:
        step.accepted += 1
    ws.draw_joint(state, state.theta, rng)
    return accept


def lambda_full_conditional(
    state: ParameterState, data: FitData
) -> tuple[np.ndarray, np.ndarray]:
    """Mean and precision of every country intercept's full conditional:
    the precision-weighted average of residuals and the prior."""
    delta2 = _delta2(state, data)
    w = 1.0 / delta2 if data.n_obs else delta2
    h = _hinge(state.theta, data)
    y2 = (
        data.x
        - state.beta0
        - state.beta1 * h
        - _fluct_effect(state, data)
    )
    C = data.n_countries
    sw = np.bincount(data.country_idx, weights=w, minlength=C)
    swy = np.bincount(data.country_idx, weights=w * y2, minlength=C)
    prec = sw + 1.0 / state.sigma_lambda**2
    return swy / prec, prec


def chi_full_conditional(
    state: ParameterState, data: FitData
) -> tuple[float, float]:
    """Mean and precision of the conjugate normal conditional for the
    mean of the log smoothing variances."""
    C = data.n_countries
    if C:
        prec = C / state.psi**2 + _COEF_PREC
        mean = float(np.sum(np.log(state.sigma2_eps))) / state.psi**2 / prec
    else:
        prec, mean = _COEF_PREC, 0.0
    return mean, prec


def update_linear_block(
    state: ParameterState, data: FitData, rng: np.random.Generator
) -> None:
    """Gibbs draws for line coefficients, country intercepts and
    fluctuation vectors, plus the intercept translation move."""
    delta2 = _delta2(state, data)
    w = 1.0 / delta2 if data.n_obs else delta2
    h = _hinge(state.theta, data)
    fluct = _fluct_effect(state, data)
    C = data.n_countries

    y = data.x - state.lam[data.country_idx] - fluct
    state.beta0, state.beta1 = _draw_line_coefs(y, w, h, rng)

    # country intercepts: precision-weighted normal-normal conditionals
    mean, prec = lambda_full_conditional(state, data)
    sl2 = state.sigma_lambda**2
    state.lam = mean + rng.standard_normal(C) / np.sqrt(prec)

    # translation move along (beta0 + d, lam - d): likelihood-invariant,
    # conditional on the priors it is Gaussian in d
    prec_d = _COEF_PREC + C / sl2
    mean_d = (-state.beta0 * _COEF_PREC + float(state.lam.sum()) / sl2) / prec_d
    d = mean_d + rng.standard_normal() / math.sqrt(prec_d)
    state.beta0 += d
    state.lam = state.lam - d

    # fluctuation vectors, batched by length
    line = state.beta0 + state.beta1 * h
    y3 = data.x - line - state.lam[data.country_idx]
    for g in data.groups:
        q = g.q
        if q == 0:
            continue
        m = g.members.size
        wg = w[g.gather_idx] * g.mask if data.n_obs else g.mask * 0.0
        yg = y3[g.gather_idx] if data.n_obs else g.mask * 0.0
        gw = g.design3 * wg[:, :, None]
        precision = np.swapaxes(gw, 1, 2) @ g.design3
        b = (np.swapaxes(gw, 1, 2) @ yg[:, :, None])[:, :, 0]
        ridge = 1.0 / state.sigma2_eps[g.members]
        rr = np.arange(q)
        precision[:, rr, rr] += ridge[:, None]
        try:
            chol = np.linalg.cholesky(precision)
        except np.linalg.LinAlgError:
            # degenerate block (no data or flat basis): fall back to prior
            for i in g.members:
                state.eps[i] = rng.normal(
                    0.0, math.sqrt(state.sigma2_eps[i]), size=q
                )
            continue
        mean = np.linalg.solve(precision, b[:, :, None])[:, :, 0]
        z = rng.standard_normal((m, q))
        noise = np.linalg.solve(np.swapaxes(chol, 1, 2), z[:, :, None])[:, :, 0]
        draws = mean + noise
        for row, i in enumerate(g.members):
            state.eps[i] = draws[row].copy()


def update_variances(
    state: ParameterState,
    data: FitData,
    rng: np.random.Generator,
    fixed: dict | None = None,
) -> None:
    """Slice updates for all scale parameters, conjugate draw for chi."""
    fixed = fixed or {}
    C = data.n_countries
    log40 = math.log(SCALE_PRIOR_UPPER)

    if "sigma2_eps" not in fixed and C:
        q_counts = np.asarray([c.n_fluct for c in data.countries], dtype=float)
        ssq = np.asarray([float(e @ e) for e in state.eps])
        chi, psi2 = state.chi, state.psi**2

        def logf_s2(logv):
            return (
                -0.5 * q_counts * logv
                - 0.5 * ssq * np.exp(-logv)
                - 0.5 * np.square(logv - chi) / psi2
            )

        new_log = _slice_vector(np.log(state.sigma2_eps), logf_s2, rng)
        state.sigma2_eps = np.exp(new_log)

    if "chi" not in fixed:
        mean, prec = chi_full_conditional(state, data)
        state.chi = mean + rng.standard_normal() / math.sqrt(prec)

    if "psi" not in fixed:
        if C:
            dev2 = np.square(np.log(state.sigma2_eps) - state.chi)
            sum_dev2 = float(dev2.sum())
        else:
            sum_dev2 = 0.0

        def logf_psi(x):
            if x >= log40:
                return -math.inf
            return -C * x - 0.5 * sum_dev2 * math.exp(-2.0 * x) + x

        state.psi = math.exp(_slice_scalar(math.log(state.psi), logf_psi, rng))

    if "sigma_lambda" not in fixed:
        sum_lam2 = float(state.lam @ state.lam)

        def logf_sl(x):
            if x >= log40:
                return -math.inf
            return -C * x - 0.5 * sum_lam2 * math.exp(-2.0 * x) + x

        state.sigma_lambda = math.exp(
            _slice_scalar(math.log(state.sigma_lambda), logf_sl, rng)
        )

    if "omega" not in fixed:
        h = _hinge(state.theta, data)
        mean_all = (
            state.beta0
            + state.beta1 * h
            + state.lam[data.country_idx]
            + _fluct_effect(state, data)
        )
        res = data.x - mean_all
        for k in range(len(SURVEY_TYPES)):
            idx = data.survey_obs[k]
            res_k = res[idx]
            nu2_k = data.nu2[idx]

            def logf_omega(x, res_k=res_k, nu2_k=nu2_k):
                if x >= log40:
                    return -math.inf
                var = nu2_k + math.exp(2.0 * x)
                return float(-0.5 * np.sum(np.log(var) + res_k * res_k / var)) + x

            state.omega[k] = math.exp(
                _slice_scalar(math.log(max(state.omega[k], 1e-8)), logf_omega, rng)
            )


# ---------------------------------------------------------------------------
# Initialization


_CHAIN_QUANTILES = (0.25, 0.5, 0.75)
_CHAIN_THETA_SHIFTS = (0.9, 1.0, 1.1)
_CHAIN_SCALE_MULTS = (0.5, 1.0, 2.0)


def init_chain(chain_index: int, data: FitData, seed: int = 0) -> ParameterState:
    """Overdispersed but data-informed starting point for one chain.

    Line coefficients come from weighted least squares on the hinge
    regression with the cutpoint pinned at a chain-specific quantile of
    the observed U5MR; intercepts from per-country mean residuals;
    fluctuations start at zero; scale parameters are residual-based times
    a chain-specific multiplier.
    """
    rng = rngs.rng_for(seed, "init", chain_index)
    base = chain_index % 3
    mult = _CHAIN_SCALE_MULTS[base]
    if chain_index >= 3:
        mult *= math.exp(0.25 * rng.standard_normal())

    if data.n_obs:
        u = np.exp(data.log_u)
        theta = float(np.quantile(u, _CHAIN_QUANTILES[base]))
    else:
        theta = 30.0
    theta *= _CHAIN_THETA_SHIFTS[base]
    if chain_index >= 3:
        theta *= math.exp(0.15 * rng.standard_normal())
    theta = float(np.clip(theta, 1.0, CUTPOINT_PRIOR_UPPER - 1.0))

    C = data.n_countries
    if data.n_obs:
        w0 = 1.0 / np.where(data.is_tau, data.tau2, np.maximum(data.nu2, 1e-4))
        h = np.maximum(data.log_u - math.log(theta), 0.0)
        s0 = float(w0.sum()) + _COEF_PREC
        s1 = float(w0 @ h)
        s2 = float(w0 @ (h * h)) + _COEF_PREC
        b0 = float(w0 @ data.x)
        b1 = float((w0 * h) @ data.x)
        det = s0 * s2 - s1 * s1
        beta0 = (s2 * b0 - s1 * b1) / det
        beta1 = (s0 * b1 - s1 * b0) / det
        resid = data.x - beta0 - beta1 * h
        sw = np.bincount(data.country_idx, weights=w0, minlength=C)
        swr = np.bincount(data.country_idx, weights=w0 * resid, minlength=C)
        lam = np.where(sw > 0, swr / np.maximum(sw, 1e-12), 0.0)
        resid_c = resid - lam[data.country_idx]
        swr2 = np.bincount(data.country_idx, weights=w0 * resid_c**2, minlength=C)
        var_c = np.where(sw > 0, swr2 / np.maximum(sw, 1e-12), math.exp(-4.0))
    else:
        beta0, beta1 = 0.0, 0.0
        lam = np.zeros(C)
        var_c = np.full(C, math.exp(-4.0))

    sigma2 = np.clip(var_c * mult, 1e-5, 10.0)
    lam_sd = float(np.std(lam)) if C > 1 else 0.5
    state = ParameterState(
        beta0=beta0,
        beta1=beta1,
        theta=theta,
        omega=np.full(len(SURVEY_TYPES), float(np.clip(0.08 * mult, 1e-3, 35.0))),
        sigma_lambda=float(np.clip(lam_sd * mult + 0.02, 0.02, 39.0)),
        chi=float(np.mean(np.log(sigma2))) if C else 0.0,
        psi=float(np.clip(0.8 * mult, 0.05, 35.0)),
        lam=lam,
        eps=[np.zeros(c.n_fluct) for c in data.countries],
        sigma2_eps=sigma2,
    )
    return state


def apply_fixed(state: ParameterState, data: FitData, fixed: dict | None) -> None:
    """Pin parameters named in ``fixed`` to their given values."""
    if not fixed:
        return
    for key, value in fixed.items():
        if key == "omega":
            if isinstance(value, dict):
                state.omega = np.asarray([value[s] for s in SURVEY_TYPES], dtype=float)
            else:
                state.omega = np.full(len(SURVEY_TYPES), float(value))
        elif key == "sigma2_eps":
            state.sigma2_eps = np.full(data.n_countries, float(value)) if np.isscalar(
                value
            ) else np.asarray(value, dtype=float).copy()
        elif key in ("beta0", "beta1", "theta", "sigma_lambda", "chi", "psi"):
            setattr(state, key, float(value))
        else:
            raise ValueError(f"cannot fix unknown parameter {key!r}")


# ---------------------------------------------------------------------------
# Posterior density and gradient (finite-difference verified)


def log_posterior(state: ParameterState, data: FitData) -> float:
    """Joint log posterior density at ``state`` (constants included)."""
    from .model import log_prior

    prior = log_prior(state.global_params(), state.country_params())
    if not np.isfinite(prior):
        return -math.inf
    if data.n_obs == 0:
        return prior
    delta2 = _delta2(state, data)
    mean = (
        state.beta0
        + state.beta1 * _hinge(state.theta, data)
        + state.lam[data.country_idx]
        + _fluct_effect(state, data)
    )
    res = data.x - mean
    ll = float(np.sum(normal_logpdf(res, delta2)))
    return ll + prior


def log_posterior_grad(state: ParameterState, data: FitData) -> dict:
    """Analytic gradient of the log posterior for every continuous
    parameter; the cutpoint derivative is valid away from its kinks."""
    delta2 = _delta2(state, data)
    w = 1.0 / delta2 if data.n_obs else delta2
    h = _hinge(state.theta, data)
    mean = (
        state.beta0 + state.beta1 * h + state.lam[data.country_idx]
        + _fluct_effect(state, data)
    )
    res = data.x - mean
    wres = w * res
    C = data.n_countries
    sl = state.sigma_lambda
    psi = state.psi
    grad = {}
    grad["beta0"] = float(wres.sum()) - state.beta0 * _COEF_PREC
    grad["beta1"] = float(wres @ h) - state.beta1 * _COEF_PREC
    above = data.log_u > math.log(state.theta)
    grad["theta"] = float(-state.beta1 / state.theta * wres[above].sum())
    lam_term = np.bincount(data.country_idx, weights=wres, minlength=C)
    for i, c in enumerate(data.countries):
        grad[f"lambda[{c.country_id}]"] = float(lam_term[i] - state.lam[i] / sl**2)
    offsets = np.concatenate([[0], np.cumsum([c.n_obs for c in data.countries])])
    log_s2 = np.log(state.sigma2_eps) if C else np.zeros(0)
    for i, c in enumerate(data.countries):
        wres_c = wres[offsets[i] : offsets[i + 1]]
        s2 = state.sigma2_eps[i]
        g_eps = c.fluct_design.T @ wres_c - state.eps[i] / s2
        for qi in range(c.n_fluct):
            grad[f"eps[{c.country_id}][{qi}]"] = float(g_eps[qi])
        eps_ssq = float(state.eps[i] @ state.eps[i])
        grad[f"sigma2_eps[{c.country_id}]"] = float(
            0.5 * eps_ssq / s2**2
            - 0.5 * c.n_fluct / s2
            - (log_s2[i] - state.chi) / (psi**2 * s2)
            - 1.0 / s2
        )
    for k, s in enumerate(SURVEY_TYPES):
        idx = data.survey_obs[k]
        if idx.size:
            d2 = delta2[idx]
            r = res[idx]
            grad[f"omega[{s}]"] = float(
                state.omega[k] * np.sum(r * r / d2**2 - 1.0 / d2)
            )
        else:
            grad[f"omega[{s}]"] = 0.0
    grad["sigma_lambda"] = float(np.sum(state.lam**2) / sl**3 - C / sl)
    grad["chi"] = float(np.sum(log_s2 - state.chi) / psi**2 - state.chi * _COEF_PREC)
    grad["psi"] = float(np.sum((log_s2 - state.chi) ** 2) / psi**3 - C / psi)
    return grad


# ---------------------------------------------------------------------------
# Chains


@dataclass
class PosteriorDraws:
    """Retained draws: array indexed [chain, draw, parameter]."""

    names: list
    draws: np.ndarray
    iterations: np.ndarray

    def __post_init__(self):
        self.index = {name: i for i, name in enumerate(self.names)}

    @property
    def n_chains(self) -> int:
        return self.draws.shape[0]

    def extract(self, name: str) -> np.ndarray:
        """Draws of one parameter, shape (chains, retained)."""
        return self.draws[:, :, self.index[name]]

    def pooled(self, name: str) -> np.ndarray:
        return self.extract(name).reshape(-1)

    def interval(self, name: str, level: float = 0.95) -> tuple[float, float]:
        tail = 100.0 * (1.0 - level) / 2.0
        lo, hi = np.percentile(self.pooled(name), [tail, 100.0 - tail])
        return float(lo), float(hi)

    def median(self, name: str) -> float:
        return float(np.median(self.pooled(name)))

    def to_frame(self) -> pd.DataFrame:
        n_chains, n_draws, n_params = self.draws.shape
        chains = np.repeat(np.arange(n_chains), n_draws * n_params)
        iters = np.tile(np.repeat(self.iterations, n_params), n_chains)
        params = np.tile(np.asarray(self.names, dtype=object), n_chains * n_draws)
        return pd.DataFrame(
            {
                "parameter": params,
                "chain": chains,
                "iteration": iters,
                "value": self.draws.reshape(-1),
            }
        )

    def save(self, path) -> None:
        self.to_frame().to_csv(path, index=False)

    @classmethod
    def load(cls, path) -> "PosteriorDraws":
        frame = pd.read_csv(path)
        names = list(dict.fromkeys(frame["parameter"]))
        chains = np.sort(frame["chain"].unique())
        iterations = np.sort(frame["iteration"].unique())
        n_params, n_chains, n_draws = len(names), len(chains), len(iterations)
        draws = (
            frame["value"]
            .to_numpy()
            .reshape(n_chains, n_draws, n_params)
        )
        return cls(names=names, draws=draws, iterations=iterations)


def _sweep(state, data, rng, step, config: ChainConfig, adapt: bool):
    fixed = config.fixed
    if not fixed or "theta" not in fixed:
        # the cutpoint move ends with an exact joint redraw of the whole
        # Gaussian block, which subsumes the separate per-block draws
        update_theta(state, data, rng, step)
        if adapt and step.proposed >= config.adapt_window:
            step.adapt(config.target_accept_low, config.target_accept_high)
    else:
        update_linear_block(state, data, rng)
    update_variances(state, data, rng, fixed)


def _run_chain(chain_index: int, config: ChainConfig, data: FitData):
    rng = np.random.default_rng(
        rngs.seed_sequence(config.master_seed, "chain", chain_index)
    )
    state = init_chain(chain_index, data, config.master_seed)
    apply_fixed(state, data, config.fixed)
    step = ThetaStep()
    n_params = len(parameter_names(data))
    retained = np.empty((config.retained_per_chain, n_params))
    iterations = np.empty(config.retained_per_chain, dtype=np.int64)
    k = 0
    for it in range(config.n_iter):
        try:
            _sweep(state, data, rng, step, config, adapt=it < config.burn_in)
        except SamplerError as exc:
            if not exc.dump:
                exc.dump = {
                    "iteration": it,
                    "state": dict(zip(parameter_names(data), flatten_state(state))),
                }
            raise
        vec = flatten_state(state)
        if not np.all(np.isfinite(vec)):
            bad = [n for n, v in zip(parameter_names(data), vec) if not np.isfinite(v)]
            raise SamplerError(
                f"chain {chain_index}: non-finite state at iteration {it}: {bad[:10]}",
                dump={"iteration": it, "state": dict(zip(parameter_names(data), vec))},
            )
        if it >= config.burn_in and (it - config.burn_in) % config.thin == 0:
            retained[k] = vec
            iterations[k] = it
            k += 1
    lp = log_posterior(state, data)
    if not np.isfinite(lp):
        raise SamplerError(
            f"chain {chain_index}: non-finite log posterior at final state",
            dump={"state": dict(zip(parameter_names(data), flatten_state(state)))},
        )
    return retained[:k], iterations[:k]


def run(config: ChainConfig, data: FitData) -> PosteriorDraws:
    """Run all chains, apply burn-in and thinning, merge with chain labels.

    Fully deterministic given the master seed, for any thread count.
    """
    names = parameter_names(data)
    jobs = list(range(config.n_chains))
    if config.threads > 1 and config.n_chains > 1:
        workers = min(config.threads, config.n_chains, os.cpu_count() or 1)
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_chain, jobs, [config] * len(jobs), [data] * len(jobs)))
    else:
        results = [_run_chain(j, config, data) for j in jobs]
    draws = np.stack([r[0] for r in results])
    iterations = results[0][1]
    return PosteriorDraws(names=names, draws=draws, iterations=iterations)


# ---------------------------------------------------------------------------
# Convergence diagnostics


def gelman_rubin(chain_draws: np.ndarray) -> float:
    """Potential scale reduction factor (between/within variance form).

    Expects shape (chains, draws).  Returns +inf when the within-chain
    variance is zero; the estimator is floored at 1 so identical chains
    give exactly 1.0.
    """
    chain_draws = np.asarray(chain_draws, dtype=float)
    if chain_draws.ndim != 2:
        raise ValueError("expected (chains, draws)")
    m, n = chain_draws.shape
    if m < 2:
        raise ValueError("need at least 2 chains")
    if n < 10:
        raise ValueError("need at least 10 draws per chain")
    within = float(np.mean(np.var(chain_draws, axis=1, ddof=1)))
    if within == 0.0:
        return math.inf
    between = n * float(np.var(np.mean(chain_draws, axis=1), ddof=1))
    var_hat = (n - 1) / n * within + between / n
    return math.sqrt(max(var_hat / within, 1.0))


def _autocovariances(centered: np.ndarray) -> np.ndarray:
    """Biased per-chain autocovariances averaged over chains (FFT-based)."""
    from scipy.fft import irfft, next_fast_len, rfft

    m, n = centered.shape
    nfft = next_fast_len(2 * n)
    freq = rfft(centered, nfft, axis=1)
    acov = irfft(freq * np.conj(freq), nfft, axis=1)[:, :n].real / n
    return acov.mean(axis=0)


def effective_sample_size(draws: np.ndarray) -> float:
    """Effective sample size via the initial-positive-sequence estimator.

    Accepts a single chain (1-D) or stacked chains (chains, draws).
    Correlation pairs are accumulated while their sum stays positive, so
    the result never exceeds the number of draws.  Returns NaN for a
    constant series.
    """
    x = np.atleast_2d(np.asarray(draws, dtype=float))
    m, n = x.shape
    if m * n < 50:
        raise ValueError("need at least 50 draws")
    mean_c = x.mean(axis=1, keepdims=True)
    within = float(np.var(x, axis=1, ddof=1).mean())
    if within == 0.0:
        return math.nan
    between = n * float(np.var(mean_c, ddof=1)) if m > 1 else 0.0
    var_plus = (n - 1) / n * within + between / n
    acov = _autocovariances(x - mean_c)
    rho = 1.0 - (within - acov) / var_plus  # rho[0] is approximately 1
    # Geyer initial positive monotone sequence on paired correlations
    tau = 1.0
    t = 1
    prev_pair = math.inf
    while t + 1 < n:
        pair = rho[t] + rho[t + 1]
        if pair <= 0.0:
            break
        pair = min(pair, prev_pair)
        prev_pair = pair
        tau += 2.0 * pair
        t += 2
    return m * n / tau


def diagnostics_table(posterior: PosteriorDraws) -> pd.DataFrame:
    """R-hat and effective sample size for every parameter."""
    rows = []
    for name in posterior.names:
        chains = posterior.extract(name)
        constant = bool(np.all(chains == chains[0, 0]))
        if constant:
            rows.append({"parameter": name, "rhat": 1.0, "ess": math.nan})
            continue
        try:
            rhat = gelman_rubin(chains) if chains.shape[0] >= 2 else math.nan
        except ValueError:
            rhat = math.nan
        try:
            ess = effective_sample_size(chains)
        except ValueError:
            ess = math.nan
        rows.append({"parameter": name, "rhat": rhat, "ess": ess})
    return pd.DataFrame(rows)
