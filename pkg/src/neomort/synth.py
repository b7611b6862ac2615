"""Synthetic multi-country datasets with known ground truth.

Countries follow configurable data patterns (full registration, mixed,
survey-only, sparse, no data).  U5MR trajectories are smooth logistic
declines; country multipliers, smoothing variances and fluctuations are
drawn from the generative model; observations carry the error mechanism of
their source type (Poisson/Binomial death counts for registration data,
normal log-ratio noise for surveys).  The truth record keeps every latent
quantity so tests can assert recovery.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import rngs
from .ingest import ImputationTable, RawRecord, write_countries, write_observations
from .model import SURVEY_TYPES, CountryInput, GlobalParams, log_f
from .splines import (
    DEFAULT_HORIZON,
    SplineBasis,
    build_knot_grid,
    coefficients_from,
    difference_transform,
    midyear,
)

PATTERNS = ("full_vr", "mixed", "survey_only", "sparse", "none")


@dataclass
class Scenario:
    """Counts of countries per data pattern plus data-shape knobs."""

    n_full_vr: int = 10
    n_mixed: int = 15
    n_survey_only: int = 12
    n_sparse: int = 0
    n_none: int = 3
    vr_start_years: tuple = (1972, 1990)
    vr_end_year: int = 2014
    mixed_vr_start_years: tuple = (1997, 2004)
    survey_series_range: tuple = (2, 4)
    survey_obs_range: tuple = (10, 16)
    sparse_obs_range: tuple = (2, 4)
    survey_year_range: tuple = (1985, 2014)
    births_range: tuple = (8_000.0, 3_000_000.0)
    u5mr_start_range: tuple = (40.0, 260.0)
    u5mr_end_range: tuple = (4.0, 60.0)
    reported_se_fraction: float = 0.7
    svr_fraction_mixed: float = 0.2
    noise_scale: float = 1.0  # scales survey noise; 0 gives exact observations
    excluded_fraction: float = 0.0
    n_crisis_countries: int = 0
    emit_u5mr_draws: bool = False
    n_u5mr_draws: int = 100
    horizon: float = DEFAULT_HORIZON

    def counts(self) -> dict:
        return {
            "full_vr": self.n_full_vr,
            "mixed": self.n_mixed,
            "survey_only": self.n_survey_only,
            "sparse": self.n_sparse,
            "none": self.n_none,
        }

    def total(self) -> int:
        return sum(self.counts().values())


def default_truth() -> GlobalParams:
    """Plausible global parameters for test scenarios."""
    return GlobalParams(
        beta0=0.18,
        beta1=-0.62,
        theta=34.0,
        omega={"DHS": 0.05, "OtherDHS": 0.08, "MICS": 0.10, "Others": 0.12},
        sigma_lambda=0.20,
        chi=-4.0,
        psi=1.0,
    )


@dataclass
class CountryTruth:
    country_id: str
    pattern: str
    lam: float
    sigma2_eps: float
    eps: np.ndarray
    grid_first_obs: float | None
    u5mr_curve: dict = field(default_factory=dict)  # midyear -> U


@dataclass
class SynthData:
    records: list
    countries: dict
    truth: GlobalParams
    country_truth: dict
    u5mr_draws: dict  # country -> (years, draws) or empty
    horizon: float = DEFAULT_HORIZON

    def write(self, out_dir) -> None:
        os.makedirs(out_dir, exist_ok=True)
        write_observations(os.path.join(out_dir, "observations.csv"), self.records)
        write_countries(os.path.join(out_dir, "countries.csv"), self.countries)
        write_truth(os.path.join(out_dir, "truth.csv"), self)
        if self.u5mr_draws:
            _write_u5mr_draws(os.path.join(out_dir, "u5mr_draws.csv"), self.u5mr_draws)


def true_log_ratio(
    synth: SynthData, country_id: str, t, truth: GlobalParams | None = None
) -> np.ndarray:
    """Noise-free model log ratio for a generated country at time(s) t."""
    truth = truth or synth.truth
    ct = synth.country_truth[country_id]
    country = synth.countries[country_id]
    grid = build_knot_grid(ct.grid_first_obs, horizon=synth.horizon)
    basis = SplineBasis(grid)
    alpha = coefficients_from(ct.lam, ct.eps, difference_transform(grid.n_basis))
    u = country.u5mr_at(t)
    return (
        log_f(u, truth.beta0, truth.beta1, truth.theta)
        + basis.design_matrix(np.atleast_1d(t)) @ alpha
    )


def generate(
    scenario: Scenario, truth: GlobalParams | None = None, seed: int = 0
) -> SynthData:
    """Generate one dataset; deterministic given the seed."""
    if scenario.total() == 0:
        raise ValueError("scenario must contain at least one country")
    truth = truth or default_truth()
    table = ImputationTable.default()

    patterns = []
    for name, count in scenario.counts().items():
        patterns.extend([name] * count)

    attr_rng = rngs.rng_for(seed, "synth", "attrs")
    countries: dict[str, CountryInput] = {}
    meta = {}
    for i, pattern in enumerate(patterns):
        cid = f"C{i + 1:03d}"
        births = math.exp(
            attr_rng.uniform(
                math.log(scenario.births_range[0]), math.log(scenario.births_range[1])
            )
        )
        u_start = math.exp(
            attr_rng.uniform(
                math.log(scenario.u5mr_start_range[0]),
                math.log(scenario.u5mr_start_range[1]),
            )
        )
        u_end = math.exp(
            attr_rng.uniform(
                math.log(scenario.u5mr_end_range[0]),
                math.log(scenario.u5mr_end_range[1]),
            )
        )
        u_end = min(u_end, 0.8 * u_start)
        t_mid = attr_rng.uniform(1985.0, 2010.0)
        rate = attr_rng.uniform(0.08, 0.35)
        meta[cid] = {
            "pattern": pattern,
            "births": births,
            "u": (u_start, u_end, t_mid, rate),
        }

    def u5mr_of(cid, t):
        u_start, u_end, t_mid, rate = meta[cid]["u"]
        t = np.asarray(t, dtype=float)
        out = u_end + (u_start - u_end) / (1.0 + np.exp(rate * (t - t_mid)))
        return out if out.ndim else float(out)

    years_all = list(range(1970, int(scenario.horizon) + 1))
    for cid, m in meta.items():
        u5mr_point = {midyear(y): float(u5mr_of(cid, midyear(y))) for y in years_all}
        countries[cid] = CountryInput(
            country_id=cid,
            name=f"Country {cid[1:]}",
            u5mr_point=u5mr_point,
            births={y: m["births"] for y in years_all},
        )

    crisis_rng = rngs.rng_for(seed, "synth", "crisis")
    with_data = [cid for cid in meta if meta[cid]["pattern"] != "none"]
    for cid in crisis_rng.choice(
        with_data, size=min(scenario.n_crisis_countries, len(with_data)), replace=False
    ):
        year = int(crisis_rng.integers(1992, 2012))
        countries[cid].crisis_adjustments[year] = float(crisis_rng.uniform(0.5, 2.0))

    records: list[RawRecord] = []
    country_truth: dict[str, CountryTruth] = {}
    u5mr_draws: dict = {}

    for cid in sorted(meta):
        m = meta[cid]
        rng = rngs.rng_for(seed, "synth", cid)
        pattern = m["pattern"]

        obs_plan = _plan_observations(pattern, scenario, rng)
        first_obs = min((t for t, _ in obs_plan), default=None)

        grid = build_knot_grid(first_obs, horizon=scenario.horizon, country_id=cid)
        lam = float(rng.normal(0.0, truth.sigma_lambda))
        sigma2 = float(np.exp(rng.normal(truth.chi, truth.psi)))
        eps = rng.normal(0.0, math.sqrt(sigma2), size=grid.n_basis - 1)
        alpha = coefficients_from(lam, eps, difference_transform(grid.n_basis))
        basis = SplineBasis(grid)
        country_truth[cid] = CountryTruth(
            country_id=cid,
            pattern=pattern,
            lam=lam,
            sigma2_eps=sigma2,
            eps=eps,
            grid_first_obs=first_obs,
            u5mr_curve=dict(countries[cid].u5mr_point),
        )

        def log_r_true(t):
            u = u5mr_of(cid, t)
            return float(
                log_f(u, truth.beta0, truth.beta1, truth.theta)
                + basis.eval(float(t)) @ alpha
            )

        for t, source in obs_plan:
            year = int(t - 0.5)
            if source == "VR":
                rec = _draw_vr_record(
                    cid, year, t, m["births"], u5mr_of(cid, t), log_r_true(t), rng
                )
            elif source == "SVR":
                rec = _draw_survey_record(
                    cid, year, t, "SVR", f"{cid}-SVR", u5mr_of(cid, t),
                    log_r_true(t), 0.0, 0.20, None, rng,
                    noise_scale=scenario.noise_scale,
                )
            else:
                # survey noise depends on the size category, which needs all
                # countries' births; defer as a placeholder tuple
                stype, sid = source
                reported = rng.uniform() < scenario.reported_se_fraction
                nu = float(rng.uniform(0.08, 0.30)) if reported else None
                rec = (cid, year, t, stype, sid, nu)
            records.append(rec)

        if scenario.emit_u5mr_draws:
            years = np.asarray([midyear(y) for y in years_all])
            factors = np.exp(rng.normal(0.0, 0.02, size=scenario.n_u5mr_draws))
            base = np.asarray([countries[cid].u5mr_point[y] for y in years])
            u5mr_draws[cid] = (years, factors[:, None] * base[None, :])

    # survey records need size categories (imputed SDs double as true ones)
    from .ingest import size_categories

    categories, _ = size_categories(countries)
    resolved: list[RawRecord] = []
    for rec in records:
        if isinstance(rec, RawRecord):
            resolved.append(rec)
            continue
        cid, year, t, stype, sid, nu = rec
        rng = rngs.rng_for(seed, "synth", cid, sid, year)
        truth_ct = country_truth[cid]
        grid = build_knot_grid(
            truth_ct.grid_first_obs, horizon=scenario.horizon, country_id=cid
        )
        alpha = coefficients_from(
            truth_ct.lam, truth_ct.eps, difference_transform(grid.n_basis)
        )
        u = float(countries[cid].u5mr_at(t))
        log_r = float(
            log_f(u, truth.beta0, truth.beta1, truth.theta)
            + SplineBasis(grid).eval(t) @ alpha
        )
        nu_true = nu if nu is not None else table.values[(stype, categories[cid])]
        omega = truth.omega[stype]
        resolved.append(
            _draw_survey_record(
                cid, year, t, stype, sid, u, log_r, omega, nu_true, nu, rng,
                noise_scale=scenario.noise_scale,
            )
        )
    records = resolved

    if scenario.excluded_fraction > 0:
        ex_rng = rngs.rng_for(seed, "synth", "excluded")
        for rec in records:
            if ex_rng.uniform() < scenario.excluded_fraction:
                rec.included = False

    records.sort(key=lambda r: (r.country_id, r.year, r.series_id))
    return SynthData(
        records=records,
        countries=countries,
        truth=truth,
        country_truth=country_truth,
        u5mr_draws=u5mr_draws,
        horizon=scenario.horizon,
    )


def _plan_observations(pattern: str, scenario: Scenario, rng) -> list:
    """List of (t, source) pairs; source is "VR", "SVR", or (type, series_id)."""
    plan = []
    if pattern == "none":
        return plan
    if pattern in ("full_vr", "mixed"):
        lo, hi = (
            scenario.vr_start_years if pattern == "full_vr" else scenario.mixed_vr_start_years
        )
        start = int(rng.integers(lo, hi + 1))
        for year in range(start, scenario.vr_end_year + 1):
            plan.append((midyear(year), "VR"))
    n_series = 0
    if pattern == "mixed":
        n_series = int(rng.integers(1, 3))
    elif pattern == "survey_only":
        n_series = int(rng.integers(*scenario.survey_series_range))
    elif pattern == "sparse":
        n_series = 1
    if pattern == "mixed" and rng.uniform() < scenario.svr_fraction_mixed:
        svr_years = range(scenario.vr_end_year - 8, scenario.vr_end_year - 2)
        plan.extend((midyear(y), "SVR") for y in svr_years)
    lo_y, hi_y = scenario.survey_year_range
    for k in range(n_series):
        stype = str(rng.choice(SURVEY_TYPES, p=[0.5, 0.2, 0.15, 0.15]))
        if pattern == "sparse":
            n_obs = int(rng.integers(*scenario.sparse_obs_range))
        else:
            n_obs = int(rng.integers(*scenario.survey_obs_range))
        n_obs = min(n_obs, hi_y - lo_y + 1)
        years = sorted(rng.choice(np.arange(lo_y, hi_y + 1), size=n_obs, replace=False))
        plan.extend((midyear(int(y)), (stype, f"s{k + 1}")) for y in years)
    return plan


def _draw_vr_record(cid, year, t, births, u_true, log_r_true, rng) -> RawRecord:
    """Registration record via Poisson/Binomial death counts (degenerates redrawn)."""
    q5 = u_true / 1000.0
    share = 1.0 / (1.0 + math.exp(-log_r_true))  # neonatal share of under-five deaths
    for _ in range(10_000):
        d5 = int(rng.poisson(births * q5))
        if d5 == 0:
            continue
        dn = int(rng.binomial(d5, share))
        if 0 < dn < d5:
            break
    else:
        raise RuntimeError(f"{cid} {year}: cannot draw nondegenerate VR counts")
    return RawRecord(
        country_id=cid,
        year=float(year),
        nmr=dn / births * 1000.0,
        u5mr=d5 / births * 1000.0,
        series_type="VR",
        series_id=f"{cid}-VR",
        sampling_sd=None,
        births=births,
        included=True,
    )


def _draw_survey_record(
    cid, year, t, stype, sid, u_true, log_r_true, omega, nu_true, nu_reported, rng,
    noise_scale: float = 1.0,
) -> RawRecord:
    noise_sd = math.hypot(nu_true, omega) * noise_scale
    log_r_obs = log_r_true + rng.normal(0.0, noise_sd)
    r_obs = math.exp(log_r_obs)
    nmr_obs = u_true * r_obs / (1.0 + r_obs)
    return RawRecord(
        country_id=cid,
        year=float(year),
        nmr=nmr_obs,
        u5mr=u_true,
        series_type=stype,
        series_id=f"{cid}-{sid}" if not sid.startswith(cid) else sid,
        sampling_sd=nu_reported,
        births=None,
        included=True,
    )


def write_truth(path, data: SynthData) -> None:
    """Persist every latent quantity in long format."""
    truth = data.truth
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["country_id", "quantity", "year", "value"])

        def row(cid, quantity, year, value):
            writer.writerow(
                [cid, quantity, "" if year is None else repr(float(year)), repr(float(value))]
            )

        for name in ("beta0", "beta1", "theta", "sigma_lambda", "chi", "psi"):
            row("", name, None, getattr(truth, name))
        for stype in SURVEY_TYPES:
            row("", f"omega_{stype}", None, truth.omega[stype])
        for cid in sorted(data.country_truth):
            ct = data.country_truth[cid]
            row(cid, "lambda", None, ct.lam)
            row(cid, "sigma2_eps", None, ct.sigma2_eps)
            for q, e in enumerate(ct.eps):
                row(cid, f"eps[{q}]", None, e)
            grid = build_knot_grid(ct.grid_first_obs, horizon=data.horizon)
            basis = SplineBasis(grid)
            alpha = coefficients_from(
                ct.lam, ct.eps, difference_transform(grid.n_basis)
            )
            start = math.floor(grid.t_start) + 0.5
            if start < grid.t_start:
                start += 1.0
            years = np.arange(max(start, 1970.5), data.horizon + 1e-9, 1.0)
            u = data.countries[cid].u5mr_at(years)
            log_r = (
                log_f(u, truth.beta0, truth.beta1, truth.theta)
                + basis.design_matrix(years) @ alpha
            )
            r = np.exp(log_r)
            nmr = u * r / (1.0 + r)
            for y, rv, nv in zip(years, r, nmr):
                row(cid, "R", y, rv)
                row(cid, "NMR", y, nv)


def load_truth(path) -> tuple[dict, dict]:
    """Read truth.csv back: (global dict, per-country dict of quantities)."""
    global_truth, country_truth = {}, {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            cid = row["country_id"]
            quantity = row["quantity"]
            value = float(row["value"])
            if cid == "":
                global_truth[quantity] = value
            else:
                entry = country_truth.setdefault(cid, {})
                if row["year"]:
                    entry.setdefault(quantity, {})[float(row["year"])] = value
                else:
                    entry[quantity] = value
    return global_truth, country_truth


def _write_u5mr_draws(path, u5mr_draws: dict) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["country_id", "draw_index", "year", "u5mr"])
        for cid in sorted(u5mr_draws):
            years, draws = u5mr_draws[cid]
            for d in range(draws.shape[0]):
                for j, y in enumerate(years):
                    writer.writerow([cid, d, repr(float(y)), repr(float(draws[d, j]))])
