"""Out-of-sample validation.

The training set drops each country's most recent data: for countries
with several series, the series whose latest observation is most recent
is removed whole; for single-series countries the most recent fifth of
observations (by count, rounded up) goes.  Left-out observations are
scored on the NMR scale against the predictive distribution of a new
observation from the training fit, which includes the observation's own
error variance, and summarized over resampled one-per-country sets.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import rngs
from .estimates import estimate_all, project_coefficients
from .ingest import _fmt
from .model import SURVEY_TYPES, ratio_to_nmr
from .sampler import ChainConfig, FitData, PosteriorDraws, build_fit_data, run
from .splines import SplineBasis, difference_transform

LEFT_OUT_FRACTION = 0.20
COVERAGE_LEVELS = (0.80, 0.90, 0.95)
COMPARISON_SPLIT_YEAR = 2005


def build_training_set(observations) -> tuple[list, list, list]:
    """Partition included observations into (training, left-out).

    Returns (train, left_out, warnings); the two lists partition the
    included observations exactly.
    """
    included = [o for o in observations if o.included]
    by_country: dict[str, list] = {}
    for o in included:
        by_country.setdefault(o.country_id, []).append(o)
    train, left_out, warnings = [], [], []
    for cid in sorted(by_country):
        obs = sorted(by_country[cid], key=lambda o: (o.t, o.series_id))
        if len(obs) < 2:
            warnings.append(f"{cid}: fewer than 2 observations, nothing removed")
            train.extend(obs)
            continue
        series: dict[str, list] = {}
        for o in obs:
            series.setdefault(o.series_id, []).append(o)
        if len(series) >= 2:
            newest = max(sorted(series), key=lambda sid: max(o.t for o in series[sid]))
            for sid, members in series.items():
                (left_out if sid == newest else train).extend(members)
        else:
            k = math.ceil(LEFT_OUT_FRACTION * len(obs))
            train.extend(obs[:-k])
            left_out.extend(obs[-k:])
    return train, left_out, warnings


def absolute_relative_error(left_out_nmr: float, predicted_median_nmr: float) -> float:
    """|observed - predicted| / predicted."""
    if predicted_median_nmr <= 0:
        raise ValueError("predicted median must be positive")
    return abs(left_out_nmr - predicted_median_nmr) / predicted_median_nmr


def coverage(values, lowers, uppers) -> float:
    """Fraction of values inside [lower, upper)."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise ValueError("coverage undefined for an empty set")
    lowers = np.asarray(lowers, dtype=float)
    uppers = np.asarray(uppers, dtype=float)
    return float(np.mean((values >= lowers) & (values < uppers)))


def predictive_nmr_draws(
    posterior: PosteriorDraws,
    data: FitData,
    left_out: list,
    seed: int = 0,
) -> dict:
    """Predictive NMR draws for each left-out observation.

    Predictions are for a new observation: model log ratio at the
    observation time (spline coefficients projected beyond the training
    data where needed) plus noise with the observation's own error
    variance, transformed with the observation's own U5MR.  Returns
    {id(obs): draws}.
    """
    by_country: dict[str, list] = {}
    for o in left_out:
        by_country.setdefault(o.country_id, []).append(o)
    beta0 = posterior.pooled("beta0")
    beta1 = posterior.pooled("beta1")
    theta = posterior.pooled("theta")
    omega = {s: posterior.pooled(f"omega[{s}]") for s in SURVEY_TYPES}
    out = {}
    for cid in sorted(by_country):
        pos = data.country_position(cid)
        fc = data.countries[pos]
        rng = rngs.rng_for(seed, "predict", cid)
        lam = posterior.pooled(f"lambda[{cid}]")
        eps = np.column_stack(
            [posterior.pooled(f"eps[{cid}][{q}]") for q in range(fc.n_fluct)]
        )
        sigma2 = posterior.pooled(f"sigma2_eps[{cid}]")
        alpha = lam[:, None] + eps @ difference_transform(fc.k_fit).matrix.T
        alpha = project_coefficients(alpha, sigma2, fc.grid.n_basis, rng)
        obs_list = by_country[cid]
        ts = np.asarray([o.t for o in obs_list])
        basis = SplineBasis(fc.grid).design_matrix(ts)
        log_p = alpha @ basis.T  # (draw, obs)
        for j, o in enumerate(obs_list):
            if o.u5mr is None or o.nmr is None:
                raise ValueError(
                    f"{cid}/{o.series_id}: left-out observation lacks nmr/u5mr"
                )
            log_u = math.log(o.u5mr)
            hinge = np.maximum(log_u - np.log(theta), 0.0)
            log_r = beta0 + beta1 * hinge + log_p[:, j]
            if o.series_type in ("VR", "SVR"):
                sd = float(o.stochastic_sd)
            else:
                sd = np.sqrt(float(o.sampling_sd) ** 2 + omega[o.series_type] ** 2)
            pred_log_r = log_r + rng.standard_normal(log_r.size) * sd
            r = np.exp(np.clip(pred_log_r, -600.0, 600.0))
            out[id(o)] = ratio_to_nmr(r, o.u5mr)
    return out


@dataclass
class ValidationReport:
    """Medians and SDs of the left-out measures plus the train/full
    comparison split at 2005."""

    measures: dict  # measure -> {"median": float, "sd": float}
    comparison: dict  # period -> {measure: value}
    n_sets: int
    n_left_out: int
    n_train: int
    set_values: dict  # measure -> per-set values (kept for tests)


def _interval(draws: np.ndarray, level: float) -> tuple[np.ndarray, np.ndarray]:
    tail = 100.0 * (1.0 - level) / 2.0
    lo, hi = np.percentile(draws, [tail, 100.0 - tail], axis=0)
    return lo, hi


def run_validation(
    observations,
    countries: dict,
    *,
    fit_config: ChainConfig,
    n_sets: int = 100,
    seed: int = 0,
    horizon: float | None = None,
) -> ValidationReport:
    """Full validation harness: training fit, predictive scoring over
    resampled left-out sets, and the train-versus-full comparison."""
    from .splines import DEFAULT_HORIZON

    horizon = DEFAULT_HORIZON if horizon is None else horizon
    train, left_out, _ = build_training_set(observations)
    if not left_out:
        raise ValueError("no observations could be left out")
    included = [o for o in observations if o.included]
    # the training fit shares the full dataset's knot grids so left-out
    # observations are always on the basis (their times are design, not data)
    first_obs = {}
    for o in included:
        first_obs[o.country_id] = min(first_obs.get(o.country_id, o.t), o.t)
    train_data = build_fit_data(
        train, countries, horizon=horizon, grid_start=first_obs
    )
    full_data = build_fit_data(included, countries, horizon=horizon)
    train_seed = int(rngs.seed_sequence(seed, "train-fit").generate_state(1)[0])
    full_seed = int(rngs.seed_sequence(seed, "full-fit").generate_state(1)[0])
    train_posterior = run(
        _with_seed(fit_config, train_seed), train_data
    )
    full_posterior = run(_with_seed(fit_config, full_seed), full_data)

    preds = predictive_nmr_draws(train_posterior, train_data, left_out, seed=seed)
    are = {}
    inside = {lvl: {} for lvl in COVERAGE_LEVELS}
    for o in left_out:
        draws = preds[id(o)]
        med = float(np.median(draws))
        are[id(o)] = absolute_relative_error(o.nmr, med)
        for lvl in COVERAGE_LEVELS:
            lo, hi = np.percentile(
                draws, [100 * (1 - lvl) / 2, 100 - 100 * (1 - lvl) / 2]
            )
            inside[lvl][id(o)] = bool(lo <= o.nmr < hi)

    by_country: dict[str, list] = {}
    for o in left_out:
        by_country.setdefault(o.country_id, []).append(o)
    set_values = {"are": []}
    for lvl in COVERAGE_LEVELS:
        set_values[f"cov{int(lvl * 100)}"] = []
    for k in range(n_sets):
        rng = rngs.rng_for(seed, "valset", k)
        picks = [
            obs_list[int(rng.integers(0, len(obs_list)))]
            for cid, obs_list in sorted(by_country.items())
        ]
        set_values["are"].append(float(np.median([are[id(o)] for o in picks])))
        for lvl in COVERAGE_LEVELS:
            set_values[f"cov{int(lvl * 100)}"].append(
                float(np.mean([inside[lvl][id(o)] for o in picks]))
            )

    measures = {
        name: {
            "median": float(np.median(vals)),
            "sd": float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0,
        }
        for name, vals in set_values.items()
    }

    comparison = _train_full_comparison(
        train_posterior, train_data, full_posterior, full_data, countries, seed, horizon
    )
    return ValidationReport(
        measures=measures,
        comparison=comparison,
        n_sets=n_sets,
        n_left_out=len(left_out),
        n_train=len(train),
        set_values=set_values,
    )


def _with_seed(config: ChainConfig, master_seed: int) -> ChainConfig:
    from dataclasses import replace

    return replace(config, master_seed=master_seed)


def _train_full_comparison(
    train_posterior, train_data, full_posterior, full_data, countries, seed, horizon
) -> dict:
    """Compare training-fit estimates against full-fit estimates,
    reported separately for years up to and after the split year."""
    fitted = sorted(
        {c.country_id for c in full_data.countries}
        & {c.country_id for c in train_data.countries}
    )
    subset = {cid: countries[cid] for cid in fitted}
    train_grids = estimate_all(train_posterior, train_data, subset, seed=seed)
    full_grids = estimate_all(full_posterior, full_data, subset, seed=seed)
    cells = {"le": [], "gt": []}
    for cid in fitted:
        tg, fg = train_grids[cid], full_grids[cid]
        common = np.intersect1d(tg.years, fg.years)
        ti = np.searchsorted(tg.years, common)
        fi = np.searchsorted(fg.years, common)
        for j, year in enumerate(common):
            period = "le" if math.floor(year) <= COMPARISON_SPLIT_YEAR else "gt"
            full_med = float(fg.median[fi[j]])
            train_med = float(tg.median[ti[j]])
            row = {"are": abs(full_med - train_med) / train_med}
            for lvl in COVERAGE_LEVELS:
                lo, hi = _interval(tg.trajectories[:, ti[j]], lvl)
                row[f"cov{int(lvl * 100)}"] = bool(lo <= full_med < hi)
            cells[period].append(row)
    out = {}
    for period, rows in cells.items():
        key = f"{period}{COMPARISON_SPLIT_YEAR}"
        if not rows:
            out[key] = {}
            continue
        out[key] = {"are": float(np.median([r["are"] for r in rows]))}
        for lvl in COVERAGE_LEVELS:
            name = f"cov{int(lvl * 100)}"
            out[key][name] = float(np.mean([r[name] for r in rows]))
    return out


def write_validation_report(path, report: ValidationReport) -> None:
    """validation_report.csv with the left-out and comparison tables."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["table", "measure", "stat", "value"])
        for name in ("are", "cov80", "cov90", "cov95"):
            for stat in ("median", "sd"):
                writer.writerow(
                    ["left_out", name, stat, _fmt(report.measures[name][stat])]
                )
        for period, row in report.comparison.items():
            for name, value in row.items():
                writer.writerow(["comparison", name, period, _fmt(float(value))])
