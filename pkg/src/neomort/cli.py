"""Command-line pipeline: simulate, preprocess, fit, estimate, validate.

Every command is a pure function of its inputs, flags and seed; reruns
with identical arguments produce byte-identical outputs for any thread
count.  Exit codes: 0 success, 1 usage error, 2 data error,
3 convergence failure.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import shutil
import sys

import numpy as np

from . import estimates as est
from . import ingest, plots, synth, validation
from .ingest import DataError
from .sampler import (
    ChainConfig,
    PosteriorDraws,
    SamplerError,
    build_fit_data,
    diagnostics_table,
    run,
)
from .splines import DEFAULT_HORIZON

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_CONVERGENCE = 3


class UsageError(Exception):
    pass


class ConvergenceError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def parse_config(path) -> dict:
    """Plain key=value configuration file ('#' starts a comment)."""
    values = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{line_no}: expected key = value")
            key, value = line.split("=", 1)
            values[key.strip()] = value.strip()
    return values


def _build_parser() -> _Parser:
    parser = _Parser(prog="neomort", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic dataset with truth")
    p.add_argument("--scenario", help="key=value scenario file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("preprocess", help="build the fit-ready dataset")
    p.add_argument("--obs", required=True)
    p.add_argument("--countries", required=True)
    p.add_argument("--u5mr-draws", dest="u5mr_draws")
    p.add_argument("--config", help="key=value overrides (imputation table cells)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("fit", help="run the MCMC sampler")
    p.add_argument("--data", required=True, help="preprocess output directory")
    p.add_argument("--config", help="key=value defaults for chain settings")
    p.add_argument("--chains", type=int)
    p.add_argument("--iter", type=int, dest="n_iter")
    p.add_argument("--burnin", type=int)
    p.add_argument("--thin", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--horizon", type=float)
    p.add_argument("--no-strict", action="store_true", help="do not fail on Rhat >= 1.1")
    p.add_argument("--out", required=True)

    p = sub.add_parser("estimate", help="trajectories, summaries and plots")
    p.add_argument("--fit", required=True, help="fit output directory")
    p.add_argument("--seed", type=int, help="defaults to the fit's master seed")
    p.add_argument("--plots", action="store_true")
    p.add_argument("--save-draws", action="store_true", dest="save_draws")
    p.add_argument("--out", required=True)

    p = sub.add_parser("validate", help="out-of-sample validation harness")
    p.add_argument("--data", required=True, help="preprocess output directory")
    p.add_argument("--config", help="key=value defaults for chain settings")
    p.add_argument("--sets", type=int, default=100)
    p.add_argument("--chains", type=int)
    p.add_argument("--iter", type=int, dest="n_iter")
    p.add_argument("--burnin", type=int)
    p.add_argument("--thin", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--horizon", type=float)
    p.add_argument("--out", required=True)
    return parser


def _require_file(path, what):
    if not os.path.exists(path):
        raise DataError(f"{what} not found: {path}")


def _chain_config(args, defaults: dict) -> ChainConfig:
    def pick(flag, key, cast, fallback):
        if flag is not None:
            return flag
        if key in defaults:
            return cast(defaults[key])
        return fallback

    try:
        return ChainConfig(
            n_chains=pick(args.chains, "chains", int, 3),
            n_iter=pick(args.n_iter, "iter", int, 20_000),
            burn_in=pick(args.burnin, "burnin", int, 10_000),
            thin=pick(args.thin, "thin", int, 10),
            master_seed=args.seed,
            threads=args.threads,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _cmd_simulate(args) -> int:
    scenario = synth.Scenario()
    if args.scenario:
        _require_file(args.scenario, "scenario file")
        overrides = parse_config(args.scenario)
        fields = {f.name: f.type for f in synth.Scenario.__dataclass_fields__.values()}
        for key, value in overrides.items():
            if key not in synth.Scenario.__dataclass_fields__:
                raise UsageError(f"unknown scenario key {key!r}")
            current = getattr(scenario, key)
            if isinstance(current, bool):
                setattr(scenario, key, value.lower() in ("1", "true", "yes"))
            elif isinstance(current, int):
                setattr(scenario, key, int(value))
            elif isinstance(current, float):
                setattr(scenario, key, float(value))
            elif isinstance(current, tuple):
                parts = [p.strip() for p in value.split(",")]
                setattr(scenario, key, tuple(type(current[0])(p) for p in parts))
            else:
                raise UsageError(f"cannot set scenario key {key!r}")
    data = synth.generate(scenario, seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    data.write(args.out)
    n_obs = len(data.records)
    print(f"wrote {len(data.countries)} countries, {n_obs} observations to {args.out}")
    return EXIT_OK


def _cmd_preprocess(args) -> int:
    _require_file(args.obs, "observations file")
    _require_file(args.countries, "countries file")
    records, issues = ingest.load_observations(args.obs)
    countries = ingest.load_countries(args.countries)
    table = ingest.ImputationTable.default()
    if args.config:
        overrides = parse_config(args.config)
        cells = dict(table.values)
        for key, value in overrides.items():
            parts = key.split(".")
            if len(parts) == 3 and parts[0] == "impute":
                cells[(parts[1], parts[2])] = float(value)
            else:
                raise UsageError(f"unknown preprocess config key {key!r}")
        table = ingest.ImputationTable(values=cells)
    result = ingest.preprocess(
        records, countries, table=table, master_seed=args.seed
    )
    os.makedirs(args.out, exist_ok=True)
    ingest.write_fit_observations(
        os.path.join(args.out, "fit_observations.csv"), result.observations
    )
    audit = list(result.audit)
    for issue in issues:
        audit.append(
            {"country_id": "", "action": f"load_{issue.kind}",
             "detail": f"line {issue.line}: {issue.message}"}
        )
    ingest.write_audit(os.path.join(args.out, "audit.csv"), audit)
    ingest.write_countries(os.path.join(args.out, "countries.csv"), result.countries)
    if args.u5mr_draws:
        _require_file(args.u5mr_draws, "U5MR draws file")
        shutil.copyfile(args.u5mr_draws, os.path.join(args.out, "u5mr_draws.csv"))
    n_inc = sum(1 for o in result.observations if o.included)
    print(
        f"wrote {n_inc} fit-ready observations "
        f"({len(result.observations) - n_inc} excluded), "
        f"{len(audit)} audit entries to {args.out}"
    )
    return EXIT_OK


def _load_data_dir(data_dir, horizon):
    obs_path = os.path.join(data_dir, "fit_observations.csv")
    countries_path = os.path.join(data_dir, "countries.csv")
    _require_file(obs_path, "fit-ready observations")
    _require_file(countries_path, "countries file")
    observations = ingest.read_fit_observations(obs_path)
    countries = ingest.load_countries(countries_path)
    draws_path = os.path.join(data_dir, "u5mr_draws.csv")
    if os.path.exists(draws_path):
        for cid, (years, mat) in ingest.load_u5mr_draws(draws_path).items():
            if cid in countries:
                countries[cid].draw_years = years
                countries[cid].u5mr_draws = mat
    return observations, countries


def _cmd_fit(args) -> int:
    defaults = parse_config(args.config) if args.config else {}
    config = _chain_config(args, defaults)
    horizon = args.horizon or float(defaults.get("horizon", DEFAULT_HORIZON))
    observations, countries = _load_data_dir(args.data, horizon)
    data = build_fit_data(observations, countries, horizon=horizon)
    posterior = run(config, data)
    os.makedirs(args.out, exist_ok=True)
    posterior.save(os.path.join(args.out, "draws.csv"))
    diag = diagnostics_table(posterior)
    diag.to_csv(os.path.join(args.out, "diagnostics.csv"), index=False)
    manifest = {
        "data_dir": os.path.abspath(args.data),
        "horizon": horizon,
        "master_seed": config.master_seed,
        "n_chains": config.n_chains,
        "n_iter": config.n_iter,
        "burn_in": config.burn_in,
        "thin": config.thin,
    }
    with open(os.path.join(args.out, "model.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    worst = diag.rhat.max()
    n_bad = int((diag.rhat >= 1.1).sum())
    print(
        f"retained {posterior.draws.shape[0]}x{posterior.draws.shape[1]} draws, "
        f"worst Rhat {worst:.4f}"
    )
    if n_bad and not args.no_strict:
        raise ConvergenceError(
            f"{n_bad} parameters have Rhat >= 1.1 (worst {worst:.3f}); "
            "rerun longer or pass --no-strict"
        )
    return EXIT_OK


def _cmd_estimate(args) -> int:
    manifest_path = os.path.join(args.fit, "model.json")
    _require_file(manifest_path, "fit manifest")
    with open(manifest_path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    draws_path = os.path.join(args.fit, "draws.csv")
    _require_file(draws_path, "draws file")
    posterior = PosteriorDraws.load(draws_path)
    horizon = manifest["horizon"]
    observations, countries = _load_data_dir(manifest["data_dir"], horizon)
    data = build_fit_data(observations, countries, horizon=horizon)
    seed = args.seed if args.seed is not None else manifest["master_seed"]
    grids = est.estimate_all(posterior, data, countries, seed=seed, horizon=horizon)
    diagnostics = [est.expected_vs_estimated(g) for g in grids.values()]
    os.makedirs(args.out, exist_ok=True)
    est.write_estimates(os.path.join(args.out, "estimates.csv"), grids)
    est.write_ratio_diagnostics(
        os.path.join(args.out, "expected_vs_estimated.csv"), diagnostics
    )
    if args.save_draws:
        est.write_trajectories(os.path.join(args.out, "draws.csv"), grids)
    if args.plots:
        plot_dir = os.path.join(args.out, "plots")
        os.makedirs(plot_dir, exist_ok=True)
        by_country = {}
        for o in observations:
            if o.included:
                by_country.setdefault(o.country_id, []).append(o)
        for cid, grid in grids.items():
            plots.plot_country(
                grid,
                by_country.get(cid, []),
                countries[cid],
                os.path.join(plot_dir, f"{cid}.svg"),
            )
    n_flagged = sum(1 for d in diagnostics if d.flagged)
    print(f"wrote estimates for {len(grids)} countries, {n_flagged} flagged outlying")
    return EXIT_OK


def _cmd_validate(args) -> int:
    defaults = parse_config(args.config) if args.config else {}
    config = _chain_config(args, defaults)
    horizon = args.horizon or float(defaults.get("horizon", DEFAULT_HORIZON))
    observations, countries = _load_data_dir(args.data, horizon)
    report = validation.run_validation(
        observations,
        countries,
        fit_config=config,
        n_sets=args.sets,
        seed=args.seed,
        horizon=horizon,
    )
    os.makedirs(args.out, exist_ok=True)
    validation.write_validation_report(
        os.path.join(args.out, "validation_report.csv"), report
    )
    m = report.measures
    print(
        f"left-out: n={report.n_left_out}; ARE median {m['are']['median']:.3f}; "
        f"coverage 80/90/95: {m['cov80']['median']:.3f}/"
        f"{m['cov90']['median']:.3f}/{m['cov95']['median']:.3f}"
    )
    return EXIT_OK


_COMMANDS = {
    "simulate": _cmd_simulate,
    "preprocess": _cmd_preprocess,
    "fit": _cmd_fit,
    "estimate": _cmd_estimate,
    "validate": _cmd_validate,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ConvergenceError as exc:
        print(f"convergence failure: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except SamplerError as exc:
        print(f"sampler error: {exc}", file=sys.stderr)
        if exc.dump:
            print(f"offending state: {exc.dump}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
