"""Acceptance suite: every criterion prints one PASS/FAIL line.

The heavy criteria (parameter recovery over 100 replicate fits and the
validation calibration) run real MCMC; expect the module to take tens of
minutes.  All tolerances are fixed here, nothing is calibrated at run
time.
"""

import math
import os
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np
import pytest
from conftest import gaussian_posterior, linear_country

from neomort import synth
from neomort.estimates import crisis_adjustment_from_deaths
from neomort.ingest import (
    ImputationTable,
    impute_svr_sd,
    preprocess,
    recombine_vr,
    simulate_stochastic_sd,
)
from neomort.sampler import (
    ChainConfig,
    build_fit_data,
    diagnostics_table,
    effective_sample_size,
    flatten_state,
    init_chain,
    log_posterior,
    log_posterior_grad,
    parameter_names,
    run,
)
from neomort.splines import (
    SplineBasis,
    build_knot_grid,
    difference_transform,
    first_difference_matrix,
)

N_REPLICATES = 100
RECOVERY_MIN_COVERED = 90
RECOVERY_PARAMS = ("beta0", "beta1", "theta", "sigma_lambda", "chi")
FIT_CONFIG = dict(n_chains=3, n_iter=6000, burn_in=3000, thin=3)
MAX_FIT_SECONDS = 600.0

GLOBAL_PARAMS = (
    ["beta0", "beta1", "theta", "sigma_lambda", "chi", "psi"]
    + [f"omega[{s}]" for s in ("DHS", "OtherDHS", "MICS", "Others")]
)


def _report(criterion, ok, detail):
    print(f"[{'PASS' if ok else 'FAIL'}] {criterion}: {detail}")
    return ok


def _truth():
    return synth.default_truth()  # beta0 0.18, beta1 -0.62, theta 34


def _recovery_replicate(seed):
    """One criterion-1 replicate: generate, fit, report CI coverage."""
    truth = _truth()
    data = synth.generate(synth.Scenario(), truth=truth, seed=seed)
    pre = preprocess(data.records, data.countries, master_seed=seed)
    fit_data = build_fit_data(pre.observations, pre.countries)
    config = ChainConfig(master_seed=seed, **FIT_CONFIG)
    start = time.perf_counter()
    posterior = run(config, fit_data)
    elapsed = time.perf_counter() - start
    truth_values = {
        "beta0": truth.beta0,
        "beta1": truth.beta1,
        "theta": truth.theta,
        "sigma_lambda": truth.sigma_lambda,
        "chi": truth.chi,
    }
    covered = {}
    for name, value in truth_values.items():
        lo, hi = posterior.interval(name, 0.95)
        covered[name] = bool(lo <= value <= hi)
    out = {
        "seed": seed,
        "covered": covered,
        "seconds": elapsed,
        "n_obs": fit_data.n_obs,
    }
    if seed == 0:
        diag = diagnostics_table(posterior)
        out["rhat_max"] = float(diag.rhat.max())
        out["rhat_argmax"] = str(diag.loc[diag.rhat.idxmax(), "parameter"])
        ess = {
            name: float(diag.loc[diag.parameter == name, "ess"].iloc[0])
            for name in GLOBAL_PARAMS
        }
        out["global_ess"] = ess
    return out


@pytest.fixture(scope="module")
def recovery_results():
    workers = min(2, os.cpu_count() or 1)
    seeds = list(range(N_REPLICATES))
    with ProcessPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(_recovery_replicate, seeds))
    return results


def test_criterion_1_parameter_recovery(recovery_results):
    counts = {name: 0 for name in RECOVERY_PARAMS}
    for res in recovery_results:
        for name in RECOVERY_PARAMS:
            counts[name] += res["covered"][name]
    slowest = max(res["seconds"] for res in recovery_results)
    n_obs = recovery_results[0]["n_obs"]
    ok = all(counts[name] >= RECOVERY_MIN_COVERED for name in RECOVERY_PARAMS)
    ok = ok and slowest <= MAX_FIT_SECONDS
    detail = (
        f"95% CI coverage over {N_REPLICATES} replicates "
        + ", ".join(f"{k}={v}" for k, v in counts.items())
        + f" (need >= {RECOVERY_MIN_COVERED}); slowest fit {slowest:.0f}s"
        + f" (limit {MAX_FIT_SECONDS:.0f}s); {n_obs} observations"
    )
    assert _report("criterion 1 parameter recovery", ok, detail)


def test_criterion_2_convergence(recovery_results):
    res = recovery_results[0]
    rhat_ok = res["rhat_max"] < 1.1
    ess_ok = all(v > 200 for v in res["global_ess"].values())
    worst_ess = min(res["global_ess"], key=res["global_ess"].get)
    detail = (
        f"worst Rhat {res['rhat_max']:.4f} at {res['rhat_argmax']} (need < 1.1); "
        f"min global ESS {res['global_ess'][worst_ess]:.0f} at {worst_ess} "
        f"(need > 200)"
    )
    assert _report("criterion 2 convergence", rhat_ok and ess_ok, detail)


def test_criterion_3_gaussian_oracle():
    obs1, c1 = linear_country("A", 12, u5mr=120.0, log_r_fn=lambda t: -0.45,
                              tau=0.08, seed=1)
    obs2, c2 = linear_country("B", 9, u5mr=25.0, log_r_fn=lambda t: 0.25,
                              tau=0.10, seed=2)
    data = build_fit_data(obs1 + obs2, {"A": c1, "B": c2})
    fixed = {
        "theta": 40.0,
        "omega": {"DHS": 0.1, "OtherDHS": 0.1, "MICS": 0.1, "Others": 0.1},
        "sigma_lambda": 0.3,
        "psi": 0.8,
        "chi": -4.0,
        "sigma2_eps": 0.02,
    }
    config = ChainConfig(
        n_chains=3, n_iter=22_000, burn_in=2000, thin=2, master_seed=5,
        fixed=fixed,
    )
    posterior = run(config, data)
    names, mean, cov = gaussian_posterior(
        data, fixed["theta"], np.full(4, 0.1), fixed["sigma_lambda"],
        np.full(2, fixed["sigma2_eps"]),
    )
    targets = ["beta0", "beta1", "lambda[A]", "lambda[B]"]
    draws = np.column_stack([posterior.pooled(n) for n in targets])
    n_batches = 30
    batches = np.array_split(draws, n_batches, axis=0)
    failures = []
    for i, name in enumerate(targets):
        want = mean[names.index(name)]
        batch_means = np.asarray([b[:, i].mean() for b in batches])
        se = batch_means.std(ddof=1) / math.sqrt(n_batches)
        if abs(draws[:, i].mean() - want) > 3 * se:
            failures.append(f"mean {name}: {draws[:, i].mean():.5f} vs {want:.5f}")
    for i, ni in enumerate(targets):
        for j, nj in enumerate(targets):
            if j < i:
                continue
            want = cov[names.index(ni), names.index(nj)]
            batch_cov = np.asarray(
                [np.cov(b[:, i], b[:, j])[0, 1] for b in batches]
            )
            se = batch_cov.std(ddof=1) / math.sqrt(n_batches)
            got = float(np.cov(draws[:, i], draws[:, j])[0, 1])
            if abs(got - want) > 3 * se:
                failures.append(f"cov({ni},{nj}): {got:.2e} vs {want:.2e}")
    detail = (
        "posterior mean and covariance of (beta0, beta1, lambda_A, lambda_B) "
        f"within 3 MC SEs of the closed form; {len(failures)} deviations"
        + (f" ({'; '.join(failures)})" if failures else "")
    )
    assert _report("criterion 3 gaussian oracle", not failures, detail)


def test_criterion_4_validation_calibration():
    from neomort.validation import run_validation

    scenario = synth.Scenario(
        n_full_vr=8, n_mixed=10, n_survey_only=10, n_sparse=4, n_none=0
    )
    data = synth.generate(scenario, seed=101)
    pre = preprocess(data.records, data.countries, master_seed=101)
    config = ChainConfig(n_chains=3, n_iter=4000, burn_in=2000, thin=2,
                         master_seed=7)
    report = run_validation(
        pre.observations, pre.countries, fit_config=config, n_sets=100, seed=9
    )
    m = report.measures
    cov_ok = all(
        abs(m[f"cov{level}"]["median"] - level / 100.0) <= 0.05
        for level in (80, 90, 95)
    )
    are_ok = m["are"]["median"] < 0.15
    detail = (
        f"median over 100 left-out sets: ARE {m['are']['median']:.3f} (< 0.15); "
        f"coverage 80/90/95 = {m['cov80']['median']:.3f}/"
        f"{m['cov90']['median']:.3f}/{m['cov95']['median']:.3f} "
        f"(within 0.05 of nominal); {report.n_left_out} left out"
    )
    assert _report("criterion 4 validation calibration", cov_ok and are_ok, detail)


def test_criterion_5_deterministic_exactness():
    checks = []

    grid = build_knot_grid(1952.5)
    basis = SplineBasis(grid)
    ts = np.random.default_rng(0).uniform(grid.t_start, grid.t_end, 1000)
    pou_err = float(np.abs(basis.design_matrix(ts).sum(axis=1) - 1.0).max())
    checks.append(("partition of unity 1e-12", pou_err < 1e-12))

    worst = 0.0
    rng = np.random.default_rng(1)
    for k in range(2, 61):
        tr = difference_transform(k)
        eps = rng.standard_normal(k - 1)
        err = float(
            np.abs(first_difference_matrix(k) @ (tr.matrix @ eps) - eps).max()
        )
        worst = max(worst, err)
    checks.append(("difference recovery 1e-10", worst < 1e-10))

    from neomort.model import nmr_to_ratio, ratio_to_nmr

    ratios = np.exp(np.linspace(np.log(1e-6), np.log(1e3), 500))
    back = nmr_to_ratio(ratio_to_nmr(ratios, 55.0), 55.0)
    checks.append(
        ("ratio round-trip 1e-12", float(np.abs(back / ratios - 1).max()) < 1e-12)
    )

    table = ImputationTable.default().values
    want = {
        ("DHS", "other"): 0.13, ("DHS", "small"): 0.26,
        ("MICS", "other"): 0.16, ("MICS", "small"): 0.21,
        ("OtherDHS", "other"): 0.14, ("OtherDHS", "small"): 0.24,
        ("Others", "other"): 0.16, ("Others", "small"): 0.22,
    }
    checks.append(("imputation table exact", table == want))
    checks.append(("SVR imputation 0.20 exact", impute_svr_sd() == 0.20))

    from neomort.ingest import RawRecord

    recs = [
        RawRecord("Z", 2000.0 + i, 8.0 + i, 30.0 + i, "VR", "Z-VR", None,
                  2000.0 + 500 * i, True)
        for i in range(6)
    ]
    deaths0 = sum(r.nmr * r.births for r in recs) / 1000.0
    births0 = sum(r.births for r in recs)
    merged, _, _ = recombine_vr(recs, rng=np.random.default_rng(2))
    deaths1 = sum(r.nmr * r.births for r in merged) / 1000.0
    births1 = sum(r.births for r in merged)
    checks.append(
        (
            "recombination conserves deaths and births",
            abs(deaths1 - deaths0) < 1e-9 and abs(births1 - births0) < 1e-9,
        )
    )

    checks.append(
        (
            "crisis 1/60 rule",
            crisis_adjustment_from_deaths(60_000, 1_000_000) == pytest.approx(1.0, abs=1e-12),
        )
    )

    ok = all(flag for _, flag in checks)
    detail = "; ".join(f"{name}: {'ok' if flag else 'FAIL'}" for name, flag in checks)
    assert _report("criterion 5 deterministic exactness", ok, detail)


def test_criterion_6_stochastic_error_oracle():
    rng = np.random.default_rng(3)
    worst = 0.0
    for i in range(20):
        births = float(rng.uniform(1e5, 5e7))
        q5 = float(rng.uniform(0.004, 0.2))
        p = float(rng.uniform(0.15, 0.85))
        got = simulate_stochastic_sd(births, q5, p, seed=1000 + i)
        want = math.sqrt(1.0 / (births * q5 * p * (1.0 - p)))
        worst = max(worst, abs(got - want) / want)
    ok = worst < 0.10
    detail = f"20 combinations, worst relative deviation {worst:.3f} (< 0.10)"
    assert _report("criterion 6 stochastic-error oracle", ok, detail)


def test_criterion_7_gradient_check():
    data = synth.generate(
        synth.Scenario(n_full_vr=2, n_mixed=2, n_survey_only=2, n_sparse=1,
                       n_none=0),
        seed=31,
    )
    pre = preprocess(data.records, data.countries, master_seed=31)
    fit_data = build_fit_data(pre.observations, pre.countries)
    names = parameter_names(fit_data)
    rng = np.random.default_rng(4)
    worst = 0.0
    for state_idx in range(50):
        state = init_chain(state_idx % 3, fit_data, seed=state_idx)
        state.beta0 += rng.normal(0, 0.2)
        state.beta1 += rng.normal(0, 0.1)
        # keep the cutpoint clear of observation kinks
        state.theta = float(rng.uniform(25.0, 45.0))
        u = np.exp(fit_data.log_u)
        while np.min(np.abs(u - state.theta)) < 1e-3:
            state.theta += 0.01
        state.omega = np.abs(rng.normal(0.1, 0.03, 4)) + 1e-3
        state.sigma_lambda = float(rng.uniform(0.05, 0.6))
        state.chi = float(rng.normal(-4.0, 0.5))
        state.psi = float(rng.uniform(0.3, 1.5))
        state.lam = rng.normal(0, 0.2, fit_data.n_countries)
        state.eps = [rng.normal(0, 0.1, c.n_fluct) for c in fit_data.countries]
        state.sigma2_eps = np.exp(rng.normal(-4.0, 0.5, fit_data.n_countries))
        grad = log_posterior_grad(state, fit_data)
        vec = flatten_state(state)

        def assemble(v):
            s = state.copy()
            s.beta0, s.beta1, s.theta = v[0], v[1], v[2]
            s.omega = v[3:7].copy()
            s.sigma_lambda, s.chi, s.psi = v[7], v[8], v[9]
            i = 10
            for ci, c in enumerate(fit_data.countries):
                s.lam[ci] = v[i]
                i += 1
                s.eps[ci] = v[i : i + c.n_fluct].copy()
                i += c.n_fluct
                s.sigma2_eps[ci] = v[i]
                i += 1
            return s

        for j in range(len(names)):
            h = 1e-6 * max(1.0, abs(vec[j]))
            vp, vm = vec.copy(), vec.copy()
            vp[j] += h
            vm[j] -= h
            num = (
                log_posterior(assemble(vp), fit_data)
                - log_posterior(assemble(vm), fit_data)
            ) / (2 * h)
            ana = grad[names[j]]
            worst = max(worst, abs(num - ana) / max(abs(num), abs(ana), 1.0))
    ok = worst < 1e-5
    detail = (
        f"50 random states x {len(names)} parameters, worst relative error "
        f"{worst:.2e} (< 1e-5)"
    )
    assert _report("criterion 7 gradient check", ok, detail)


def test_criterion_8_reproducibility(tmp_path):
    from neomort.cli import main

    scenario = tmp_path / "scenario.txt"
    scenario.write_text(
        "n_full_vr = 1\nn_mixed = 1\nn_survey_only = 2\nn_sparse = 1\nn_none = 1\n"
        "emit_u5mr_draws = true\nn_u5mr_draws = 25\n"
    )
    import shutil

    sim, prep = tmp_path / "sim", tmp_path / "prep"
    fit, est, val = tmp_path / "fit", tmp_path / "est", tmp_path / "val"
    outputs = {}
    # identical invocations into identical paths; only --threads varies
    for tag, threads in (("a", 1), ("b", 2)):
        for stage in (sim, prep, fit, est, val):
            shutil.rmtree(stage, ignore_errors=True)
        assert main(["simulate", "--scenario", str(scenario), "--seed", "13",
                     "--out", str(sim)]) == 0
        assert main(["preprocess", "--obs", str(sim / "observations.csv"),
                     "--countries", str(sim / "countries.csv"),
                     "--u5mr-draws", str(sim / "u5mr_draws.csv"),
                     "--seed", "13", "--out", str(prep)]) == 0
        assert main(["fit", "--data", str(prep), "--chains", "2", "--iter",
                     "1200", "--burnin", "600", "--thin", "3", "--seed", "13",
                     "--threads", str(threads), "--out", str(fit)]) == 0
        assert main(["estimate", "--fit", str(fit), "--plots", "--out",
                     str(est)]) == 0
        assert main(["validate", "--data", str(prep), "--sets", "10",
                     "--chains", "2", "--iter", "400", "--burnin", "200",
                     "--thin", "2", "--seed", "13", "--threads", str(threads),
                     "--out", str(val)]) == 0
        files = {}
        for base in (sim, prep, fit, est, val):
            for path in sorted(base.rglob("*")):
                if path.is_file():
                    files[str(path.relative_to(tmp_path))] = path.read_bytes()
        outputs[tag] = files
    same_keys = outputs["a"].keys() == outputs["b"].keys()
    diffs = [
        key
        for key in outputs["a"]
        if same_keys and outputs["a"][key] != outputs["b"][key]
    ]
    ok = same_keys and not diffs
    detail = (
        f"{len(outputs['a'])} pipeline artifacts byte-identical across reruns "
        f"and thread counts"
        + ("" if ok else f"; differing: {diffs[:5]}")
    )
    assert _report("criterion 8 reproducibility", ok, detail)
