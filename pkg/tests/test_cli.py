import os

import pytest

from neomort.cli import main


def write_scenario(path, **kw):
    base = dict(n_full_vr=1, n_mixed=1, n_survey_only=2, n_sparse=1, n_none=1)
    base.update(kw)
    path.write_text("".join(f"{k} = {v}\n" for k, v in base.items()))


@pytest.fixture(scope="module")
def pipeline_dirs(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipeline")
    scenario = root / "scenario.txt"
    write_scenario(scenario)
    sim, prep, fit = root / "sim", root / "prep", root / "fit"
    assert main(["simulate", "--scenario", str(scenario), "--seed", "5",
                 "--out", str(sim)]) == 0
    assert main(["preprocess", "--obs", str(sim / "observations.csv"),
                 "--countries", str(sim / "countries.csv"), "--seed", "5",
                 "--out", str(prep)]) == 0
    assert main(["fit", "--data", str(prep), "--chains", "2", "--iter", "1200",
                 "--burnin", "600", "--thin", "3", "--seed", "5",
                 "--out", str(fit)]) == 0
    return root, sim, prep, fit


class TestExitCodes:
    def test_usage_error_is_one(self):
        assert main(["fit", "--bogus-flag"]) == 1
        assert main([]) == 1

    def test_unknown_scenario_key_is_usage_error(self, tmp_path):
        bad = tmp_path / "scenario.txt"
        bad.write_text("not_a_key = 3\n")
        assert main(["simulate", "--scenario", str(bad), "--seed", "1",
                     "--out", str(tmp_path / "out")]) == 1

    def test_missing_data_is_two(self, tmp_path):
        assert main(["fit", "--data", str(tmp_path / "nope"), "--out",
                     str(tmp_path / "out")]) == 2
        assert main(["estimate", "--fit", str(tmp_path / "nope"), "--out",
                     str(tmp_path / "out")]) == 2

    def test_convergence_failure_is_three(self, pipeline_dirs, tmp_path):
        _, _, prep, _ = pipeline_dirs
        out = tmp_path / "shortfit"
        code = main(["fit", "--data", str(prep), "--chains", "3", "--iter", "30",
                     "--burnin", "10", "--thin", "1", "--seed", "1",
                     "--out", str(out)])
        assert code == 3
        # and the escape hatch
        code = main(["fit", "--data", str(prep), "--chains", "3", "--iter", "30",
                     "--burnin", "10", "--thin", "1", "--seed", "1", "--no-strict",
                     "--out", str(out)])
        assert code == 0


class TestPipeline:
    def test_outputs_exist(self, pipeline_dirs):
        root, sim, prep, fit = pipeline_dirs
        for name in ("observations.csv", "countries.csv", "truth.csv"):
            assert (sim / name).exists()
        for name in ("fit_observations.csv", "countries.csv", "audit.csv"):
            assert (prep / name).exists()
        for name in ("draws.csv", "diagnostics.csv", "model.json"):
            assert (fit / name).exists()

    def test_estimate_and_plots(self, pipeline_dirs, tmp_path):
        _, _, _, fit = pipeline_dirs
        out = tmp_path / "est"
        assert main(["estimate", "--fit", str(fit), "--plots", "--save-draws",
                     "--out", str(out)]) == 0
        assert (out / "estimates.csv").exists()
        assert (out / "expected_vs_estimated.csv").exists()
        assert (out / "draws.csv").exists()
        svgs = list((out / "plots").glob("*.svg"))
        assert len(svgs) == 6

    def test_preprocess_config_overrides_imputation(self, pipeline_dirs, tmp_path):
        _, sim, _, _ = pipeline_dirs
        config = tmp_path / "prep.cfg"
        config.write_text("impute.DHS.small = 0.5\n")
        out = tmp_path / "prep_override"
        assert main(["preprocess", "--obs", str(sim / "observations.csv"),
                     "--countries", str(sim / "countries.csv"), "--config",
                     str(config), "--seed", "5", "--out", str(out)]) == 0
        from neomort.ingest import read_fit_observations

        observations = read_fit_observations(out / "fit_observations.csv")
        values = {
            o.sampling_sd
            for o in observations
            if o.included and o.series_type == "DHS" and o.sampling_sd == 0.5
        }
        assert values == {0.5}

    def test_validate_writes_report(self, pipeline_dirs, tmp_path):
        _, _, prep, _ = pipeline_dirs
        out = tmp_path / "val"
        assert main(["validate", "--data", str(prep), "--sets", "5",
                     "--chains", "2", "--iter", "300", "--burnin", "100",
                     "--thin", "2", "--seed", "5", "--out", str(out)]) == 0
        assert (out / "validation_report.csv").exists()

    def test_rerun_is_byte_identical(self, pipeline_dirs, tmp_path):
        root, sim, prep, fit = pipeline_dirs
        sim2, prep2, fit2 = tmp_path / "sim2", tmp_path / "prep2", tmp_path / "fit2"
        scenario = root / "scenario.txt"
        main(["simulate", "--scenario", str(scenario), "--seed", "5", "--out",
              str(sim2)])
        main(["preprocess", "--obs", str(sim2 / "observations.csv"),
              "--countries", str(sim2 / "countries.csv"), "--seed", "5",
              "--out", str(prep2)])
        main(["fit", "--data", str(prep2), "--chains", "2", "--iter", "1200",
              "--burnin", "600", "--thin", "3", "--seed", "5", "--threads", "2",
              "--out", str(fit2)])
        for name in ("observations.csv", "countries.csv", "truth.csv"):
            assert (sim / name).read_bytes() == (sim2 / name).read_bytes()
        for name in ("fit_observations.csv", "audit.csv"):
            assert (prep / name).read_bytes() == (prep2 / name).read_bytes()
        assert (fit / "draws.csv").read_bytes() == (fit2 / "draws.csv").read_bytes()
        assert (
            fit / "diagnostics.csv"
        ).read_bytes() == (fit2 / "diagnostics.csv").read_bytes()

    def test_config_file_defaults_with_flag_override(self, pipeline_dirs, tmp_path):
        _, _, prep, _ = pipeline_dirs
        config = tmp_path / "fit.cfg"
        config.write_text("chains = 2\niter = 1200\nburnin = 600\nthin = 3\n")
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        assert main(["fit", "--data", str(prep), "--config", str(config),
                     "--seed", "5", "--out", str(out_a)]) == 0
        assert main(["fit", "--data", str(prep), "--chains", "2", "--iter",
                     "1200", "--burnin", "600", "--thin", "3", "--seed", "5",
                     "--out", str(out_b)]) == 0
        assert (out_a / "draws.csv").read_bytes() == (out_b / "draws.csv").read_bytes()
