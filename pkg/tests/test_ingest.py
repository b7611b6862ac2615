import math
import os

import numpy as np
import pytest

from neomort.ingest import (
    DataError,
    ImputationTable,
    RawRecord,
    classify_size,
    impute_sampling_sd,
    impute_svr_sd,
    load_countries,
    load_observations,
    preprocess,
    read_fit_observations,
    recombine_vr,
    simulate_stochastic_sd,
    size_categories,
    write_fit_observations,
    write_observations,
)
from neomort.model import CountryInput


def make_record(**overrides):
    base = dict(
        country_id="A",
        year=2000.0,
        nmr=12.0,
        u5mr=30.0,
        series_type="VR",
        series_id="A-VR",
        sampling_sd=None,
        births=500_000.0,
        included=True,
    )
    base.update(overrides)
    return RawRecord(**base)


def make_country(cid="A", births=500_000.0, u5mr=30.0):
    return CountryInput(
        country_id=cid,
        name=cid,
        u5mr_point={y + 0.5: u5mr for y in range(1980, 2016)},
        births={y: births for y in range(1980, 2016)},
    )


class TestLoadObservations:
    def test_empty_file_with_header(self, tmp_path):
        path = tmp_path / "obs.csv"
        write_observations(path, [])
        records, issues = load_observations(path)
        assert records == [] and issues == []

    def test_round_trip_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        records = []
        for i in range(10):
            u5mr = float(rng.uniform(10, 200))
            records.append(
                make_record(
                    country_id=f"C{i}",
                    year=float(1990 + i),
                    nmr=float(rng.uniform(0.2, 0.8) * u5mr),
                    u5mr=u5mr,
                    sampling_sd=float(rng.uniform(0.05, 0.3)) if i % 2 else None,
                    births=float(rng.uniform(1e4, 1e6)) if i % 3 else None,
                )
            )
        path = tmp_path / "obs.csv"
        write_observations(path, records)
        back, issues = load_observations(path)
        assert issues == []
        assert [repr(r) for r in back] == [repr(r) for r in records]
        # writing again produces identical bytes
        path2 = tmp_path / "obs2.csv"
        write_observations(path2, back)
        assert path.read_bytes() == path2.read_bytes()

    def test_support_violation_flagged_not_dropped(self, tmp_path):
        path = tmp_path / "obs.csv"
        write_observations(path, [make_record(nmr=35.0, u5mr=30.0)])
        records, issues = load_observations(path)
        assert len(records) == 1 and not records[0].included
        assert len(issues) == 1 and issues[0].kind == "warning"

    def test_parse_error_collected_with_line_number(self, tmp_path):
        path = tmp_path / "obs.csv"
        write_observations(path, [make_record(), make_record(year=2001.0)])
        lines = path.read_text().splitlines()
        lines[2] = lines[2].replace("2001.0", "not-a-year")
        path.write_text("\n".join(lines) + "\n")
        records, issues = load_observations(path)
        assert len(records) == 1
        assert len(issues) == 1 and issues[0].line == 3 and issues[0].kind == "error"

    def test_missing_column_fatal(self, tmp_path):
        path = tmp_path / "obs.csv"
        path.write_text("country_id,year\nA,2000\n")
        with pytest.raises(DataError):
            load_observations(path)

    def test_unknown_series_type_is_row_error(self, tmp_path):
        path = tmp_path / "obs.csv"
        write_observations(path, [make_record(series_type="VR")])
        path.write_text(path.read_text().replace("VR,A-VR", "Census,A-VR"))
        records, issues = load_observations(path)
        assert records == [] and len(issues) == 1


class TestClassifySize:
    def test_quartile_of_eight(self):
        births = list(range(1, 9))
        cats = [classify_size(b, births) for b in births]
        assert cats.count("small") == 2
        assert cats[:2] == ["small", "small"]

    def test_boundary_inclusive(self):
        births = [25_000.0] * 4 + [100_000.0] * 4
        assert classify_size(25_000.0, births) == "small"
        assert classify_size(10_000.0, births) == "small"
        assert classify_size(100_000.0, births) == "other"

    def test_missing_births_defaults_with_warning(self):
        countries = {
            "A": make_country("A", births=10_000.0),
            "B": make_country("B", births=100_000.0),
        }
        countries["C"] = CountryInput(country_id="C", name="C", u5mr_point={2000.5: 30.0})
        cats, warnings = size_categories(countries)
        assert cats["C"] == "other"
        assert any("C" in w for w in warnings)


class TestImputation:
    def test_table_values_exact(self):
        table = ImputationTable.default()
        assert impute_sampling_sd("DHS", "small", table) == 0.26
        assert impute_sampling_sd("DHS", "other", table) == 0.13
        assert impute_sampling_sd("MICS", "other", table) == 0.16
        assert impute_sampling_sd("MICS", "small", table) == 0.21
        assert impute_sampling_sd("OtherDHS", "other", table) == 0.14
        assert impute_sampling_sd("OtherDHS", "small", table) == 0.24
        assert impute_sampling_sd("Others", "other", table) == 0.16
        assert impute_sampling_sd("Others", "small", table) == 0.22

    def test_unknown_series_fatal(self):
        with pytest.raises(DataError):
            impute_sampling_sd("Census", "small", ImputationTable.default())

    def test_incomplete_table_rejected(self):
        with pytest.raises(DataError):
            ImputationTable(values={("DHS", "small"): 0.26})

    def test_svr_value(self):
        assert impute_svr_sd() == 0.20

    def test_reported_errors_never_overwritten(self):
        rec = make_record(series_type="DHS", series_id="A-s1", sampling_sd=0.19,
                          births=None)
        res = preprocess([rec], {"A": make_country()}, master_seed=0)
        obs = [o for o in res.observations if o.included]
        assert obs[0].sampling_sd == 0.19
        assert not any(e["action"] == "impute_sampling_sd" for e in res.audit)

    def test_svr_reported_untouched(self):
        rec = make_record(series_type="SVR", series_id="A-SVR", sampling_sd=0.17,
                          births=None)
        res = preprocess([rec], {"A": make_country()}, master_seed=0)
        obs = [o for o in res.observations if o.included]
        assert obs[0].sampling_sd == 0.17
        assert obs[0].stochastic_sd == pytest.approx(0.17)

    def test_svr_missing_gets_020(self):
        rec = make_record(series_type="SVR", series_id="A-SVR", sampling_sd=None,
                          births=None)
        res = preprocess([rec], {"A": make_country()}, master_seed=0)
        obs = [o for o in res.observations if o.included]
        assert obs[0].sampling_sd == 0.20
        assert obs[0].stochastic_sd == pytest.approx(0.20)


class TestStochasticSd:
    def test_delta_method_oracle(self):
        got = simulate_stochastic_sd(1e7, 0.05, 0.5, seed=1)
        want = math.sqrt(1.0 / (1e7 * 0.05 * 0.25))
        assert abs(got - want) / want < 0.10

    def test_deterministic_given_seed(self):
        a = simulate_stochastic_sd(2e5, 0.03, 0.4, seed=42)
        b = simulate_stochastic_sd(2e5, 0.03, 0.4, seed=42)
        assert a == b

    def test_symmetry_in_p(self):
        a = simulate_stochastic_sd(1e7, 0.05, 0.2, seed=3)
        b = simulate_stochastic_sd(1e7, 0.05, 0.8, seed=4)
        assert abs(a - b) / a < 0.10

    def test_doubling_within_monte_carlo_error(self):
        a = simulate_stochastic_sd(5e5, 0.04, 0.45, n_sims=3000, seed=5)
        b = simulate_stochastic_sd(5e5, 0.04, 0.45, n_sims=6000, seed=6)
        se = a / math.sqrt(2 * 2999) + b / math.sqrt(2 * 5999)
        assert abs(a - b) < 3 * se

    @pytest.mark.parametrize(
        "births,q5,p", [(0.0, 0.05, 0.5), (1e5, 0.0, 0.5), (1e5, 0.05, 1.0)]
    )
    def test_preconditions(self, births, q5, p):
        with pytest.raises(ValueError):
            simulate_stochastic_sd(births, q5, p)


class TestRecombineVr:
    def test_hand_pooled_merge(self):
        recs = [
            make_record(year=2000.0, nmr=10.0, u5mr=40.0, births=100.0),
            make_record(year=2001.0, nmr=20.0, u5mr=40.0, births=300.0),
        ]
        merged, taus, audit = recombine_vr(
            recs, cv_threshold=0.10, taus=[0.05, 1.0], rng=np.random.default_rng(0)
        )
        assert len(merged) == 1
        assert merged[0].nmr == pytest.approx(17.5)
        assert merged[0].year == pytest.approx((2000.0 * 100 + 2001.0 * 300) / 400)
        assert merged[0].births == 400.0
        assert len(audit) == 1

    def test_noop_below_threshold(self):
        recs = [
            make_record(year=float(y), births=2e6, nmr=12.0, u5mr=30.0)
            for y in range(2000, 2005)
        ]
        merged, taus, audit = recombine_vr(recs, rng=np.random.default_rng(1))
        assert [r.year for r in merged] == [r.year for r in recs]
        assert [r.nmr for r in merged] == [r.nmr for r in recs]
        assert audit == []

    def test_conservation_of_deaths_and_births(self):
        rng = np.random.default_rng(2)
        recs = [
            make_record(
                year=float(2000 + i),
                nmr=float(rng.uniform(5, 15)),
                u5mr=float(rng.uniform(20, 40)),
                births=float(rng.integers(2_000, 9_000)),
            )
            for i in range(8)
        ]
        deaths_before = sum(r.nmr * r.births / 1000 for r in recs)
        births_before = sum(r.births for r in recs)
        merged, _, _ = recombine_vr(recs, rng=np.random.default_rng(3))
        deaths_after = sum(r.nmr * r.births / 1000 for r in merged)
        births_after = sum(r.births for r in merged)
        assert births_after == pytest.approx(births_before, abs=1e-9)
        assert deaths_after == pytest.approx(deaths_before, abs=1e-9)

    def test_missing_births_passed_through(self):
        recs = [
            make_record(year=2000.0, births=None),
            make_record(year=2001.0, births=3000.0),
        ]
        merged, taus, audit = recombine_vr(recs, rng=np.random.default_rng(4))
        assert any(r.births is None for r in merged)
        assert any("lacks births" in msg for msg in audit)


class TestPreprocess:
    def test_complete_error_specification(self):
        records = [
            make_record(year=float(y), series_type="VR", series_id="A-VR")
            for y in range(2000, 2010)
        ]
        records.append(
            make_record(year=2005.0, series_type="DHS", series_id="A-s1",
                        sampling_sd=None, births=None)
        )
        res = preprocess(records, {"A": make_country()}, master_seed=1)
        for obs in res.observations:
            if not obs.included:
                continue
            if obs.series_type in ("VR", "SVR"):
                assert obs.stochastic_sd is not None and obs.stochastic_sd > 0
            else:
                assert obs.sampling_sd is not None and obs.sampling_sd > 0

    def test_imputation_recorded_in_audit(self):
        rec = make_record(series_type="DHS", series_id="A-s1", sampling_sd=None,
                          births=None)
        res = preprocess([rec], {"A": make_country()}, master_seed=0)
        assert any(e["action"] == "impute_sampling_sd" for e in res.audit)

    def test_support_violation_excluded(self):
        rec = make_record(nmr=31.0, u5mr=30.0)
        res = preprocess([rec], {"A": make_country()}, master_seed=0)
        assert not res.observations[0].included
        assert any(e["action"] == "support_violation" for e in res.audit)

    def test_vr_without_births_excluded(self):
        rec = make_record(births=None)
        country = make_country()
        country.births = {}
        res = preprocess([rec], {"A": country}, master_seed=0)
        assert not res.observations[0].included
        assert any(e["action"] == "missing_births" for e in res.audit)

    def test_births_fall_back_to_country_file(self):
        rec = make_record(births=None)
        res = preprocess([rec], {"A": make_country()}, master_seed=0)
        assert res.observations[0].included
        assert res.observations[0].stochastic_sd is not None

    def test_deterministic(self):
        records = [make_record(year=float(y)) for y in range(2000, 2006)]
        res1 = preprocess(records, {"A": make_country()}, master_seed=9)
        res2 = preprocess(records, {"A": make_country()}, master_seed=9)
        assert [repr(o) for o in res1.observations] == [
            repr(o) for o in res2.observations
        ]

    def test_fit_csv_round_trip(self, tmp_path):
        records = [make_record(year=float(y)) for y in range(2000, 2006)]
        res = preprocess(records, {"A": make_country()}, master_seed=9)
        path = tmp_path / "fit.csv"
        write_fit_observations(path, res.observations)
        back = read_fit_observations(path)
        assert [repr(o) for o in back] == [repr(o) for o in res.observations]


def test_load_countries_round_trip(tmp_path):
    from neomort.ingest import write_countries

    countries = {"A": make_country("A"), "B": make_country("B", births=20_000.0)}
    countries["A"].crisis_adjustments[2004] = 1.5
    path = tmp_path / "countries.csv"
    write_countries(path, countries)
    back = load_countries(path)
    assert set(back) == {"A", "B"}
    assert back["A"].crisis_adjustments == {2004: 1.5}
    assert back["A"].u5mr_point == countries["A"].u5mr_point
    assert back["B"].births == countries["B"].births
