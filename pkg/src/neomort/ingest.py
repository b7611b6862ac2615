"""Data loading and preprocessing.

Turns raw observation and country CSVs into fit-ready observations with a
complete error specification: stochastic SDs simulated for registration
data, sampling SDs imputed for surveys that lack them, and erratic
small-country registration series recombined.  Every imputation and merge
is recorded in an audit trail.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace

import numpy as np

from . import rngs
from .model import SERIES_TYPES, SURVEY_TYPES, CountryInput, Observation
from .splines import midyear

SVR_SAMPLING_SD = 0.20  # imputed sampling error for SVR ratio observations
CV_THRESHOLD = 0.10
DEFAULT_N_SIMS = 3000

OBS_COLUMNS = [
    "country_id",
    "year",
    "nmr",
    "u5mr",
    "series_type",
    "series_id",
    "sampling_sd",
    "births",
    "included",
]
COUNTRY_COLUMNS = ["country_id", "name", "year", "u5mr", "births", "crisis_adjustment"]
FIT_OBS_COLUMNS = [
    "country_id",
    "t",
    "log_ratio",
    "series_type",
    "series_id",
    "sampling_sd",
    "stochastic_sd",
    "included",
    "nmr",
    "u5mr",
]


class DataError(Exception):
    """Unrecoverable problem with input data or schema."""


@dataclass
class RawRecord:
    """One observation row as loaded, before error specification."""

    country_id: str
    year: float
    nmr: float
    u5mr: float
    series_type: str
    series_id: str
    sampling_sd: float | None = None
    births: float | None = None
    included: bool = True


@dataclass
class LoadIssue:
    """Row-level problem found while loading (line numbers are 1-based)."""

    line: int
    kind: str  # "error" rows are dropped, "warning" rows are kept excluded
    message: str


@dataclass(frozen=True)
class ImputationTable:
    """Sampling SDs imputed for surveys without reported errors.

    Exactly one value per (series type, country size category) pair, on the
    log-ratio scale.
    """

    values: dict

    def __post_init__(self):
        expected = {(s, c) for s in SURVEY_TYPES for c in ("small", "other")}
        if set(self.values) != expected:
            raise DataError("imputation table must cover all 8 series/size cells")

    @classmethod
    def default(cls) -> "ImputationTable":
        return cls(
            values={
                ("DHS", "other"): 0.13,
                ("DHS", "small"): 0.26,
                ("MICS", "other"): 0.16,
                ("MICS", "small"): 0.21,
                ("OtherDHS", "other"): 0.14,
                ("OtherDHS", "small"): 0.24,
                ("Others", "other"): 0.16,
                ("Others", "small"): 0.22,
            }
        )


def _parse_float(text: str, allow_blank: bool = False) -> float | None:
    text = text.strip() if text is not None else ""
    if text == "":
        if allow_blank:
            return None
        raise ValueError("blank value")
    return float(text)


def _parse_flag(text: str) -> bool:
    text = (text or "").strip().lower()
    if text in ("1", "true", "yes"):
        return True
    if text in ("0", "false", "no"):
        return False
    raise ValueError(f"bad flag {text!r}")


def load_observations(path) -> tuple[list[RawRecord], list[LoadIssue]]:
    """Load observation rows; collect row-indexed issues instead of failing.

    Rows that cannot be parsed are dropped and reported as errors; rows
    that parse but violate the model's support (nmr >= u5mr, nonpositive
    rates) are kept with ``included=False`` and reported as warnings.
    Missing mandatory columns are fatal.
    """
    records: list[RawRecord] = []
    issues: list[LoadIssue] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataError(f"{path}: empty file, header row required")
        missing = [c for c in OBS_COLUMNS if c not in reader.fieldnames]
        if missing:
            raise DataError(f"{path}: missing mandatory columns {missing}")
        for line_no, row in enumerate(reader, start=2):
            try:
                year = _parse_float(row["year"])
                nmr = _parse_float(row["nmr"])
                u5mr = _parse_float(row["u5mr"])
                series_type = row["series_type"].strip()
                if series_type not in SERIES_TYPES:
                    raise ValueError(f"unknown series_type {series_type!r}")
                if not 1900 <= year <= 2100:
                    raise ValueError(f"year {year} outside [1900, 2100]")
                rec = RawRecord(
                    country_id=row["country_id"].strip(),
                    year=year,
                    nmr=nmr,
                    u5mr=u5mr,
                    series_type=series_type,
                    series_id=row["series_id"].strip(),
                    sampling_sd=_parse_float(row["sampling_sd"], allow_blank=True),
                    births=_parse_float(row["births"], allow_blank=True),
                    included=_parse_flag(row["included"]),
                )
            except (ValueError, KeyError) as exc:
                issues.append(LoadIssue(line_no, "error", str(exc)))
                continue
            if rec.included and not (0 < rec.nmr < rec.u5mr < 1000):
                rec.included = False
                issues.append(
                    LoadIssue(
                        line_no,
                        "warning",
                        f"{rec.country_id} {rec.year}: nmr/u5mr outside model support"
                        f" (nmr={rec.nmr}, u5mr={rec.u5mr}); excluded",
                    )
                )
            records.append(rec)
    return records, issues


def load_countries(path) -> dict[str, CountryInput]:
    """Load per-country U5MR/births/crisis series keyed by country id."""
    raw: dict[str, dict] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataError(f"{path}: empty file, header row required")
        missing = [c for c in COUNTRY_COLUMNS if c not in reader.fieldnames]
        if missing:
            raise DataError(f"{path}: missing mandatory columns {missing}")
        for line_no, row in enumerate(reader, start=2):
            try:
                cid = row["country_id"].strip()
                year = _parse_float(row["year"])
                u5mr = _parse_float(row["u5mr"], allow_blank=True)
                births = _parse_float(row["births"], allow_blank=True)
                crisis = _parse_float(row["crisis_adjustment"], allow_blank=True)
            except ValueError as exc:
                raise DataError(f"{path}:{line_no}: {exc}") from exc
            entry = raw.setdefault(
                cid,
                {"name": row["name"].strip(), "u5mr": {}, "births": {}, "crisis": {}},
            )
            if u5mr is not None:
                entry["u5mr"][midyear(year)] = u5mr
            if births is not None:
                entry["births"][int(year)] = births
            if crisis:
                entry["crisis"][int(year)] = crisis
    countries = {}
    for cid, entry in raw.items():
        countries[cid] = CountryInput(
            country_id=cid,
            name=entry["name"],
            u5mr_point=entry["u5mr"],
            births=entry["births"],
            crisis_adjustments=entry["crisis"],
        )
    return countries


def load_u5mr_draws(path) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Load optional U5MR posterior draws: country -> (years, draws[draw, year])."""
    cells: dict[str, dict] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        needed = ["country_id", "draw_index", "year", "u5mr"]
        missing = [c for c in needed if c not in (reader.fieldnames or [])]
        if missing:
            raise DataError(f"{path}: missing mandatory columns {missing}")
        for row in reader:
            cid = row["country_id"].strip()
            cells.setdefault(cid, {})[
                (int(row["draw_index"]), midyear(float(row["year"])))
            ] = float(row["u5mr"])
    out = {}
    for cid, values in cells.items():
        draws = sorted({k[0] for k in values})
        years = sorted({k[1] for k in values})
        mat = np.empty((len(draws), len(years)))
        for (d, y), v in values.items():
            mat[draws.index(d), years.index(y)] = v
        out[cid] = (np.asarray(years), mat)
    return out


def latest_births(country: CountryInput) -> float | None:
    """Births in the most recent year with data, None when absent."""
    if not country.births:
        return None
    return country.births[max(country.births)]


def classify_size(births: float, all_births: list[float]) -> str:
    """Classify one country as small iff its births fall in the lowest
    quartile of all countries' births (boundary inclusive)."""
    boundary = float(np.percentile(np.asarray(all_births, dtype=float), 25.0))
    return "small" if births <= boundary else "other"


def size_categories(countries: dict[str, CountryInput]) -> tuple[dict, list]:
    """Size category per country from latest-year births.

    Countries without births data fall back to "other" with a warning.
    """
    latest = {cid: latest_births(c) for cid, c in countries.items()}
    known = [b for b in latest.values() if b is not None]
    categories, warnings = {}, []
    for cid, births in latest.items():
        if births is None or not known:
            categories[cid] = "other"
            warnings.append(f"{cid}: no births data, size category defaults to 'other'")
        else:
            categories[cid] = classify_size(births, known)
    return categories, warnings


def impute_sampling_sd(
    series_type: str, size_category: str, table: ImputationTable
) -> float:
    """Imputed sampling SD for a survey observation without a reported one."""
    try:
        return table.values[(series_type, size_category)]
    except KeyError as exc:
        raise DataError(
            f"no imputation value for series {series_type!r}, size {size_category!r}"
        ) from exc


def impute_svr_sd() -> float:
    """Sampling SD imputed for SVR ratio observations."""
    return SVR_SAMPLING_SD


def simulate_stochastic_sd(
    births: float,
    q5: float,
    p: float,
    n_sims: int = DEFAULT_N_SIMS,
    seed: int = 0,
    rng: np.random.Generator | None = None,
) -> float:
    """Stochastic SD of logit(neonatal share of under-five deaths).

    Simulates under-five deaths as Poisson(births * q5) and neonatal
    deaths as Binomial(d5, p), then returns the sample SD of
    logit(dn / d5).  Draws where the logit is undefined (d5 = 0, dn = 0 or
    dn = d5) are redrawn; at realistic birth counts these are vanishingly
    rare.  Deterministic given the seed.
    """
    if births <= 0:
        raise ValueError("births must be positive")
    if not 0 < q5 < 1:
        raise ValueError("q5 must lie in (0, 1)")
    if not 0 < p < 1:
        raise ValueError("p must lie in (0, 1)")
    if n_sims < 2:
        raise ValueError("need at least 2 simulations")
    if rng is None:
        rng = np.random.default_rng(seed)
    lam = births * q5
    d5 = rng.poisson(lam, n_sims)
    dn = rng.binomial(d5, p)
    bad = (d5 == 0) | (dn == 0) | (dn == d5)
    for _ in range(1000):
        n_bad = int(bad.sum())
        if n_bad == 0:
            break
        d5[bad] = rng.poisson(lam, n_bad)
        dn[bad] = rng.binomial(d5[bad], p)
        bad = (d5 == 0) | (dn == 0) | (dn == d5)
    else:
        raise RuntimeError(
            "stochastic-error simulation kept producing degenerate death counts; "
            f"births={births}, q5={q5}, p={p} give too few expected deaths"
        )
    y = np.log(dn) - np.log(d5 - dn)
    return float(np.std(y, ddof=1))


def _pool(a: RawRecord, b: RawRecord) -> RawRecord:
    """Merge two VR records by pooling implied deaths and births."""
    births = a.births + b.births
    deaths_n = (a.nmr * a.births + b.nmr * b.births) / 1000.0
    deaths_5 = (a.u5mr * a.births + b.u5mr * b.births) / 1000.0
    return replace(
        a,
        year=(a.year * a.births + b.year * b.births) / births,
        nmr=deaths_n / births * 1000.0,
        u5mr=deaths_5 / births * 1000.0,
        births=births,
        sampling_sd=None,
    )


def recombine_vr(
    records: list[RawRecord],
    cv_threshold: float = CV_THRESHOLD,
    *,
    taus: list[float] | None = None,
    n_sims: int = DEFAULT_N_SIMS,
    rng: np.random.Generator | None = None,
) -> tuple[list[RawRecord], list[float], list[str]]:
    """Recombine erratic registration records with their previous years.

    A record whose coefficient of variation (its stochastic SD on the
    log-ratio scale) exceeds the threshold is pooled with the adjacent
    previous year, the pooled SD is re-simulated, and pooling continues
    backward until the CV drops below the threshold or the series is
    exhausted.  Pooling conserves total implied deaths and births exactly;
    the merged record sits at the births-weighted mean year.

    Returns (records, stochastic SDs, audit messages).
    """
    if rng is None:
        rng = np.random.default_rng(0)
    audit: list[str] = []
    mergeable, passthrough = [], []
    for rec in records:
        if rec.births is None:
            passthrough.append(rec)
            audit.append(
                f"{rec.country_id} {rec.year}: VR record lacks births, not recombined"
            )
        else:
            mergeable.append(rec)
    mergeable.sort(key=lambda r: r.year)

    def tau_of(rec: RawRecord) -> float:
        return simulate_stochastic_sd(
            rec.births, rec.u5mr / 1000.0, rec.nmr / rec.u5mr, n_sims=n_sims, rng=rng
        )

    if taus is None:
        taus = [tau_of(rec) for rec in mergeable]
    else:
        taus = list(taus)
        if len(taus) != len(mergeable):
            raise ValueError("taus must match the mergeable records")

    idx = len(mergeable) - 1
    while idx >= 0:
        if taus[idx] <= cv_threshold or len(mergeable) == 1:
            idx -= 1
            continue
        partner = idx - 1 if idx > 0 else idx + 1
        lo, hi = min(idx, partner), max(idx, partner)
        merged = _pool(mergeable[lo], mergeable[hi])
        audit.append(
            f"{merged.country_id}: merged years {mergeable[lo].year:g} and "
            f"{mergeable[hi].year:g} (cv {taus[idx]:.3f} > {cv_threshold:g}) "
            f"-> year {merged.year:g}, nmr {merged.nmr:.6g}"
        )
        mergeable[lo] = merged
        del mergeable[hi], taus[hi]
        taus[lo] = tau_of(merged)
        idx = lo
    out = sorted(mergeable + passthrough, key=lambda r: r.year)
    tau_by_id = {id(rec): tau for rec, tau in zip(mergeable, taus)}
    out_taus = [tau_by_id.get(id(rec), math.nan) for rec in out]
    return out, out_taus, audit


@dataclass
class PreprocessResult:
    observations: list[Observation]
    countries: dict[str, CountryInput]
    audit: list[dict]


def preprocess(
    records: list[RawRecord],
    countries: dict[str, CountryInput],
    *,
    table: ImputationTable | None = None,
    master_seed: int = 0,
    cv_threshold: float = CV_THRESHOLD,
    n_sims: int = DEFAULT_N_SIMS,
    recombine_small_vr: bool = True,
) -> PreprocessResult:
    """Produce fit-ready observations with complete error specifications.

    Applies, in order: country size classification, support checks, VR
    stochastic-error simulation, small-country VR recombination, SVR and
    survey sampling-SD imputation, and the log-ratio transform.  Every
    decision lands in the audit trail.
    """
    if table is None:
        table = ImputationTable.default()
    audit: list[dict] = []

    def note(cid: str, action: str, detail: str):
        audit.append({"country_id": cid, "action": action, "detail": detail})

    categories, size_warnings = size_categories(countries)
    for w in size_warnings:
        note(w.split(":")[0], "size_default", w)
    for cid, cat in categories.items():
        countries[cid].size_category = cat

    observations: list[Observation] = []
    by_country: dict[str, list[RawRecord]] = {}
    for rec in records:
        by_country.setdefault(rec.country_id, []).append(rec)

    for cid in sorted(by_country):
        country = countries.get(cid)
        if country is None:
            note(cid, "unknown_country", "observations without a countries.csv entry")
        size_cat = categories.get(cid, "other")
        recs = by_country[cid]

        kept: list[RawRecord] = []
        for rec in recs:
            if not rec.included:
                observations.append(_excluded_observation(rec))
                continue
            if not (0 < rec.nmr < rec.u5mr):
                note(
                    cid,
                    "support_violation",
                    f"year {rec.year:g} {rec.series_type}: nmr {rec.nmr:g} not in "
                    f"(0, u5mr={rec.u5mr:g}); excluded",
                )
                observations.append(_excluded_observation(rec))
                continue
            kept.append(rec)

        # registration data: attach births, simulate stochastic errors
        by_series: dict[str, list[RawRecord]] = {}
        for rec in kept:
            by_series.setdefault(rec.series_id, []).append(rec)

        for sid in sorted(by_series):
            series = sorted(by_series[sid], key=lambda r: r.year)
            stype = series[0].series_type
            if stype == "VR":
                observations.extend(
                    _prepare_vr(
                        series, country, cid, sid, size_cat, note,
                        master_seed, cv_threshold, n_sims,
                        recombine=recombine_small_vr and size_cat == "small",
                    )
                )
            elif stype == "SVR":
                observations.extend(
                    _prepare_svr(series, country, cid, sid, note, master_seed, n_sims)
                )
            else:
                for rec in series:
                    nu = rec.sampling_sd
                    if nu is None:
                        nu = impute_sampling_sd(stype, size_cat, table)
                        note(
                            cid,
                            "impute_sampling_sd",
                            f"year {rec.year:g} {stype} ({size_cat}): sampling sd <- {nu}",
                        )
                    observations.append(_to_observation(rec, sampling_sd=nu))

    for obs in observations:
        if not obs.included:
            continue
        if obs.series_type in ("VR", "SVR"):
            if obs.stochastic_sd is None:
                raise DataError(f"{obs.country_id}/{obs.series_id}: missing stochastic sd")
        elif obs.sampling_sd is None:
            raise DataError(f"{obs.country_id}/{obs.series_id}: missing sampling sd")
    observations.sort(key=lambda o: (o.country_id, o.t, o.series_id))
    return PreprocessResult(observations=observations, countries=countries, audit=audit)


def _excluded_observation(rec: RawRecord) -> Observation:
    log_ratio = math.nan
    if 0 < rec.nmr < rec.u5mr:
        log_ratio = math.log(rec.nmr / (rec.u5mr - rec.nmr))
    return Observation(
        country_id=rec.country_id,
        t=midyear(rec.year),
        log_ratio=log_ratio,
        series_type=rec.series_type,
        series_id=rec.series_id,
        sampling_sd=rec.sampling_sd,
        stochastic_sd=None,
        included=False,
        nmr=rec.nmr,
        u5mr=rec.u5mr,
    )


def _to_observation(
    rec: RawRecord,
    sampling_sd: float | None = None,
    stochastic_sd: float | None = None,
) -> Observation:
    return Observation(
        country_id=rec.country_id,
        t=midyear(rec.year),
        log_ratio=math.log(rec.nmr / (rec.u5mr - rec.nmr)),
        series_type=rec.series_type,
        series_id=rec.series_id,
        sampling_sd=sampling_sd if sampling_sd is not None else rec.sampling_sd,
        stochastic_sd=stochastic_sd,
        included=True,
        nmr=rec.nmr,
        u5mr=rec.u5mr,
    )


def _births_for(rec: RawRecord, country: CountryInput | None) -> float | None:
    if rec.births is not None:
        return rec.births
    if country is not None:
        return country.births.get(int(rec.year))
    return None


def _prepare_vr(
    series, country, cid, sid, size_cat, note, master_seed, cv_threshold, n_sims,
    recombine: bool,
):
    with_births = []
    out = []
    for rec in series:
        births = _births_for(rec, country)
        if births is None:
            note(
                cid,
                "missing_births",
                f"year {rec.year:g} VR: no births available, cannot derive "
                "stochastic error; excluded",
            )
            out.append(_excluded_observation(rec))
            continue
        with_births.append(replace(rec, births=births))
    taus = [
        simulate_stochastic_sd(
            rec.births,
            rec.u5mr / 1000.0,
            rec.nmr / rec.u5mr,
            n_sims=n_sims,
            rng=rngs.rng_for(master_seed, "stochastic", cid, sid, f"{rec.year:.3f}"),
        )
        for rec in with_births
    ]
    if recombine and with_births:
        merged, taus, merge_audit = recombine_vr(
            with_births,
            cv_threshold,
            taus=taus,
            n_sims=n_sims,
            rng=rngs.rng_for(master_seed, "recombine", cid, sid),
        )
        for msg in merge_audit:
            note(cid, "recombine_vr", msg)
        with_births = merged
    for rec, tau in zip(with_births, taus):
        out.append(_to_observation(rec, stochastic_sd=tau))
    return out


def _prepare_svr(series, country, cid, sid, note, master_seed, n_sims):
    out = []
    for rec in series:
        nu = rec.sampling_sd
        if nu is None:
            nu = impute_svr_sd()
            note(cid, "impute_svr_sd", f"year {rec.year:g} SVR: sampling sd <- {nu}")
        # SVR covers an unknown population sample, so country births are no
        # basis for a stochastic error; only record-level births count.
        births = rec.births
        stoch = 0.0
        if births is not None:
            stoch = simulate_stochastic_sd(
                births,
                rec.u5mr / 1000.0,
                rec.nmr / rec.u5mr,
                n_sims=n_sims,
                rng=rngs.rng_for(master_seed, "stochastic", cid, sid, f"{rec.year:.3f}"),
            )
        total = math.hypot(stoch, nu)
        out.append(_to_observation(rec, sampling_sd=nu, stochastic_sd=total))
    return out


# ---------------------------------------------------------------------------
# CSV writers and readers (full float precision, round-trip exact)


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float) and math.isnan(value):
        return ""
    if isinstance(value, float):
        return repr(float(value))  # np scalars repr differently
    return str(value)


def write_observations(path, records: list[RawRecord]) -> None:
    """Write raw observation rows using the input schema."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(OBS_COLUMNS)
        for r in records:
            writer.writerow(
                [
                    r.country_id,
                    _fmt(r.year),
                    _fmt(r.nmr),
                    _fmt(r.u5mr),
                    r.series_type,
                    r.series_id,
                    _fmt(r.sampling_sd),
                    _fmt(r.births),
                    _fmt(r.included),
                ]
            )


def write_countries(path, countries: dict[str, CountryInput]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(COUNTRY_COLUMNS)
        for cid in sorted(countries):
            c = countries[cid]
            years = sorted({int(y - 0.5) for y in c.u5mr_point} | set(c.births))
            for year in years:
                writer.writerow(
                    [
                        cid,
                        c.name,
                        year,
                        _fmt(c.u5mr_point.get(midyear(year))),
                        _fmt(c.births.get(year)),
                        _fmt(c.crisis_adjustments.get(year, 0.0)),
                    ]
                )


def write_fit_observations(path, observations: list[Observation]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(FIT_OBS_COLUMNS)
        for o in observations:
            writer.writerow(
                [
                    o.country_id,
                    _fmt(o.t),
                    _fmt(o.log_ratio),
                    o.series_type,
                    o.series_id,
                    _fmt(o.sampling_sd),
                    _fmt(o.stochastic_sd),
                    _fmt(o.included),
                    _fmt(o.nmr),
                    _fmt(o.u5mr),
                ]
            )


def read_fit_observations(path) -> list[Observation]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in FIT_OBS_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise DataError(f"{path}: missing mandatory columns {missing}")
        for row in reader:
            log_ratio = _parse_float(row["log_ratio"], allow_blank=True)
            out.append(
                Observation(
                    country_id=row["country_id"],
                    t=float(row["t"]),
                    log_ratio=math.nan if log_ratio is None else log_ratio,
                    series_type=row["series_type"],
                    series_id=row["series_id"],
                    sampling_sd=_parse_float(row["sampling_sd"], allow_blank=True),
                    stochastic_sd=_parse_float(row["stochastic_sd"], allow_blank=True),
                    included=_parse_flag(row["included"]),
                    nmr=_parse_float(row["nmr"], allow_blank=True),
                    u5mr=_parse_float(row["u5mr"], allow_blank=True),
                )
            )
    return out


def write_audit(path, audit: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["country_id", "action", "detail"])
        for entry in audit:
            writer.writerow([entry["country_id"], entry["action"], entry["detail"]])
