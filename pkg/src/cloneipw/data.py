"""Longitudinal cohort ingestion, validation, and summaries.

A cohort is a set of subjects, each with baseline covariates, a sequence
of regularly indexed visits carrying a blood marker and a drug dose, and
an optional survival outcome.  Visits are indexed by integer month; an
event in the interval (t, t+1] is attributed to month t, matching the
discrete-time likelihood used downstream.  Cohorts are immutable after
construction and safe to share across analyses.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType

import numpy as np

from . import tables
from .errors import DataError, SchemaError
from .tables import fmt, parse_float, parse_int

RACE_LEVELS = ("white", "black", "other")

BASE_COLUMNS = ("subject_id", "t", "marker", "dose")
BASELINE_COLUMNS = ("sex", "age", "race", "diabetes", "hypertension")
OUTCOME_COLUMNS = ("subject_id", "event_time", "event_observed", "last_followup")


@dataclass(frozen=True)
class CohortSchema:
    """Declared covariate names beyond the fixed baseline block."""

    extra_baseline: tuple[str, ...] = ()
    aux: tuple[str, ...] = ()

    def __post_init__(self):
        for group in (self.extra_baseline, self.aux):
            if len(set(group)) != len(group):
                raise SchemaError("duplicate declared covariate names")


@dataclass(frozen=True)
class BaselineCovariates:
    sex: int
    age: float
    race: str
    diabetes: int
    hypertension: int
    extra: MappingProxyType = field(default_factory=lambda: MappingProxyType({}))

    def __post_init__(self):
        if self.age < 0:
            raise DataError(f"age must be nonnegative, got {self.age}")
        if self.race not in RACE_LEVELS:
            raise DataError(f"race must be one of {RACE_LEVELS}, got {self.race!r}")
        for name in (self.sex, self.diabetes, self.hypertension):
            if name not in (0, 1):
                raise DataError("binary baseline covariates must be 0 or 1")
        if not isinstance(self.extra, MappingProxyType):
            object.__setattr__(self, "extra", MappingProxyType(dict(self.extra)))


@dataclass(frozen=True)
class Visit:
    t: int
    marker: float | None = None
    dose: float | None = None
    aux: MappingProxyType = field(default_factory=lambda: MappingProxyType({}))

    def __post_init__(self):
        if self.t < 0:
            raise DataError(f"visit index must be nonnegative, got {self.t}")
        if self.dose is not None and self.dose < 0:
            raise DataError(f"dose must be nonnegative at t={self.t}")
        if self.marker is not None and not (0.0 < self.marker < 100.0):
            raise DataError(f"marker must lie in (0, 100) at t={self.t}, got {self.marker}")
        if not isinstance(self.aux, MappingProxyType):
            object.__setattr__(self, "aux", MappingProxyType(dict(self.aux)))


@dataclass(frozen=True)
class SubjectHistory:
    id: str
    baseline: BaselineCovariates
    visits: tuple[Visit, ...]
    event_time: float | None = None
    event_observed: bool = False
    last_followup: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "visits", tuple(self.visits))
        ts = [v.t for v in self.visits]
        for a, b in zip(ts, ts[1:]):
            if b == a:
                raise DataError(f"duplicate visit (subject {self.id}, t {a})")
            if b < a:
                raise DataError(f"non-monotone visit times for subject {self.id} (t {a} then {b})")
        if self.event_observed and self.event_time is None:
            raise DataError(f"subject {self.id}: event_observed without event_time")
        if self.event_time is not None and self.event_time <= 0:
            raise DataError(f"subject {self.id}: event_time must be positive")
        if self.last_followup is None:
            object.__setattr__(self, "last_followup", ts[-1] if ts else 0)
        elif ts and self.last_followup < ts[-1]:
            raise DataError(
                f"subject {self.id}: visits recorded after last_followup {self.last_followup}"
            )

    @property
    def max_visit(self) -> int:
        return self.visits[-1].t if self.visits else -1


def event_indicator(subject: SubjectHistory, t: int) -> int:
    """1 iff the subject's event falls in the interval (t, t+1]."""
    if t < 0:
        raise DataError("visit index must be nonnegative")
    if not subject.event_observed or subject.event_time is None:
        return 0
    return int(t < subject.event_time <= t + 1)


@dataclass(frozen=True)
class Cohort:
    subjects: tuple[SubjectHistory, ...]
    visit_horizon: int
    schema: CohortSchema = field(default_factory=CohortSchema)

    def __post_init__(self):
        # Canonical order: subjects sorted by id, each visit sequence sorted.
        subs = tuple(sorted(self.subjects, key=lambda s: s.id))
        object.__setattr__(self, "subjects", subs)
        ids = [s.id for s in subs]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise DataError(f"duplicate subject id(s): {', '.join(dup)}")

    def __len__(self):
        return len(self.subjects)

    def to_arrays(self) -> "CohortArrays":
        return CohortArrays.from_cohort(self)


class CohortArrays:
    """Columnar (padded) view of a cohort used by vectorized operations.

    marker/dose are (n_subjects, horizon+1) arrays with NaN where the
    visit is missing or the value unrecorded; ``observed`` marks recorded
    visits.  Baseline covariates become flat arrays.  The same structure
    is produced directly by the batch simulator, which keeps the fast
    path and the object path interchangeable.
    """

    def __init__(self, ids, marker, dose, observed, event_month, event_time,
                 event_observed, last_followup, baseline, horizon, schema):
        self.ids = list(ids)
        self.marker = marker
        self.dose = dose
        self.observed = observed
        self.event_month = event_month          # -1 when no event
        self.event_time = event_time            # NaN when no event
        self.event_observed = event_observed
        self.last_followup = last_followup
        self.baseline = baseline                # dict name -> array
        self.horizon = horizon
        self.schema = schema

    @property
    def n_subjects(self) -> int:
        return len(self.ids)

    @classmethod
    def from_cohort(cls, cohort: Cohort) -> "CohortArrays":
        n = len(cohort.subjects)
        horizon = cohort.visit_horizon
        width = horizon + 1
        marker = np.full((n, width), np.nan)
        dose = np.full((n, width), np.nan)
        observed = np.zeros((n, width), dtype=bool)
        event_month = np.full(n, -1, dtype=int)
        event_time = np.full(n, np.nan)
        event_obs = np.zeros(n, dtype=bool)
        last_fup = np.zeros(n, dtype=int)
        baseline: dict[str, np.ndarray] = {
            "sex": np.zeros(n),
            "age": np.zeros(n),
            "diabetes": np.zeros(n),
            "hypertension": np.zeros(n),
        }
        race = np.empty(n, dtype=object)
        for name in cohort.schema.extra_baseline:
            baseline[name] = np.zeros(n)
        aux: dict[str, np.ndarray] = {name: np.full((n, width), np.nan) for name in cohort.schema.aux}
        for i, s in enumerate(cohort.subjects):
            for v in s.visits:
                if v.t > horizon:
                    continue
                observed[i, v.t] = True
                if v.marker is not None:
                    marker[i, v.t] = v.marker
                if v.dose is not None:
                    dose[i, v.t] = v.dose
                for name in cohort.schema.aux:
                    if name in v.aux:
                        aux[name][i, v.t] = v.aux[name]
            b = s.baseline
            baseline["sex"][i] = b.sex
            baseline["age"][i] = b.age
            baseline["diabetes"][i] = b.diabetes
            baseline["hypertension"][i] = b.hypertension
            race[i] = b.race
            for name in cohort.schema.extra_baseline:
                baseline[name][i] = b.extra.get(name, np.nan)
            event_obs[i] = s.event_observed
            if s.event_observed:
                event_time[i] = s.event_time
                m = int(np.ceil(s.event_time)) - 1
                event_month[i] = m
            last_fup[i] = s.last_followup
        baseline["race"] = race
        out = cls([s.id for s in cohort.subjects], marker, dose, observed, event_month,
                  event_time, event_obs, last_fup, baseline, horizon, cohort.schema)
        out.aux = aux
        return out


def _build_subject(sid, rows, schema, outcome):
    rows.sort(key=lambda r: r[0])
    visits = []
    for t, mk, ds, aux, _ in rows:
        visits.append(Visit(t=t, marker=mk, dose=ds, aux=aux))
    # Baseline covariates come from the earliest visit row (the t=0 row
    # in a complete file).
    base_raw = rows[0][4]
    extra = {k: base_raw[k] for k in schema.extra_baseline}
    baseline = BaselineCovariates(
        sex=int(base_raw["sex"]),
        age=float(base_raw["age"]),
        race=str(base_raw["race"]),
        diabetes=int(base_raw["diabetes"]),
        hypertension=int(base_raw["hypertension"]),
        extra=extra,
    )
    kwargs = {}
    if outcome is not None:
        kwargs = dict(
            event_time=outcome[0],
            event_observed=bool(outcome[1]),
            last_followup=outcome[2],
        )
    return SubjectHistory(id=sid, baseline=baseline, visits=visits, **kwargs)


def ingest_cohort(source, schema: CohortSchema | None = None, *,
                  outcomes=None, delimiter: str = ",") -> Cohort:
    """Ingest a delimited visit table (one row per subject-visit).

    Required columns: subject_id, t, marker, dose.  Baseline covariates
    (sex, age, race, diabetes, hypertension plus declared extras) are read
    from each subject's first row.  Missing values are empty fields.  An
    optional outcomes table supplies event_time/event_observed/last_followup
    per subject.
    """
    schema = schema or CohortSchema()
    header, rows = _read_source(source, delimiter)
    required = list(BASE_COLUMNS) + list(BASELINE_COLUMNS) + list(schema.extra_baseline) + list(schema.aux)
    missing = [c for c in required if c not in header]
    if missing:
        raise SchemaError(f"missing required column(s): {', '.join(missing)}")
    idx = {c: header.index(c) for c in header}

    by_subject: dict[str, list] = {}
    seen: set[tuple[str, int]] = set()
    for lineno, row in enumerate(rows, start=3):  # line 1 schema comment, 2 header
        where = f"(line {lineno})"
        if len(row) != len(header):
            raise DataError(f"wrong field count {where}")
        sid = row[idx["subject_id"]]
        if sid == "":
            raise DataError(f"empty subject_id {where}")
        t = parse_int(row[idx["t"]], where=where)
        if t is None:
            raise DataError(f"missing visit index {where}")
        if (sid, t) in seen:
            raise DataError(f"duplicate visit (subject {sid}, t {t})")
        seen.add((sid, t))
        marker = parse_float(row[idx["marker"]], where=where)
        dose = parse_float(row[idx["dose"]], where=where)
        aux = {name: parse_float(row[idx[name]], where=where) for name in schema.aux}
        aux = {k: (np.nan if v is None else v) for k, v in aux.items()}
        base = {name: row[idx[name]] for name in BASELINE_COLUMNS}
        for name in schema.extra_baseline:
            val = parse_float(row[idx[name]], where=where)
            base[name] = np.nan if val is None else val
        by_subject.setdefault(sid, []).append((t, marker, dose, aux, base))

    outcome_map = _read_outcomes(outcomes, delimiter) if outcomes is not None else {}
    subjects = []
    horizon = 0
    for sid, subject_rows in by_subject.items():
        subj = _build_subject(sid, subject_rows, schema, outcome_map.get(sid))
        horizon = max(horizon, subj.max_visit)
        subjects.append(subj)
    return Cohort(subjects=tuple(subjects), visit_horizon=horizon, schema=schema)


def _read_source(source, delimiter):
    if isinstance(source, (str, Path)):
        return tables.read_table(source, delimiter=delimiter)
    text = source.read()
    if isinstance(text, bytes):
        text = text.decode()
    buf = io.StringIO(text)
    lines = [ln for ln in buf if not ln.startswith("#")]
    import csv as _csv

    reader = _csv.reader(io.StringIO("".join(lines)), delimiter=delimiter)
    header = next(reader)
    return header, list(reader)


def _read_outcomes(source, delimiter):
    header, rows = _read_source(source, delimiter)
    missing = [c for c in OUTCOME_COLUMNS if c not in header]
    if missing:
        raise SchemaError(f"outcomes table missing column(s): {', '.join(missing)}")
    idx = {c: header.index(c) for c in header}
    out = {}
    for row in rows:
        sid = row[idx["subject_id"]]
        if sid in out:
            raise DataError(f"duplicate outcome row for subject {sid}")
        out[sid] = (
            parse_float(row[idx["event_time"]]),
            (parse_int(row[idx["event_observed"]]) or 0),
            parse_int(row[idx["last_followup"]]),
        )
    return out


def emit_cohort(cohort: Cohort, path, *, delimiter: str = ",") -> None:
    """Write the canonical visit table (sorted subjects, sorted visits)."""
    schema = cohort.schema
    columns = list(BASE_COLUMNS) + list(BASELINE_COLUMNS) + list(schema.extra_baseline) + list(schema.aux)

    def rows():
        for s in cohort.subjects:
            b = s.baseline
            base_cells = [b.sex, fmt(b.age), b.race, b.diabetes, b.hypertension]
            base_cells += [fmt(b.extra.get(k)) for k in schema.extra_baseline]
            for v in s.visits:
                cells = [s.id, v.t, fmt(v.marker), fmt(v.dose)]
                cells += base_cells
                cells += [fmt(v.aux.get(k, np.nan)) for k in schema.aux]
                yield cells

    tables.write_table(path, columns, rows(), delimiter=delimiter)


def emit_outcomes(cohort: Cohort, path, *, delimiter: str = ",") -> None:
    rows = (
        [s.id, fmt(s.event_time), int(s.event_observed), s.last_followup]
        for s in cohort.subjects
    )
    tables.write_table(path, list(OUTCOME_COLUMNS), rows, delimiter=delimiter)


DEFAULT_MARKER_BINS = (0.0, 28.0, 30.0, 32.0, 34.0, 36.0, 38.0, 40.0, 42.0, 100.0)


def dose_change_profile(cohort: Cohort, threshold: float = 0.25,
                        marker_bins=DEFAULT_MARKER_BINS):
    """Proportion of person-months with dose increased/decreased by at least
    ``threshold`` (relative) or maintained, by current-marker bin.

    Eligible pairs are consecutive visits (t-1, t) with both doses present,
    previous dose > 0, and a marker value at t.  Returns (rows, n_excluded)
    where each row is (bin_lo, bin_hi, n, p_increase, p_decrease, p_maintain);
    empty bins report proportions as None.
    """
    if not (0.0 < threshold < 1.0):
        raise DataError("threshold must lie in (0, 1)")
    edges = np.asarray(marker_bins, dtype=float)
    if edges.ndim != 1 or edges.size < 2 or np.any(np.diff(edges) <= 0):
        raise DataError("marker_bins must be strictly increasing edges")
    counts = np.zeros((edges.size - 1, 3), dtype=int)  # up, down, maintain
    excluded = 0
    for s in cohort.subjects:
        visits = s.visits
        for prev, cur in zip(visits, visits[1:]):
            if cur.t != prev.t + 1:
                excluded += 1
                continue
            if prev.dose is None or cur.dose is None or prev.dose <= 0 or cur.marker is None:
                excluded += 1
                continue
            ratio = cur.dose / prev.dose
            b = int(np.searchsorted(edges, cur.marker, side="right")) - 1
            if b < 0 or b >= edges.size - 1:
                excluded += 1
                continue
            if ratio >= 1.0 + threshold:
                counts[b, 0] += 1
            elif ratio <= 1.0 - threshold:
                counts[b, 1] += 1
            else:
                counts[b, 2] += 1
    rows = []
    for b in range(edges.size - 1):
        n = int(counts[b].sum())
        if n == 0:
            rows.append((edges[b], edges[b + 1], 0, None, None, None))
        else:
            rows.append((
                edges[b], edges[b + 1], n,
                counts[b, 0] / n, counts[b, 1] / n, counts[b, 2] / n,
            ))
    return rows, excluded


def summarize_cohort(cohort: Cohort):
    """Demographic summary rows: overall and split by sex.

    Returns rows (characteristic, group, n, value, sd) where categorical
    characteristics report percentages (sd None) and continuous ones
    report mean and SD over non-missing values.
    """
    groups = {
        "all": np.ones(len(cohort.subjects), dtype=bool),
        "male": np.array([s.baseline.sex == 1 for s in cohort.subjects]),
        "female": np.array([s.baseline.sex == 0 for s in cohort.subjects]),
    }
    age = np.array([s.baseline.age for s in cohort.subjects], dtype=float)
    race = np.array([s.baseline.race for s in cohort.subjects], dtype=object)
    binaries = {
        "diabetes": np.array([s.baseline.diabetes for s in cohort.subjects], dtype=float),
        "hypertension": np.array([s.baseline.hypertension for s in cohort.subjects], dtype=float),
        "male": np.array([float(s.baseline.sex == 1) for s in cohort.subjects]),
    }
    extras = {
        name: np.array([s.baseline.extra.get(name, np.nan) for s in cohort.subjects], dtype=float)
        for name in cohort.schema.extra_baseline
    }
    rows = []
    for gname, mask in groups.items():
        n = int(mask.sum())
        rows.append(("n", gname, n, n, None))
        rows.append(_cont_row("age", gname, age[mask]))
        for name, values in extras.items():
            rows.append(_cont_row(name, gname, values[mask]))
        for name, values in binaries.items():
            pct = float(np.mean(values[mask]) * 100.0) if n else None
            rows.append((f"{name}_pct", gname, n, pct, None))
        for level in RACE_LEVELS:
            pct = float(np.mean(race[mask] == level) * 100.0) if n else None
            rows.append((f"race_{level}_pct", gname, n, pct, None))
    return rows


def _cont_row(name, gname, values):
    values = values[~np.isnan(values)]
    if values.size == 0:
        return (name, gname, 0, None, None)
    sd = float(np.std(values, ddof=1)) if values.size > 1 else 0.0
    return (name, gname, int(values.size), float(np.mean(values)), sd)
