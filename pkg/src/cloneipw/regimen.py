"""Treatment regimen rules, adherence decisions, and clone expansion.

A regimen constrains the multiplicative dose change allowed at each visit
given where the current marker sits relative to a target range
[b1, b2]: above the range the factor must fall in [p1, p2], within it in
[p3, p4], below it in [p5, p6].  Finite interval endpoints are inclusive
(recorded doses are discrete multiples; knife-edge exclusion at exactly
the boundary factor is not intended).

Cloning replicates each subject once per candidate regimen and
artificially censors the copy at its first nonadherent visit.  The first
analyzed visit carries adherence 1 by definition: the dose rule
constrains transitions, so the earliest constrained visit is start_t + 1.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .data import Cohort, CohortArrays, SubjectHistory
from .errors import ConfigError, DataError

INF = math.inf


@dataclass(frozen=True)
class RegimenSpec:
    """Dose-change rule (p1..p6, b1, b2) keyed to marker zones."""

    id: int
    p: tuple[float, float, float, float, float, float]
    b: tuple[float, float]
    label: str = ""

    def __post_init__(self):
        if len(self.p) != 6:
            raise ConfigError("regimen requires six factor bounds p1..p6")
        if len(self.b) != 2 or not self.b[0] < self.b[1]:
            raise ConfigError("target range must satisfy b1 < b2")
        p1, p2, p3, p4, p5, p6 = self.p
        if any(v < 0 for v in self.p):
            raise ConfigError("factor bounds must be nonnegative")
        if not (p1 <= p2 and p3 <= p4 and p5 <= p6):
            raise ConfigError("factor bounds must be ordered within each zone")
        if not (p3 <= 1.0 <= p4):
            warnings.warn(
                f"regimen {self.id}: within-target interval ({p3}, {p4}) does not "
                "contain 1; not a maintain-style rule",
                stacklevel=2,
            )
        if not self.label:
            object.__setattr__(self, "label", f"R{self.id}")

    @property
    def midpoint(self) -> float:
        return (self.b[0] + self.b[1]) / 2.0


def usrds_family(p: float, x: float, *, id: int = 0, label: str | None = None) -> RegimenSpec:
    """Regimen G(p, x-3, x+3): decrease by at least p above target, keep the
    change within ±25% inside it, increase by at least p below it."""
    if not (0.0 < p < 1.0):
        raise ConfigError("p must lie in (0, 1)")
    if x - 3.0 < 0.0:
        raise ConfigError("target lower bound x-3 must be nonnegative")
    if label is None:
        label = f"G({p:g},{x - 3:g},{x + 3:g})"
    return RegimenSpec(
        id=id,
        p=(0.0, 1.0 - p, 0.75, 1.25, 1.0 + p, INF),
        b=(x - 3.0, x + 3.0),
        label=label,
    )


@dataclass(frozen=True)
class RegimenGrid:
    specs: tuple[RegimenSpec, ...]
    reference_id: int

    def __post_init__(self):
        object.__setattr__(self, "specs", tuple(self.specs))
        ids = [s.id for s in self.specs]
        if len(set(ids)) != len(ids):
            raise ConfigError("regimen ids must be unique")
        if self.reference_id not in ids:
            raise ConfigError(f"reference regimen {self.reference_id} not in grid")

    def __len__(self):
        return len(self.specs)

    def by_id(self, rid: int) -> RegimenSpec:
        for s in self.specs:
            if s.id == rid:
                return s
        raise ConfigError(f"unknown regimen id {rid}")

    def by_label(self, label: str) -> RegimenSpec:
        for s in self.specs:
            if s.label == label:
                return s
        raise ConfigError(f"unknown regimen label {label!r}")


def _zone(spec: RegimenSpec, marker: float) -> int:
    """0 = above target, 1 = within, 2 = below (zone bounds closed)."""
    if marker > spec.b[1]:
        return 0
    if marker < spec.b[0]:
        return 2
    return 1


def allowable_dose_interval(spec: RegimenSpec, prev_dose: float, marker: float):
    """Allowed dose interval prev_dose × (zone factor bounds), endpoints
    inclusive where finite."""
    if prev_dose is None or not prev_dose > 0:
        raise DataError("allowable_dose_interval requires a positive previous dose")
    if marker is None or (isinstance(marker, float) and math.isnan(marker)):
        raise DataError("marker missing; resolve carry-forward before calling")
    z = _zone(spec, marker)
    lo, hi = spec.p[2 * z], spec.p[2 * z + 1]
    return (prev_dose * lo, prev_dose * hi if math.isfinite(hi) else INF)


def is_adherent(spec: RegimenSpec, prev_dose: float, marker: float, new_dose: float) -> int:
    """1 iff the new dose lies in the allowable interval.

    Zero previous dose makes the factor undefined; the convention is that
    an increase zone accepts any positive new dose, while maintain and
    decrease zones accept only staying at zero.
    """
    if new_dose is None or new_dose < 0:
        raise DataError("new_dose must be nonnegative")
    if marker is None or (isinstance(marker, float) and math.isnan(marker)):
        return 0
    if prev_dose is None or (isinstance(prev_dose, float) and math.isnan(prev_dose)):
        return 0
    if prev_dose == 0:
        z = _zone(spec, marker)
        if z == 2:  # below target: dose must increase
            return int(new_dose > 0)
        return int(new_dose == 0)
    lo, hi = allowable_dose_interval(spec, prev_dose, marker)
    return int(lo <= new_dose <= hi)


def adherence_trace(spec: RegimenSpec, subject: SubjectHistory, start_t: int):
    """Evaluate adherence month by month from start_t.

    Adherence at start_t is 1 by definition.  Later visits compare the
    recorded dose with the allowable interval given the carried-forward
    marker and the previous visit's dose (itself carried forward across
    missing values).  Returns (adherence list over evaluated visits,
    censor visit or None).  Evaluation stops at the first nonadherent
    visit, at a gap in the visit sequence, or at the end of follow-up.
    """
    visits = {v.t: v for v in subject.visits}
    if start_t not in visits:
        return [], None
    marker_cf = None
    dose_cf = None
    for t in range(0, start_t + 1):
        v = visits.get(t)
        if v is None:
            continue
        if v.marker is not None:
            marker_cf = v.marker
        if v.dose is not None:
            dose_cf = v.dose
    trace = [1]
    t = start_t + 1
    while t in visits:
        v = visits[t]
        marker = v.marker if v.marker is not None else marker_cf
        ok = 0
        if marker is not None and v.dose is not None and dose_cf is not None:
            ok = is_adherent(spec, dose_cf, marker, v.dose)
        trace.append(ok)
        if not ok:
            return trace, t
        marker_cf = marker
        if v.dose is not None:
            dose_cf = v.dose
        t += 1
    return trace, None


class CloneTable:
    """Columnar table of clone person-months.

    One row per (subject, regimen, visit).  ``censored == 1`` marks the
    single artificial-censoring row that ends a nonadherent clone; such a
    row is an adherence-transition record, not person-time.  ``event == 1``
    appears only on the final row of a clone.  Rows are sorted by
    (subject id, regimen id, t).
    """

    FIELDS = (
        "subject_id", "regimen_id", "t", "adherent", "censored", "event",
        "marker", "prev_marker", "prev_dose", "dose",
    )

    def __init__(self, cols: dict, ids: list[str], grid: RegimenGrid,
                 start_t: int, horizon: int, n_subjects: int):
        self.cols = cols
        self.ids = ids
        self.grid = grid
        self.start_t = start_t
        self.horizon = horizon
        self.n_subjects = n_subjects
        self.n_regimens = len(grid)

    def __len__(self):
        return len(self.cols["t"])

    @property
    def subject_idx(self):
        return self.cols["subject_idx"]

    @property
    def clone_idx(self):
        return self.cols["clone_idx"]

    def at_risk(self) -> np.ndarray:
        return self.cols["censored"] == 0

    def subject_labels(self) -> np.ndarray:
        return np.asarray(self.ids, dtype=object)[self.cols["subject_idx"]]

    def rows(self):
        labels = self.subject_labels()
        c = self.cols
        weights = c.get("w_total")
        for i in range(len(self)):
            row = [
                labels[i], c["regimen_id"][i], c["t"][i], c["adherent"][i],
                c["censored"][i], c["event"][i], c["marker"][i], c["prev_marker"][i],
                c["prev_dose"][i], c["dose"][i],
            ]
            if weights is not None:
                row.extend([c["sw_adherence"][i], c["sw_admin"][i], c["sw_ltfu"][i], weights[i]])
            yield row

    def to_file(self, path, delimiter: str = ",") -> None:
        from . import tables

        columns = list(self.FIELDS)
        if "w_total" in self.cols:
            columns += ["sw_adherence", "sw_admin", "sw_ltfu", "w_total"]
        tables.write_table(path, columns, self.rows(), delimiter=delimiter)

    @classmethod
    def from_file(cls, path, cohort, grid: RegimenGrid, start_t: int,
                  delimiter: str = ",") -> "CloneTable":
        """Reload an exported clone table, re-keying subjects against a cohort."""
        from . import tables
        from .errors import DataError

        arrays = cohort.to_arrays() if isinstance(cohort, Cohort) else cohort
        header, raw = tables.read_table(path, delimiter=delimiter)
        need = list(cls.FIELDS)
        missing = [c for c in need if c not in header]
        if missing:
            raise DataError(f"clone table missing column(s): {', '.join(missing)}")
        idx = {c: header.index(c) for c in header}
        id_pos = {sid: i for i, sid in enumerate(arrays.ids)}
        n = len(raw)
        cols = {
            "subject_idx": np.empty(n, dtype=int),
            "regimen_id": np.empty(n, dtype=int),
            "t": np.empty(n, dtype=int),
            "adherent": np.empty(n, dtype=np.int8),
            "censored": np.empty(n, dtype=np.int8),
            "event": np.empty(n, dtype=np.int8),
            "marker": np.empty(n), "prev_marker": np.empty(n),
            "prev_dose": np.empty(n), "dose": np.empty(n),
        }
        has_w = "w_total" in header
        if has_w:
            for name in ("sw_adherence", "sw_admin", "sw_ltfu", "w_total"):
                cols[name] = np.empty(n)
        for i, row in enumerate(raw):
            sid = row[idx["subject_id"]]
            if sid not in id_pos:
                raise DataError(f"clone table subject {sid} not present in cohort")
            cols["subject_idx"][i] = id_pos[sid]
            for name in ("regimen_id", "t", "adherent", "censored", "event"):
                cols[name][i] = int(row[idx[name]])
            for name in ("marker", "prev_marker", "prev_dose", "dose"):
                cell = row[idx[name]]
                cols[name][i] = float(cell) if cell not in ("", None) else np.nan
            if has_w:
                for name in ("sw_adherence", "sw_admin", "sw_ltfu", "w_total"):
                    cell = row[idx[name]]
                    cols[name][i] = float(cell) if cell not in ("", None) else np.nan
        reg_pos = {spec.id: j for j, spec in enumerate(grid.specs)}
        try:
            kpos = np.array([reg_pos[r] for r in cols["regimen_id"]])
        except KeyError as exc:
            raise DataError(f"clone table references unknown regimen id {exc}") from None
        cols["clone_idx"] = cols["subject_idx"] * len(grid) + kpos
        table = cls(cols, arrays.ids, grid, start_t, arrays.horizon, arrays.n_subjects)
        table.baseline = arrays.baseline
        return table


def _carry_forward(values: np.ndarray) -> np.ndarray:
    """Row-wise last-observation-carried-forward over the time axis."""
    idx = np.arange(values.shape[1])[None, :]
    pos = np.where(~np.isnan(values), idx, -1)
    pos = np.maximum.accumulate(pos, axis=1)
    out = np.where(
        pos >= 0,
        np.take_along_axis(values, np.clip(pos, 0, None), axis=1),
        np.nan,
    )
    return out


def _adherence_matrix(spec: RegimenSpec, marker_cf, prev_dose, dose):
    """Vectorized is_adherent over a (subjects × months) grid."""
    p = np.array(spec.p)
    with np.errstate(invalid="ignore"):
        zone = np.where(marker_cf > spec.b[1], 0, np.where(marker_cf < spec.b[0], 2, 1))
    lo_f = p[2 * zone]
    hi_f = p[2 * zone + 1]
    with np.errstate(invalid="ignore"):
        pos_prev = prev_dose > 0
        lo = lo_f * prev_dose
        hi = hi_f * prev_dose
        ok_pos = (dose >= lo) & ((dose <= hi) | np.isinf(hi_f))
        ok_zero = np.where(zone == 2, dose > 0, dose == 0)
    ok = np.where(pos_prev, ok_pos, ok_zero)
    valid = ~np.isnan(marker_cf) & ~np.isnan(dose) & ~np.isnan(prev_dose)
    return np.where(valid, ok, False)


def clone_cohort(cohort, grid: RegimenGrid, start_t: int,
                 horizon: int | None = None) -> CloneTable:
    """Expand a cohort into the cloned, artificially censored table.

    One clone per (subject, regimen) with any person-time; rows run from
    start_t to the first of: nonadherence (censor row), event, end of
    certified follow-up, or the analyzable horizon.  An event in (t, t+1]
    is kept only when the clone is still uncensored at visit t.
    """
    if len(grid) == 0:
        raise ConfigError("regimen grid is empty")
    arrays = cohort.to_arrays() if isinstance(cohort, Cohort) else cohort
    n = arrays.n_subjects
    width = arrays.horizon + 1
    h_max = arrays.horizon if horizon is None else min(horizon, arrays.horizon)
    if start_t < 0 or start_t > h_max:
        raise ConfigError(f"start_t {start_t} outside analyzable range 0..{h_max}")

    marker_cf = _carry_forward(arrays.marker)
    dose_cf = _carry_forward(arrays.dose)
    prev_dose = np.full_like(arrays.dose, np.nan)
    prev_dose[:, 1:] = dose_cf[:, :-1]
    prev_marker = np.full_like(arrays.marker, np.nan)
    prev_marker[:, 1:] = marker_cf[:, :-1]

    months = np.arange(width)
    # Contiguous observation run from start_t.
    obs = arrays.observed
    gap = ~obs & (months[None, :] >= start_t)
    first_gap = np.where(gap.any(axis=1), gap.argmax(axis=1), width)
    contig_end = first_gap - 1  # last contiguously observed month

    event_month = arrays.event_month.copy()
    has_event = arrays.event_observed & (event_month >= start_t)
    lf_cap = arrays.last_followup - 1

    sub_rows = []
    for spec in grid.specs:
        adh = _adherence_matrix(spec, marker_cf, prev_dose, arrays.dose)
        adh[:, : start_t + 1] = True  # adherence at start_t is 1 by definition

        limit_data = np.minimum(contig_end, h_max)
        e_eff = np.where(has_event & (event_month <= limit_data), event_month, width + 1)
        # First nonadherent visit within (start_t, min(limit_data, e_eff)].
        scan_hi = np.minimum(limit_data, e_eff)
        bad = ~adh & (months[None, :] > start_t) & (months[None, :] <= scan_hi[:, None])
        c_eff = np.where(bad.any(axis=1), bad.argmax(axis=1), width + 1)

        censor_first = c_eff <= e_eff
        event_first = (e_eff < c_eff) & (e_eff <= width)
        end_t = np.where(
            censor_first & (c_eff <= width), c_eff,
            np.where(event_first, e_eff, np.minimum(limit_data, np.minimum(lf_cap, h_max))),
        )
        starts = np.full(n, start_t)
        alive_at_start = ~arrays.event_observed | (event_month >= start_t)
        valid = obs[:, start_t] & alive_at_start & (end_t >= start_t)
        # A clone whose only admissible row would be an uncertified final
        # month has no person-time and is dropped.
        n_rows = np.where(valid, end_t - start_t + 1, 0)

        subj = np.repeat(np.arange(n), n_rows)
        t = _ranges(starts, n_rows)
        if subj.size == 0:
            continue
        is_last = np.zeros(subj.size, dtype=bool)
        ends = np.cumsum(n_rows[n_rows > 0]) - 1
        is_last[ends] = True
        censored = is_last & censor_first[subj] & (c_eff[subj] <= width)
        event = is_last & event_first[subj]
        adherent = np.where(censored, 0, 1)
        sub_rows.append(dict(
            subject_idx=subj,
            regimen_id=np.full(subj.size, spec.id),
            t=t,
            adherent=adherent.astype(np.int8),
            censored=censored.astype(np.int8),
            event=event.astype(np.int8),
            marker=marker_cf[subj, t],
            prev_marker=prev_marker[subj, t],
            prev_dose=prev_dose[subj, t],
            dose=arrays.dose[subj, t],
        ))

    if not sub_rows:
        cols = {k: np.empty(0) for k in
                ("subject_idx", "regimen_id", "t", "adherent", "censored", "event",
                 "marker", "prev_marker", "prev_dose", "dose")}
        cols["clone_idx"] = np.empty(0, dtype=int)
        return CloneTable(cols, arrays.ids, grid, start_t, h_max, n)

    cols = {k: np.concatenate([r[k] for r in sub_rows]) for k in sub_rows[0]}
    reg_pos = {spec.id: j for j, spec in enumerate(grid.specs)}
    reg_order = np.vectorize(reg_pos.get)(cols["regimen_id"])
    order = np.lexsort((cols["t"], reg_order, cols["subject_idx"]))
    cols = {k: v[order] for k, v in cols.items()}
    cols["clone_idx"] = cols["subject_idx"] * len(grid) + np.vectorize(reg_pos.get)(cols["regimen_id"])
    table = CloneTable(cols, arrays.ids, grid, start_t, h_max, n)
    table.baseline = arrays.baseline
    return table


def _ranges(starts, counts):
    """Concatenate arange(start, start+count) for every block with count>0."""
    total = int(counts.sum())
    if total == 0:
        return np.empty(0, dtype=int)
    pos = counts > 0
    block_starts = np.repeat(starts[pos], counts[pos])
    offsets = np.concatenate(([0], np.cumsum(counts[pos])[:-1]))
    within = np.arange(total) - np.repeat(offsets, counts[pos])
    return (block_starts + within).astype(int)
