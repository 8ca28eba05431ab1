"""Stabilized inverse-probability weights for the cloned analysis.

Three censoring processes are modeled on the clone person-time rows:
artificial censoring at first nonadherence, administrative end of
follow-up, and loss to follow-up (a recorded-visit stream that stops
while vital status is still known).  Each process gets a numerator model
(time and baseline covariates only) and a denominator model (adding
time-varying covariates); the stabilized weight on a person-time row at
month t is the cumulative product of numerator/denominator probability
ratios over the transitions start_t+1 .. t.  The row at start_t carries
weight contribution 1: no transition is modeled into the first analyzed
visit.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .design import DesignSpec
from .errors import ConfigError, NumericalError, PositivityError
from .glm import FittedGlm, fit_logistic, predict_proba
from .regimen import CloneTable

TIME_VARYING_COLUMNS = {"marker", "prev_marker", "marker_avg", "marker_diff", "prev_dose", "dose"}
COMPONENTS = ("adherence", "admin", "ltfu")


@dataclass
class WeightModelSpec:
    numerator: DesignSpec
    denominator: DesignSpec
    stratify_by_regimen: bool = True
    truncation: tuple[float, float] | None = None

    def __post_init__(self):
        bad = self.numerator.term_names() & TIME_VARYING_COLUMNS
        if bad:
            raise ConfigError(
                f"numerator terms must use baseline covariates and time only; got {sorted(bad)}"
            )
        if not self.numerator.term_names() <= self.denominator.term_names():
            raise ConfigError("denominator terms must extend the numerator terms")
        if self.truncation is not None:
            lo, hi = self.truncation
            if not (0.0 <= lo < hi <= 100.0):
                raise ConfigError("truncation percentiles must satisfy 0 <= lo < hi <= 100")


@dataclass
class StratumFits:
    numerator: FittedGlm | None
    denominator: FittedGlm | None
    degenerate: bool = False
    n_records: int = 0
    n_failures: int = 0


@dataclass
class WeightTable:
    """Per-clone-row weight components aligned with the clone table."""

    component: str
    p_num: np.ndarray
    p_den: np.ndarray
    sw: np.ndarray          # NaN on rows that are not person-time
    fits: dict = field(default_factory=dict)


def _row_design_data(clones: CloneTable, *, lag_time_varying: bool) -> dict:
    """Column dictionary over clone rows for weight-model designs.

    Transition models for the censoring processes condition on the last
    observed visit's time-varying values; ``lag_time_varying`` selects that
    behaviour (values shifted one row back within each clone).
    """
    c = clones.cols
    baseline = getattr(clones, "baseline", None)
    if baseline is None:
        raise ConfigError("clone table carries no baseline covariates; build it from a cohort")
    subj = c["subject_idx"]
    data = {name: np.asarray(values)[subj] for name, values in baseline.items()}
    data["t"] = c["t"].astype(float)
    marker = c["marker"]
    prev_marker = c["prev_marker"]
    prev_dose = c["prev_dose"]
    dose = c["dose"]
    if lag_time_varying:
        marker, prev_marker, prev_dose, dose = (
            _shift_within_clone(clones, arr) for arr in (marker, prev_marker, prev_dose, dose)
        )
    data["marker"] = marker
    data["prev_marker"] = prev_marker
    with np.errstate(invalid="ignore"):
        data["marker_avg"] = np.where(
            np.isnan(prev_marker), marker, (marker + prev_marker) / 2.0
        )
        data["marker_diff"] = np.where(
            np.isnan(prev_marker), 0.0, marker - prev_marker
        )
    data["prev_dose"] = prev_dose
    data["dose"] = dose
    return data


def _shift_within_clone(clones: CloneTable, values: np.ndarray) -> np.ndarray:
    out = np.empty_like(values, dtype=float)
    out[1:] = values[:-1]
    out[0] = np.nan
    starts = np.ones(len(values), dtype=bool)
    starts[1:] = clones.clone_idx[1:] != clones.clone_idx[:-1]
    out[starts] = np.nan
    return out


def _ltfu_failure_records(clones: CloneTable, arrays_observed, last_followup, h_max):
    """Virtual failure records for loss to follow-up.

    A clone whose final row at t is at-risk (censored=0, event=0) with
    t < h_max and survival status known past t, but with no visit recorded
    at t+1, dropped out at t+1.
    """
    c = clones.cols
    n = len(clones)
    is_last = np.ones(n, dtype=bool)
    is_last[:-1] = c["clone_idx"][:-1] != c["clone_idx"][1:]
    cand = is_last & (c["censored"] == 0) & (c["event"] == 0) & (c["t"] < h_max)
    idx = np.nonzero(cand)[0]
    subj = c["subject_idx"][idx]
    nxt = c["t"][idx] + 1
    not_observed = ~arrays_observed[subj, nxt]
    status_known = last_followup[subj] >= nxt
    keep = not_observed & status_known
    return idx[keep], nxt[keep]


def fit_censoring_models(clones: CloneTable, spec: WeightModelSpec, component: str,
                         *, observed=None, last_followup=None) -> dict:
    """Fit numerator and denominator logistic models per regimen stratum.

    Returns {regimen_id: StratumFits} (a single entry keyed None when not
    stratified).  Strata without any failures are flagged degenerate and
    later receive unit weights.
    """
    if component not in COMPONENTS:
        raise ConfigError(f"unknown censoring component {component!r}")
    c = clones.cols
    if component == "adherence":
        mask = c["t"] > clones.start_t
        response = c["adherent"][mask].astype(float)
        data = _subset(_row_design_data(clones, lag_time_varying=False), mask)
        strata = c["regimen_id"][mask]
    else:
        mask = (c["censored"] == 0) & (c["t"] > clones.start_t)
        response = np.ones(int(mask.sum()))
        data = _subset(_row_design_data(clones, lag_time_varying=True), mask)
        strata = c["regimen_id"][mask]
        if component == "ltfu":
            if observed is None or last_followup is None:
                raise ConfigError("ltfu models need the cohort observation matrix")
            fail_idx, fail_t = _ltfu_failure_records(clones, observed, last_followup, clones.horizon)
            if fail_idx.size:
                fail_data = _subset(_row_design_data(clones, lag_time_varying=False), fail_idx)
                fail_data["t"] = fail_t.astype(float)
                data = _concat(data, fail_data)
                response = np.concatenate([response, np.zeros(fail_idx.size)])
                strata = np.concatenate([strata, c["regimen_id"][fail_idx]])
        # admin: reaching the horizon is deterministic; no failure records
        # occur before it, so the fits below come out degenerate (all-1).

    out: dict = {}
    groups = [(rid, strata == rid) for rid in sorted(set(strata.tolist()))] if spec.stratify_by_regimen \
        else [(None, np.ones(len(response), dtype=bool))]
    for rid, gmask in groups:
        y = response[gmask]
        gdata = _subset(data, gmask)
        n_fail = int(np.sum(y == 0))
        if len(y) == 0 or n_fail == 0:
            if component == "adherence" and len(y) > 0:
                warnings.warn(
                    f"{component} stratum {rid}: no censoring events; weights default to 1",
                    stacklevel=2,
                )
            out[rid] = StratumFits(None, None, degenerate=True,
                                   n_records=len(y), n_failures=n_fail)
            continue
        xn, names_n = spec.numerator.build(gdata)
        xd, names_d = spec.denominator.build(gdata)
        fit_n = fit_logistic(xn, y, column_names=names_n)
        fit_d = fit_logistic(xd, y, column_names=names_d)
        out[rid] = StratumFits(fit_n, fit_d, n_records=len(y), n_failures=n_fail)
    return out


def fit_adherence_models(clones: CloneTable, spec: WeightModelSpec) -> dict:
    return fit_censoring_models(clones, spec, "adherence")


def _subset(data: dict, mask) -> dict:
    return {k: np.asarray(v)[mask] for k, v in data.items()}


def _concat(a: dict, b: dict) -> dict:
    return {k: np.concatenate([np.asarray(a[k]), np.asarray(b[k])]) for k in a}


def _predict_components(clones: CloneTable, spec: WeightModelSpec, fits: dict,
                        component: str) -> tuple[np.ndarray, np.ndarray]:
    """Per-row transition probabilities (p_num, p_den) of surviving the
    censoring process into each row's month (1.0 at start rows)."""
    n = len(clones)
    p_num = np.ones(n)
    p_den = np.ones(n)
    c = clones.cols
    mask = c["t"] > clones.start_t
    if component != "adherence":
        mask = mask & (c["censored"] == 0)
    if not mask.any():
        return p_num, p_den
    data = _row_design_data(clones, lag_time_varying=(component != "adherence"))
    data = _subset(data, mask)
    rids = c["regimen_id"][mask]
    pn = np.ones(int(mask.sum()))
    pd = np.ones(int(mask.sum()))
    for rid, stratum in fits.items():
        sel = np.ones(len(rids), dtype=bool) if rid is None else (rids == rid)
        if not sel.any() or stratum.degenerate:
            continue
        gdata = _subset(data, sel)
        xn, _ = spec.numerator.build(gdata)
        xd, _ = spec.denominator.build(gdata)
        pn[sel] = predict_proba(stratum.numerator, xn)
        pd[sel] = predict_proba(stratum.denominator, xd)
    if np.any(pd < 1e-12):
        rows = np.nonzero(mask)[0][pd < 1e-12]
        raise PositivityError(
            f"fitted denominator probability below 1e-12 on row(s) {rows[:5].tolist()}"
        )
    p_num[mask] = pn
    p_den[mask] = pd
    return p_num, p_den


def _cumprod_within_clone(clones: CloneTable, ratios: np.ndarray) -> np.ndarray:
    if len(ratios) == 0:
        return ratios.copy()
    logs = np.log(ratios)
    cum = np.cumsum(logs)
    starts = np.ones(len(ratios), dtype=bool)
    starts[1:] = clones.clone_idx[1:] != clones.clone_idx[:-1]
    start_pos = np.nonzero(starts)[0]
    base_vals = np.concatenate([[0.0], cum[start_pos[1:] - 1]])
    seg_len = np.diff(np.append(start_pos, len(ratios)))
    base = np.repeat(base_vals, seg_len)
    return np.exp(cum - base)


def compute_stabilized_weights(clones: CloneTable, fits: dict,
                               spec: WeightModelSpec,
                               component: str = "adherence") -> WeightTable:
    """Cumulative stabilized weights sw(t) = prod_{s<=t} p_num(s)/p_den(s).

    The product runs over the clone's transitions from start_t+1 through t;
    censor rows get sw = NaN (they carry no person-time).
    """
    p_num, p_den = _predict_components(clones, spec, fits, component)
    ratio = p_num / p_den
    sw = _cumprod_within_clone(clones, ratio)
    sw = np.where(clones.cols["censored"] == 1, np.nan, sw)
    return WeightTable(component=component, p_num=p_num, p_den=p_den, sw=sw, fits=fits)


def compute_censoring_weights(clones: CloneTable, which: str, spec: WeightModelSpec,
                              *, observed=None, last_followup=None) -> WeightTable:
    """Stabilized weights for the administrative or loss-to-follow-up process."""
    if which not in ("admin", "ltfu"):
        raise ConfigError("which must be 'admin' or 'ltfu'")
    fits = fit_censoring_models(clones, spec, which,
                                observed=observed, last_followup=last_followup)
    return compute_stabilized_weights(clones, fits, spec, component=which)


def combine_weights(tables: list[WeightTable], truncation=None):
    """Multiply component weights into w_total and optionally winsorize.

    Returns (w_total over clone rows with NaN off person-time, summary dict).
    """
    if not tables:
        raise ConfigError("no weight tables to combine")
    w = np.ones_like(tables[0].sw)
    for tab in tables:
        w = w * tab.sw
    finite = ~np.isnan(w)
    pre = _weight_summary(w[finite])
    if truncation is not None:
        lo_p, hi_p = truncation
        lo, hi = np.percentile(w[finite], [lo_p, hi_p])
        w = np.where(finite, np.clip(w, lo, hi), w)
    post = _weight_summary(w[finite])
    summary = {"pre": pre, "post": post, "truncation": truncation,
               "components": [t.component for t in tables]}
    return w, summary


def _weight_summary(values: np.ndarray) -> dict:
    if values.size == 0:
        return {"n": 0}
    qs = np.percentile(values, [1, 50, 99])
    return {
        "n": int(values.size),
        "mean": float(np.mean(values)),
        "min": float(np.min(values)),
        "p1": float(qs[0]),
        "median": float(qs[1]),
        "p99": float(qs[2]),
        "max": float(np.max(values)),
    }


def attach_weights(clones: CloneTable, tables: list[WeightTable], w_total: np.ndarray) -> None:
    """Store component and total weights on the clone table columns."""
    by_name = {t.component: t for t in tables}
    for comp in COMPONENTS:
        col = f"sw_{comp}"
        clones.cols[col] = by_name[comp].sw if comp in by_name else np.ones(len(clones))
    clones.cols["w_total"] = w_total
    if np.any(w_total[~np.isnan(w_total)] <= 0):
        raise NumericalError("total weights must be positive")


def positivity_diagnostics(fits_by_component: dict, clones: CloneTable,
                           weight_tables: list[WeightTable] | None = None):
    """Positivity report rows: fitted denominator probability range and
    flagged counts per (component, stratum), plus weight summaries.

    Strata that never appear contribute no row (absent, not zero).
    """
    rows = []
    for component, fits in fits_by_component.items():
        for rid, stratum in sorted(fits.items(), key=lambda kv: (kv[0] is None, kv[0])):
            if stratum.degenerate:
                rows.append((component, rid, stratum.n_records, stratum.n_failures,
                             None, None, 0, 0, 1))
                continue
            tab = None
            if weight_tables:
                tab = next((t for t in weight_tables if t.component == component), None)
            if tab is not None:
                mask = clones.cols["regimen_id"] == rid if rid is not None else np.ones(len(clones), bool)
                mask = mask & (clones.cols["t"] > clones.start_t)
                if component != "adherence":
                    mask = mask & (clones.cols["censored"] == 0)
                pd = tab.p_den[mask]
            else:
                pd = np.array([])
            if pd.size:
                rows.append((
                    component, rid, stratum.n_records, stratum.n_failures,
                    float(pd.min()), float(pd.max()),
                    int(np.sum(pd < 0.01)), int(np.sum(pd > 0.99)), 0,
                ))
            else:
                rows.append((component, rid, stratum.n_records, stratum.n_failures,
                             None, None, 0, 0, 0))
    return rows


POSITIVITY_COLUMNS = (
    "component", "stratum", "n_records", "n_failures",
    "min_p_den", "max_p_den", "n_below_0.01", "n_above_0.99", "degenerate",
)
