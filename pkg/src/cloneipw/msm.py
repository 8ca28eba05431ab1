"""Marginal structural hazard models fit by weighted pooled logistic
regression on clone person-time.

Each uncensored clone visit is one Bernoulli observation of the event
indicator, the per-visit log-odds approximates the log-hazard for rare
events, and the robust covariance is clustered by the original subject:
all clones of a subject share a cluster because uncensored clones share
the subject's death time.

Regimen effect forms: a linear effect in regimen ordinal, indicators
against a reference regimen, and either of those interacted with
ln(t - start_t + 1), whose value is zero at the first analyzed month.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from .design import DesignSpec, Intercept, TimeFactor
from .errors import ConfigError, DataError, NumericalError
from .glm import FittedGlm, cluster_sandwich_covariance, fit_logistic
from .regimen import CloneTable, RegimenGrid

EFFECT_FORMS = ("linear", "factor", "linear_x_logtime", "factor_x_logtime")
Z975 = 1.959964


@dataclass
class MsmSpec:
    effect_form: str
    reference: int
    start_t: int
    baseline_terms: DesignSpec = field(default_factory=lambda: DesignSpec([]))
    time_intercept: DesignSpec | None = None
    regimen_order: dict | None = None  # regimen id -> ordinal, for linear forms
    label: str = ""

    def __post_init__(self):
        if self.effect_form not in EFFECT_FORMS:
            raise ConfigError(f"effect_form must be one of {EFFECT_FORMS}")
        if self.regimen_order is not None:
            ords = list(self.regimen_order.values())
            if len(set(ords)) != len(ords):
                raise ConfigError("regimen ordinals must be unique")
        if not self.label:
            self.label = self.effect_form

    def is_linear(self) -> bool:
        return self.effect_form.startswith("linear")

    def has_time_interaction(self) -> bool:
        return self.effect_form.endswith("_x_logtime")


@dataclass
class PersonTime:
    """At-risk clone visits with response, covariates, weights, clusters."""

    y: np.ndarray
    t: np.ndarray
    regimen_id: np.ndarray
    subject_idx: np.ndarray
    weights: np.ndarray
    data: dict
    regimen_ids_present: tuple

    def __len__(self):
        return len(self.y)


def build_person_time(clones: CloneTable, use_weights: bool = True,
                      min_month: int | None = None,
                      max_month: int | None = None) -> PersonTime:
    """Extract the at-risk analysis rows from a clone table.

    Censor rows are excluded (no person-time); each remaining row carries
    the event response for its month.  ``min_month``/``max_month`` restrict
    the analyzed window without changing the accumulated censoring state.
    """
    c = clones.cols
    mask = c["censored"] == 0
    if min_month is not None:
        mask = mask & (c["t"] >= min_month)
    if max_month is not None:
        mask = mask & (c["t"] <= max_month)
    if not mask.any():
        raise DataError("no person-time rows in the requested window")
    if use_weights and "w_total" in c:
        w = c["w_total"][mask]
        if np.any(np.isnan(w)):
            bad = np.nonzero(np.isnan(w))[0][:5]
            raise DataError(f"weight missing for at-risk row(s) {bad.tolist()}")
    else:
        w = np.ones(int(mask.sum()))
    baseline = getattr(clones, "baseline", None) or {}
    subj = c["subject_idx"][mask]
    data = {name: np.asarray(vals)[subj] for name, vals in baseline.items()}
    data["t"] = c["t"][mask].astype(float)
    data["marker"] = c["marker"][mask]
    data["prev_dose"] = c["prev_dose"][mask]
    present = tuple(int(r) for r in np.unique(c["regimen_id"][mask]))
    return PersonTime(
        y=c["event"][mask].astype(float),
        t=c["t"][mask].astype(int),
        regimen_id=c["regimen_id"][mask].astype(int),
        subject_idx=subj,
        weights=w,
        data=data,
        regimen_ids_present=present,
    )


@dataclass
class MsmFit:
    glm: FittedGlm
    spec: MsmSpec
    n_rows: int
    n_events: float
    effect_columns: dict
    events_per_regimen: dict
    unstable_regimens: list

    def coefficient(self, name: str) -> float:
        return float(self.glm.coefficients[self.glm.column_names.index(name)])


def _effect_columns(pt: PersonTime, spec: MsmSpec):
    """Regimen-effect design columns for the chosen form."""
    cols, names = [], []
    logt = np.log(pt.t - spec.start_t + 1.0)
    if spec.is_linear():
        order = spec.regimen_order
        if order is None:
            raise ConfigError("linear effect forms need regimen_order")
        try:
            g = np.array([order[r] for r in pt.regimen_id], dtype=float)
        except KeyError as exc:
            raise ConfigError(f"regimen {exc} missing from regimen_order") from None
        cols.append(g)
        names.append("regimen_ordinal")
        if spec.has_time_interaction():
            cols.append(g * logt)
            names.append("regimen_ordinal:logt")
    else:
        others = [r for r in pt.regimen_ids_present if r != spec.reference]
        if spec.reference not in pt.regimen_ids_present:
            raise ConfigError(f"reference regimen {spec.reference} has no person-time")
        if not others:
            raise DataError("no non-reference regimen with events to compare")
        for r in others:
            ind = (pt.regimen_id == r).astype(float)
            cols.append(ind)
            names.append(f"regimen[{r}]")
        if spec.has_time_interaction():
            for r in others:
                cols.append((pt.regimen_id == r) * logt)
                names.append(f"regimen[{r}]:logt")
    return np.column_stack(cols), names


def _time_intercept(pt: PersonTime, spec: MsmSpec) -> DesignSpec:
    if spec.time_intercept is not None:
        return spec.time_intercept
    months = tuple(int(m) for m in np.unique(pt.t))
    return DesignSpec([TimeFactor(months=months, reference=months[0])])


def _prune_degenerate(pt: PersonTime, spec: MsmSpec):
    """Profile out likelihood-inert rows before fitting.

    With a saturated per-month intercept, an eventless month is explained
    exactly by that month's intercept running to -inf and contributes
    nothing to any shared coefficient, so its rows are dropped.  The same
    holds for a zero-event regimen under a factor effect: its indicator is
    unidentified and the regimen is flagged unstable instead of fitted.
    """
    keep = np.ones(len(pt), dtype=bool)
    unstable = []
    if not spec.is_linear():
        for r in pt.regimen_ids_present:
            sel = pt.regimen_id == r
            if r != spec.reference and float(np.sum(pt.y[sel])) == 0.0:
                unstable.append(int(r))
                keep &= ~sel
    if spec.time_intercept is None:
        event_months = set(np.unique(pt.t[(pt.y > 0) & keep]).tolist())
        keep &= np.isin(pt.t, sorted(event_months))
    if not keep.all():
        pt = PersonTime(
            y=pt.y[keep], t=pt.t[keep], regimen_id=pt.regimen_id[keep],
            subject_idx=pt.subject_idx[keep], weights=pt.weights[keep],
            data={k: v[keep] for k, v in pt.data.items()},
            regimen_ids_present=tuple(r for r in pt.regimen_ids_present if r not in unstable),
        )
    return pt, unstable


def fit_msm(pt: PersonTime, spec: MsmSpec) -> MsmFit:
    """Weighted pooled-logistic fit with subject-clustered sandwich SEs."""
    if len(pt) == 0:
        raise DataError("empty person-time table")
    if float(np.sum(pt.y)) == 0:
        raise DataError("person-time table has no events")
    pt, unstable = _prune_degenerate(pt, spec)
    x_eff, eff_names = _effect_columns(pt, spec)
    design_parts = [np.ones((len(pt), 1))]
    names = ["intercept"]
    tx, tnames = _time_intercept(pt, spec).build(pt.data)
    design_parts.append(tx)
    names.extend(tnames)
    if spec.baseline_terms.terms:
        bx, bnames = spec.baseline_terms.build(pt.data)
        design_parts.append(bx)
        names.extend(bnames)
    design_parts.append(x_eff)
    names.extend(eff_names)
    x = np.hstack(design_parts)
    fit = fit_logistic(x, pt.y, pt.weights, column_names=names)
    cluster_sandwich_covariance(fit, x, pt.y, pt.weights, pt.subject_idx)

    ev = {}
    for r in pt.regimen_ids_present:
        ev[r] = float(np.sum(pt.y[pt.regimen_id == r]))
    effect_columns = {name: names.index(name) for name in eff_names}
    return MsmFit(
        glm=fit, spec=spec, n_rows=len(pt), n_events=float(np.sum(pt.y)),
        effect_columns=effect_columns, events_per_regimen=ev,
        unstable_regimens=unstable,
    )


def _contrast(fit: MsmFit, comparison, month: int | None) -> np.ndarray:
    """Coefficient contrast for exp(c'beta) = requested hazard ratio."""
    spec = fit.spec
    p = len(fit.glm.coefficients)
    c = np.zeros(p)
    if month is not None and not spec.has_time_interaction():
        raise ConfigError("per-month hazard ratios need a log-time interaction form")
    logt = 0.0
    if spec.has_time_interaction():
        m = spec.start_t if month is None else month
        if m < spec.start_t:
            raise ConfigError(f"month {m} precedes the analysis start {spec.start_t}")
        logt = float(np.log(m - spec.start_t + 1.0))
    if spec.is_linear():
        units = float(comparison) if not isinstance(comparison, tuple) else 1.0
        c[fit.effect_columns["regimen_ordinal"]] = units
        if spec.has_time_interaction():
            c[fit.effect_columns["regimen_ordinal:logt"]] = units * logt
    else:
        if not isinstance(comparison, tuple) or len(comparison) != 2:
            raise ConfigError("factor forms compare a (regimen, regimen) pair")
        a, b = comparison
        for rid, sign in ((a, +1.0), (b, -1.0)):
            if rid == spec.reference:
                continue
            key = f"regimen[{rid}]"
            if key not in fit.effect_columns:
                raise ConfigError(f"regimen {rid} not in the fitted model")
            c[fit.effect_columns[key]] += sign
            if spec.has_time_interaction():
                c[fit.effect_columns[f"{key}:logt"]] += sign * logt
    return c


def hazard_ratio(fit: MsmFit, comparison, month: int | None = None):
    """Hazard ratio exp(c'beta) with a delta-method CI from the robust
    covariance.

    ``comparison``: (regimen, regimen) pair for factor forms, or a number
    of ordinal units for linear forms.
    """
    c = _contrast(fit, comparison, month)
    beta = fit.glm.coefficients
    cov = fit.glm.robust_covariance
    if cov is None:
        raise NumericalError("fit lacks a robust covariance; call fit_msm first")
    log_hr = float(c @ beta)
    se = float(np.sqrt(max(c @ cov @ c, 0.0)))
    return {
        "log_hr": log_hr,
        "se": se,
        "hr": float(np.exp(log_hr)),
        "ci_low": float(np.exp(log_hr - Z975 * se)),
        "ci_high": float(np.exp(log_hr + Z975 * se)),
    }


REPORT_COLUMNS = ("comparison", "month", "x", "log_hr", "se", "hr", "ci_low", "ci_high")


def msm_report(fit: MsmFit, grid: RegimenGrid, months=None, at_month: int | None = None):
    """Hazard-ratio report rows per the effect form.

    factor forms: one row per regimen vs the reference (the reference row
    carries HR exactly 1), evaluated at ``at_month`` for the log-time
    interaction form; x is that regimen's target midpoint.
    linear forms: a unit-increase row, per month for the interaction form.
    """
    spec = fit.spec
    rows = []
    if spec.is_linear():
        if spec.has_time_interaction():
            if months is None:
                raise ConfigError("linear_x_logtime report needs the month list")
            for m in months:
                hr = hazard_ratio(fit, 1.0, month=int(m))
                rows.append(("unit_increase", int(m), int(m),
                             hr["log_hr"], hr["se"], hr["hr"], hr["ci_low"], hr["ci_high"]))
        else:
            hr = hazard_ratio(fit, 1.0)
            rows.append(("unit_increase", "overall", "",
                         hr["log_hr"], hr["se"], hr["hr"], hr["ci_low"], hr["ci_high"]))
    else:
        month = at_month if spec.has_time_interaction() else None
        month_label = month if month is not None else "overall"
        ref = grid.by_id(spec.reference)
        for rspec in grid.specs:
            if rspec.id not in fit.events_per_regimen:
                continue
            label = f"{rspec.label} vs {ref.label}"
            if rspec.id == spec.reference:
                rows.append((label, month_label, rspec.midpoint, 0.0, 0.0, 1.0, 1.0, 1.0))
                continue
            hr = hazard_ratio(fit, (rspec.id, spec.reference), month=month)
            rows.append((label, month_label, rspec.midpoint,
                         hr["log_hr"], hr["se"], hr["hr"], hr["ci_low"], hr["ci_high"]))
    return rows
