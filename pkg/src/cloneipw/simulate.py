"""Replication study with known structural hazard ratios.

Design.  Each subject is native to one of K regimens laid out on a marker
grid whose adjacent target ranges share exactly one boundary value.
Survival is exponential with a native-regimen rate scaled by exp(eta * V)
for a standard-normal baseline covariate V.  The subject's marker/dose
series is constructed directly: the dose is held constant and the marker
sits at the native target midpoint, at a shared boundary while the
subject is coadherent to one adjacent regimen, and back at the midpoint
after that coadherence ends.  Running the resulting series through the
regimen engine therefore reproduces the intended adherence exactly.

Coadherence.  Clones start at a burn-in month (start_month - 1); the
first constrained transition (the entry screen) happens at start_month.
At the screen a subject pairs with at most one adjacent regimen (up or
down); afterwards the pair persists each month with a stay probability.
Selection bias enters as a logistic shift gamma * V on entry and stay
probabilities of flows INTO the biased regimens (index >= bias_from),
so contrasts among the lower regimens stay clean.

Calibration.  Rates are solved so that the post-cloning population
hazard ratios (the mass-weighted average of V-conditional continuous
hazard log-ratios, computed exactly by Gauss-Hermite quadrature) match
the configured targets for the interior comparisons.  The mechanism
cannot match the two edge regimens, whose neighbor windows are clipped;
their residuals are reported and they are excluded from comparisons.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit, logit

from .data import BaselineCovariates, Cohort, CohortArrays, CohortSchema, SubjectHistory, Visit
from .design import Bins, DesignSpec, Intercept, Numeric
from .errors import CalibrationError, ConfigError
from .glm import fit_logistic, predict_proba
from .logrank import PairedSurvival, logrank_test
from .msm import MsmSpec, PersonTime, build_person_time, fit_msm, hazard_ratio
from .regimen import RegimenGrid, clone_cohort, usrds_family
from .weights import (
    WeightModelSpec,
    attach_weights,
    combine_weights,
    compute_stabilized_weights,
    fit_adherence_models,
)

BIAS_GAMMA = {"none": 0.0, "moderate": 1.1, "severe": 2.2}
MARKER_SPACING = 6.0  # adjacent targets share one boundary point
FIRST_MIDPOINT = 33.0


@dataclass(frozen=True)
class SimConfig:
    """Scenario description for the replication study."""

    n_k: int = 2500
    k_regimens: int = 6
    target_hr: tuple = (0.84, 0.91, 1.0, 1.17, 1.28, 1.37)
    ref_regimen: int = 3
    comparisons: tuple = (2, 4, 5)
    rate_ref: float = 0.11            # monthly event rate of the reference regimen
    eta: float = 0.5                  # effect of V on the log rate
    pair_entry: float = 0.42          # P[pair with a given neighbor at the screen | V=0]
    pair_stay: float = 0.85           # monthly P[pair persists | V=0]
    bias_level: str = "none"
    bias_from: int = 4                # flows into regimens >= this index are tilted
    v_dist: str = "normal"
    start_month: int = 3              # first analyzed person-month
    horizon: int = 12                 # last analyzed person-month
    replications: int = 500
    seed: int = 20140801
    gh_nodes: int = 32

    def __post_init__(self):
        if len(self.target_hr) != self.k_regimens:
            raise ConfigError("target_hr must have one entry per regimen")
        if self.target_hr[self.ref_regimen - 1] != 1.0:
            raise ConfigError("target_hr at the reference regimen must be 1")
        if self.bias_level not in BIAS_GAMMA:
            raise ConfigError(f"bias_level must be one of {sorted(BIAS_GAMMA)}")
        if self.v_dist != "normal":
            raise ConfigError("only a standard-normal V is implemented")
        if not (0.0 <= self.pair_entry <= 0.5):
            raise ConfigError("pair_entry must lie in [0, 0.5]")
        if not (0.0 < self.start_month <= self.horizon):
            raise ConfigError("need 0 < start_month <= horizon")
        if self.n_k <= 0:
            raise ConfigError("n_k must be positive")

    @property
    def gamma(self) -> float:
        return BIAS_GAMMA[self.bias_level]

    @property
    def burn_in(self) -> int:
        return self.start_month - 1

    @property
    def n_visits(self) -> int:
        # Recorded visits 0..horizon+1 so the last analyzed month is certified.
        return self.horizon + 2

    def midpoints(self) -> np.ndarray:
        return FIRST_MIDPOINT + MARKER_SPACING * np.arange(self.k_regimens)

    def regimen_grid(self) -> RegimenGrid:
        mids = self.midpoints()
        specs = tuple(usrds_family(0.25, mids[k], id=k + 1) for k in range(self.k_regimens))
        return RegimenGrid(specs=specs, reference_id=self.ref_regimen)

    def coadherence_matrix(self, phase: str = "stay") -> np.ndarray:
        """Implied per-visit coadherence probabilities q[native][arm] at V=0."""
        if phase not in ("entry", "stay"):
            raise ConfigError("phase must be 'entry' or 'stay'")
        base = self.pair_entry if phase == "entry" else self.pair_stay
        k = self.k_regimens
        q = np.zeros((k, k))
        np.fill_diagonal(q, 1.0)
        for i in range(k - 1):
            q[i, i + 1] = base
            q[i + 1, i] = base
        return q


def desk_scale(**overrides) -> SimConfig:
    """Laptop-scale preset: n_k=500 subjects, 200 replications."""
    base = dict(n_k=500, replications=200)
    base.update(overrides)
    return SimConfig(**base)


def _side_probs(config: SimConfig, native: np.ndarray, v: np.ndarray, gamma: float):
    """Per-subject screen probabilities (P[pair up], P[pair down]).

    The entry probability is capped at 0.5 per side so the two marginals
    always coexist; a logistic tilt gamma*V applies only to flows whose
    TARGET regimen is in the biased set.
    """
    base_l = logit(min(self_cap(config.pair_entry) * 2.0, 1.0 - 1e-12))
    up_t = (native + 1) >= config.bias_from
    dn_t = (native - 1) >= config.bias_from
    pu = 0.5 * expit(base_l + gamma * v * up_t)
    pd = 0.5 * expit(base_l + gamma * v * dn_t)
    pu = np.where(native < config.k_regimens, pu, 0.0)
    pd = np.where(native > 1, pd, 0.0)
    return pu, pd


def self_cap(p: float) -> float:
    return min(max(p, 1e-9), 0.5 - 1e-9)


def _stay_probs(config: SimConfig, target: np.ndarray, v: np.ndarray, gamma: float):
    tilt = target >= config.bias_from
    return expit(logit(config.pair_stay) + gamma * v * tilt)


# ---------------------------------------------------------------------------
# Exact population computations (Gauss-Hermite over V)
# ---------------------------------------------------------------------------


def _gh_nodes(n: int):
    nodes, weights = np.polynomial.hermite_e.hermegauss(n)
    return nodes, weights / weights.sum()


@dataclass
class _Components:
    """Population at-risk masses per (native, arm, month, V-node)."""

    arm: np.ndarray          # component arm index (1-based), shape (C,)
    native: np.ndarray       # native regimen per component
    rate: np.ndarray         # (C, G) continuous rate per V-node
    mass: np.ndarray         # (C, G, T) at-risk mass by analysis month
    enter: np.ndarray        # (C, G) screen-pass probability
    stay: np.ndarray         # (C, G) monthly continuation probability
    months: np.ndarray
    v_nodes: np.ndarray
    v_weights: np.ndarray


def _population_components(rates: np.ndarray, config: SimConfig, gamma: float) -> _Components:
    k = config.k_regimens
    nodes, vw = _gh_nodes(config.gh_nodes)
    months = np.arange(config.start_month, config.horizon + 1)
    tm = months - config.start_month

    arm_l, nat_l, rate_l, mass_l, ent_l, stay_l = [], [], [], [], [], []
    for kt in range(1, k + 1):
        r = rates[kt - 1] * np.exp(config.eta * nodes)          # (G,)
        surv = np.exp(-np.outer(r, months))                     # (G, T)
        pu, pd = _side_probs(config, np.full(nodes.shape, kt), nodes, gamma)
        for arm, enter, tilt_target in (
            (kt, np.ones_like(nodes), kt),
            (kt + 1, pu, kt + 1),
            (kt - 1, pd, kt - 1),
        ):
            if arm < 1 or arm > k:
                continue
            if arm == kt:
                stay = np.ones_like(nodes)
            else:
                stay = _stay_probs(config, np.full(nodes.shape, tilt_target), nodes, gamma)
            persist = stay[:, None] ** tm[None, :]
            mass = config.n_k * vw[:, None] * surv * enter[:, None] * persist
            arm_l.append(arm)
            nat_l.append(kt)
            rate_l.append(r)
            mass_l.append(mass)
            ent_l.append(enter)
            stay_l.append(stay)
    return _Components(
        arm=np.array(arm_l), native=np.array(nat_l), rate=np.array(rate_l),
        mass=np.array(mass_l), enter=np.array(ent_l), stay=np.array(stay_l),
        months=months, v_nodes=nodes, v_weights=vw,
    )


def population_hazard_ratios(rates: np.ndarray, config: SimConfig,
                             gamma: float = 0.0) -> dict:
    """Post-cloning hazard ratios vs the reference regimen.

    For each arm the V-conditional continuous hazard at month t is the
    mass-weighted mean rate among at-risk clones; the summary ratio is the
    information-weighted average of the pairwise log hazard ratios over
    (month, V) cells, which collapses to the exact rate ratio whenever the
    arm compositions coincide.
    """
    comp = _population_components(rates, config, gamma)
    k = config.k_regimens
    g, t = comp.v_nodes.size, comp.months.size
    num = np.zeros((k, g, t))
    den = np.zeros((k, g, t))
    events = np.zeros((k, g, t))
    for c in range(comp.arm.size):
        a = comp.arm[c] - 1
        num[a] += comp.mass[c] * comp.rate[c][:, None]
        den[a] += comp.mass[c]
        events[a] += comp.mass[c] * (1.0 - np.exp(-comp.rate[c][:, None]))
    with np.errstate(invalid="ignore", divide="ignore"):
        log_h = np.where(den > 0, np.log(num / np.where(den > 0, den, 1.0)), np.nan)
    ref = config.ref_regimen - 1
    out = {}
    for kk in range(1, k + 1):
        if kk == config.ref_regimen:
            out[kk] = 1.0
            continue
        a = kk - 1
        w = events[a] * events[ref] / np.where(events[a] + events[ref] > 0,
                                               events[a] + events[ref], 1.0)
        diff = log_h[a] - log_h[ref]
        ok = np.isfinite(diff) & (w > 0)
        out[kk] = float(np.exp(np.sum(w[ok] * diff[ok]) / np.sum(w[ok])))
    return out


@dataclass
class CalibrationResult:
    rates: np.ndarray
    achieved: dict
    residuals: dict
    excluded: tuple
    tolerance: float

    def rate_of(self, regimen_id: int) -> float:
        return float(self.rates[regimen_id - 1])


def calibrate_rates(config: SimConfig, tolerance: float = 0.005) -> CalibrationResult:
    """Solve for native rates so post-cloning hazard ratios hit the targets.

    Interior comparisons are solved one rate at a time by bracketing root
    finding (the ratio for arm k is monotone in its own rate), iterated to
    joint convergence.  Edge regimens keep nominal rates target*rate_ref;
    their achieved ratios are reported as residuals but not constrained.
    """
    k = config.k_regimens
    targets = np.asarray(config.target_hr, dtype=float)
    rates = config.rate_ref * targets.copy()
    solve_ids = [kk for kk in config.comparisons if kk != config.ref_regimen]
    for kk in solve_ids:
        if kk in (1, k):
            raise ConfigError(f"comparison {kk} is an edge regimen; the mechanism cannot match it")

    for _ in range(12):
        for kk in solve_ids:
            target = targets[kk - 1]

            def f(rate_k, kk=kk, target=target):
                trial = rates.copy()
                trial[kk - 1] = rate_k
                return population_hazard_ratios(trial, config)[kk] - target

            lo = rates[kk - 1] * 0.5
            hi = rates[kk - 1] * 2.0
            flo, fhi = f(lo), f(hi)
            if flo * fhi > 0:
                raise CalibrationError(
                    f"no rate bracket for comparison {kk} vs {config.ref_regimen}"
                )
            rates[kk - 1] = brentq(f, lo, hi, xtol=1e-12, rtol=1e-12)
        achieved = population_hazard_ratios(rates, config)
        worst = max(abs(achieved[kk] / targets[kk - 1] - 1.0) for kk in solve_ids)
        if worst < 1e-7:
            break
    achieved = population_hazard_ratios(rates, config)
    residuals = {kk: achieved[kk] / targets[kk - 1] - 1.0 for kk in range(1, k + 1)
                 if kk != config.ref_regimen}
    excluded = tuple(kk for kk in range(1, k + 1)
                     if kk not in config.comparisons and kk != config.ref_regimen)
    bad = {kk: res for kk, res in residuals.items()
           if kk in solve_ids and abs(res) > tolerance}
    if bad:
        raise CalibrationError(f"calibration residuals exceed {tolerance}: {bad}")
    return CalibrationResult(rates=rates, achieved=achieved, residuals=residuals,
                             excluded=excluded, tolerance=tolerance)


# ---------------------------------------------------------------------------
# Subject generation
# ---------------------------------------------------------------------------


@dataclass
class Primitives:
    """All random draws for one replication, before realization.

    side: +1 pair-up, -1 pair-down, 0 none.  pair_end: first month the
    pair member is no longer coadherent (screen month if the screen
    failed; horizon+2 when the pair never fails on its own).
    """

    native: np.ndarray
    v: np.ndarray
    t_event: np.ndarray
    side: np.ndarray
    pair_end: np.ndarray
    age: np.ndarray
    sex: np.ndarray


def draw_primitives(rng: np.random.Generator, config: SimConfig,
                    n_override: int | None = None) -> Primitives:
    k = config.k_regimens
    n_k = config.n_k if n_override is None else n_override
    n = n_k * k
    native = np.repeat(np.arange(1, k + 1), n_k)
    v = rng.standard_normal(n)
    # Event times are drawn on the unit-rate scale and rescaled by the
    # calibrated rates at realization time.
    t_unit = rng.exponential(1.0, size=n)
    gamma = config.gamma
    pu, pd = _side_probs(config, native, v, gamma)
    u = rng.random(n)
    side = np.where(u < pu, 1, np.where(u < pu + pd, -1, 0))
    target = native + side
    stay_p = _stay_probs(config, target, v, gamma)
    n_stay_months = config.horizon - config.start_month + 1
    stays = rng.random((n, n_stay_months)) < stay_p[:, None]
    # pair_end = first month >= start_month+1 where the stay draw fails.
    fail = ~stays
    any_fail = fail.any(axis=1)
    first_fail = np.where(any_fail, fail.argmax(axis=1), n_stay_months)
    pair_end = np.where(side == 0, config.start_month, config.start_month + 1 + first_fail)
    pair_end = np.minimum(pair_end, config.horizon + 2)
    age = 50.0 + 12.0 * rng.standard_normal(n)
    sex = (rng.random(n) < 0.5).astype(int)
    return Primitives(native=native, v=v, t_event=t_unit, side=side,
                      pair_end=pair_end, age=np.clip(age, 18.0, 95.0), sex=sex)


def _event_times(prims: Primitives, rates: np.ndarray, config: SimConfig) -> np.ndarray:
    r = rates[prims.native - 1] * np.exp(config.eta * prims.v)
    return prims.t_event / r


def _marker_series(prims: Primitives, config: SimConfig, t_grid: np.ndarray) -> np.ndarray:
    """Marker value per (subject, month) realizing the intended adherence."""
    mids = config.midpoints()
    base = mids[prims.native - 1]
    boundary = base + prims.side * (MARKER_SPACING / 2.0)
    paired = (
        (prims.side[:, None] != 0)
        & (t_grid[None, :] >= config.start_month)
        & (t_grid[None, :] < prims.pair_end[:, None])
    )
    return np.where(paired, boundary[:, None], base[:, None])


def arrays_from_primitives(prims: Primitives, rates: np.ndarray,
                           config: SimConfig) -> CohortArrays:
    """Realize the columnar cohort for the fast replication path."""
    n = prims.native.size
    width = config.n_visits + 1          # visits 0..horizon+1
    t_grid = np.arange(width)
    t_event = _event_times(prims, rates, config)
    event_month = np.ceil(t_event).astype(int) - 1
    observed_end = np.minimum(event_month, width - 1)
    observed = t_grid[None, :] <= observed_end[:, None]
    marker = _marker_series(prims, config, t_grid)
    marker = np.where(observed, marker, np.nan)
    dose = np.where(observed, 1.0, np.nan)
    in_study = event_month <= width - 1
    ids = [f"s{i:06d}" for i in range(n)]
    baseline = {
        "sex": prims.sex.astype(float),
        "age": prims.age,
        "diabetes": np.zeros(n),
        "hypertension": np.zeros(n),
        "race": np.array(["white"] * n, dtype=object),
        "v": prims.v,
    }
    return CohortArrays(
        ids=ids,
        marker=marker,
        dose=dose,
        observed=observed,
        event_month=np.where(in_study, event_month, -1),
        event_time=np.where(in_study, t_event, np.nan),
        event_observed=in_study,
        last_followup=np.where(in_study, observed_end, width - 1),
        baseline=baseline,
        horizon=width - 1,
        schema=CohortSchema(extra_baseline=("v",)),
    )


def cohort_from_primitives(prims: Primitives, rates: np.ndarray,
                           config: SimConfig) -> Cohort:
    """Object-path realization (identical content to the array path)."""
    arrays = arrays_from_primitives(prims, rates, config)
    subjects = []
    for i in range(prims.native.size):
        visits = []
        for t in range(arrays.horizon + 1):
            if not arrays.observed[i, t]:
                break
            visits.append(Visit(t=t, marker=float(arrays.marker[i, t]),
                                dose=float(arrays.dose[i, t])))
        base = BaselineCovariates(
            sex=int(prims.sex[i]), age=float(prims.age[i]), race="white",
            diabetes=0, hypertension=0, extra={"v": float(prims.v[i])},
        )
        ev = bool(arrays.event_observed[i])
        subjects.append(SubjectHistory(
            id=arrays.ids[i], baseline=base, visits=visits,
            event_time=float(arrays.event_time[i]) if ev else None,
            event_observed=ev,
            last_followup=int(arrays.last_followup[i]),
        ))
    return Cohort(subjects=tuple(subjects), visit_horizon=arrays.horizon,
                  schema=CohortSchema(extra_baseline=("v",)))


def intended_adherence(prims: Primitives, rates: np.ndarray, config: SimConfig,
                       i: int) -> dict:
    """Intended adherence indicators A_k(t) for subject i, per regimen.

    Defined over the subject's recorded visits from the burn-in month on;
    the native regimen is adherent throughout, the paired neighbor through
    pair_end - 1, everything else only at the burn-in month.
    """
    t_event = _event_times(prims, rates, config)[i]
    last = int(min(np.ceil(t_event) - 1, config.n_visits))
    out = {}
    for kk in range(1, config.k_regimens + 1):
        trace = {}
        for t in range(config.burn_in, last + 1):
            if kk == prims.native[i]:
                trace[t] = 1
            elif prims.side[i] != 0 and kk == prims.native[i] + prims.side[i]:
                trace[t] = 1 if t < prims.pair_end[i] else 0
            else:
                trace[t] = 1 if t <= config.burn_in else 0
        out[kk] = trace
    return out


def generate_subject(rng: np.random.Generator, native_k: int, rates: np.ndarray,
                     config: SimConfig):
    """Draw one subject; returns (SubjectHistory, intended adherence dict)."""
    single = replace(config, n_k=1)
    prims = draw_primitives(rng, single, n_override=1)
    prims.native[:] = native_k
    cohort = cohort_from_primitives(prims, rates, single)
    return cohort.subjects[0], intended_adherence(prims, rates, single, 0)


def simulate_coadherence(rng: np.random.Generator, native_k: int, v: float,
                         config: SimConfig) -> dict:
    """Coadherence draws for the non-native regimens of one subject.

    Returns {regimen: (entered, end_month)} where entered marks passing
    the entry screen and end_month is the first nonadherent month.
    """
    gamma = config.gamma
    native = np.array([native_k])
    vv = np.array([v])
    pu, pd = _side_probs(config, native, vv, gamma)
    u = rng.random()
    side = 1 if u < pu[0] else (-1 if u < pu[0] + pd[0] else 0)
    out = {}
    for kk in range(1, config.k_regimens + 1):
        if kk == native_k:
            continue
        if side != 0 and kk == native_k + side:
            stay = _stay_probs(config, np.array([kk]), vv, gamma)[0]
            end = config.start_month + 1
            while end <= config.horizon + 1 and rng.random() < stay:
                end += 1
            out[kk] = (True, end)
        else:
            out[kk] = (False, config.start_month)
    return out


# ---------------------------------------------------------------------------
# Replication analyses
# ---------------------------------------------------------------------------


def _sim_weight_spec() -> WeightModelSpec:
    """Adherence weight model used in the study: an entry-screen indicator,
    a linear month term, and V in the denominator."""
    time_terms = [Intercept(), Bins("t", ((2.5, 3.5),)), Numeric("t")]
    return WeightModelSpec(
        numerator=DesignSpec(list(time_terms)),
        denominator=DesignSpec(list(time_terms) + [Numeric("v")]),
        stratify_by_regimen=True,
    )


def _msm_spec(config: SimConfig) -> MsmSpec:
    return MsmSpec(effect_form="factor", reference=config.ref_regimen,
                   start_t=config.start_month)


def _complete_person_time(prims: Primitives, rates: np.ndarray,
                          config: SimConfig) -> PersonTime:
    """Native-regimen person-months under full adherence (no clones)."""
    t_event = _event_times(prims, rates, config)
    event_month = np.ceil(t_event).astype(int) - 1
    start = config.start_month
    last = np.minimum(event_month, config.horizon)
    n_rows = np.maximum(last - start + 1, 0)
    keep = n_rows > 0
    subj = np.repeat(np.nonzero(keep)[0], n_rows[keep])
    offsets = np.concatenate(([0], np.cumsum(n_rows[keep])[:-1]))
    t = start + (np.arange(n_rows[keep].sum()) - np.repeat(offsets, n_rows[keep]))
    y = (t == event_month[subj]).astype(float)
    return PersonTime(
        y=y, t=t.astype(int), regimen_id=prims.native[subj],
        subject_idx=subj, weights=np.ones_like(y),
        data={"t": t.astype(float), "v": prims.v[subj]},
        regimen_ids_present=tuple(range(1, config.k_regimens + 1)),
    )


def run_replication(rep_index: int, config: SimConfig, rates: np.ndarray) -> list:
    """One replication: complete-data, unweighted, and weighted analyses.

    Returns rows (replication, comparison, analysis, log_hr, se, hr,
    ci_low, ci_high).  Deterministic given (config.seed, rep_index).
    """
    seq = np.random.SeedSequence(entropy=config.seed, spawn_key=(rep_index,))
    rng = np.random.default_rng(seq)
    prims = draw_primitives(rng, config)
    arrays = arrays_from_primitives(prims, rates, config)
    grid = config.regimen_grid()
    clones = clone_cohort(arrays, grid, start_t=config.burn_in, horizon=config.horizon)

    spec = _msm_spec(config)
    rows = []

    def collect(fit, analysis):
        for kk in config.comparisons:
            hr = hazard_ratio(fit, (kk, config.ref_regimen))
            rows.append((rep_index, kk, analysis, hr["log_hr"], hr["se"],
                         hr["hr"], hr["ci_low"], hr["ci_high"]))

    collect(fit_msm(_complete_person_time(prims, rates, config), spec), "complete")

    pt = build_person_time(clones, use_weights=False, min_month=config.start_month)
    collect(fit_msm(pt, spec), "unweighted")

    wspec = _sim_weight_spec()
    fits = fit_adherence_models(clones, wspec)
    wt = compute_stabilized_weights(clones, fits, wspec)
    w_total, _ = combine_weights([wt])
    attach_weights(clones, [wt], w_total)
    ptw = build_person_time(clones, use_weights=True, min_month=config.start_month)
    collect(fit_msm(ptw, spec), "weighted")
    return rows


REPLICATE_COLUMNS = ("replication", "comparison", "analysis", "log_hr", "se",
                     "hr", "ci_low", "ci_high")
SUMMARY_COLUMNS = ("comparison", "analysis", "true_hr", "median_hr", "ese",
                   "ase", "ecp", "n_reps")


def summarize(replicates: list, truth: dict) -> list:
    """Per (comparison, analysis): median HR, empirical SE of the HR
    estimates, average delta-method SE on the HR scale, and empirical 95%
    coverage of the true (calibrated post-cloning) hazard ratio."""
    if len(replicates) < 2:
        raise ConfigError("summaries need at least two replicates")
    rows = []
    keys = sorted({(r[1], r[2]) for r in replicates}, key=lambda x: (str(x[1]), x[0]))
    for kk, analysis in keys:
        sel = [r for r in replicates if r[1] == kk and r[2] == analysis]
        hr = np.array([r[5] for r in sel])
        se_hr = np.array([r[4] * r[5] for r in sel])
        true = truth[kk]
        cover = np.array([(r[6] <= true <= r[7]) for r in sel])
        rows.append((kk, analysis, true, float(np.median(hr)),
                     float(np.std(hr, ddof=1)), float(np.mean(se_hr)),
                     float(100.0 * np.mean(cover)), len(sel)))
    return rows


def run_study(config: SimConfig, threads: int = 1, calibration: CalibrationResult | None = None):
    """Calibrate, replicate, and summarize one scenario.

    Returns (calibration, replicate rows, summary rows).  Replications use
    per-index substreams and are merged in index order, so threaded and
    serial runs produce identical output.
    """
    calib = calibration or calibrate_rates(config)
    reps = range(config.replications)
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            chunks = pool.map(_run_replication_star,
                              [(i, config, calib.rates) for i in reps], chunksize=8)
            results = list(chunks)
    else:
        results = [run_replication(i, config, calib.rates) for i in reps]
    replicates = [row for chunk in results for row in chunk]
    truth = {kk: config.target_hr[kk - 1] for kk in config.comparisons}
    return calib, replicates, summarize(replicates, truth)


def _run_replication_star(args):
    return run_replication(*args)


# ---------------------------------------------------------------------------
# Expected-data model limits (design verification)
# ---------------------------------------------------------------------------


def expected_msm_estimates(rates: np.ndarray, config: SimConfig, gamma: float,
                           analysis: str) -> dict:
    """Infinite-data limit of the factor MSM under the three analyses.

    Fits the same pooled-logistic design to the exact population masses
    (fractional responses); 'weighted' first fits the study weight models
    to the population transition records and applies the implied
    stabilized weights.
    """
    comp = _population_components(rates, config, gamma)
    months = comp.months
    if analysis == "complete":
        keep = comp.arm == comp.native
    elif analysis in ("unweighted", "weighted"):
        keep = np.ones(comp.arm.size, dtype=bool)
    else:
        raise ConfigError("analysis must be complete/unweighted/weighted")
    mass = comp.mass[keep].copy()
    if analysis == "weighted":
        mass = mass * _expected_weights(comp, config)[keep]
    arm = comp.arm[keep]
    rate = comp.rate[keep]

    c_idx, g_idx, t_idx = np.broadcast_arrays(
        np.arange(arm.size)[:, None, None],
        np.arange(comp.v_nodes.size)[None, :, None],
        np.arange(months.size)[None, None, :],
    )
    w = mass.ravel()
    y = (1.0 - np.exp(-rate[c_idx.ravel(), g_idx.ravel()]))
    t = months[t_idx.ravel()].astype(float)
    arm_r = arm[c_idx.ravel()]

    cols = [np.ones_like(w)]
    names = ["intercept"]
    for m in months[1:]:
        cols.append((t == m).astype(float))
        names.append(f"t[{m}]")
    arm_cols = {}
    for kk in range(1, config.k_regimens + 1):
        if kk == config.ref_regimen:
            continue
        cols.append((arm_r == kk).astype(float))
        names.append(f"regimen[{kk}]")
        arm_cols[kk] = len(cols) - 1
    x = np.column_stack(cols)
    ok = w > 1e-300
    fit = fit_logistic(x[ok], y[ok], w[ok], column_names=names)
    return {kk: float(np.exp(fit.coefficients[j])) for kk, j in arm_cols.items()}


def _expected_weights(comp: _Components, config: SimConfig) -> np.ndarray:
    """Stabilized-weight limit per (component, V-node, month).

    Fits the study's numerator/denominator models per arm to the exact
    transition-record masses; the weight is a cumulative ratio product,
    shared by every component of the same (arm, V) cell.
    """
    months = comp.months
    tm = months - config.start_month
    g = comp.v_nodes.size
    wspec = _sim_weight_spec()
    sw = np.ones_like(comp.mass)
    for arm in range(1, config.k_regimens + 1):
        sel = np.nonzero(comp.arm == arm)[0]
        if sel.size == 0:
            continue
        rec_mass, rec_resp, rec_t, rec_v = [], [], [], []
        for c in sel:
            # At-risk-for-transition mass at month s: survivors to s that
            # were uncensored through s-1.
            surv = np.exp(-np.outer(comp.rate[c], months))
            persist_prev = comp.stay[c][:, None] ** np.maximum(tm - 1, 0)[None, :]
            enter_prev = np.where(tm[None, :] == 0, 1.0, comp.enter[c][:, None])
            at_risk = config.n_k * comp.v_weights[:, None] * surv * enter_prev * persist_prev
            resp = np.where(tm[None, :] == 0, comp.enter[c][:, None],
                            comp.stay[c][:, None] * np.ones_like(at_risk))
            rec_mass.append(at_risk)
            rec_resp.append(resp)
            rec_t.append(np.broadcast_to(months.astype(float), at_risk.shape))
            rec_v.append(np.broadcast_to(comp.v_nodes[:, None], at_risk.shape))
        data = {
            "t": np.concatenate([r.ravel() for r in rec_t]),
            "v": np.concatenate([r.ravel() for r in rec_v]),
        }
        m_all = np.concatenate([r.ravel() for r in rec_mass])
        y_all = np.concatenate([r.ravel() for r in rec_resp])
        xn, _ = wspec.numerator.build(data)
        xd, _ = wspec.denominator.build(data)
        ok = m_all > 1e-300
        fit_n = fit_logistic(xn[ok], y_all[ok], m_all[ok])
        fit_d = fit_logistic(xd[ok], y_all[ok], m_all[ok])
        # Ratio path per (V-node, month), shared across components.
        grid_data = {
            "t": np.broadcast_to(months.astype(float), (g, months.size)).ravel(),
            "v": np.broadcast_to(comp.v_nodes[:, None], (g, months.size)).ravel(),
        }
        gn, _ = wspec.numerator.build(grid_data)
        gd, _ = wspec.denominator.build(grid_data)
        ratio = (predict_proba(fit_n, gn) / predict_proba(fit_d, gd)).reshape(g, months.size)
        cum = np.cumprod(ratio, axis=1)
        for c in sel:
            sw[c] = cum
    return sw


# ---------------------------------------------------------------------------
# Log-rank null calibration study
# ---------------------------------------------------------------------------


def logrank_null_study(n_pairs: int = 500, replications: int = 2000,
                       rate: float = 0.1, horizon: int = 24,
                       seed: int = 7, alpha: float = 0.05) -> dict:
    """Type-I error of the paired test under a shared exponential hazard.

    Arms are made independent by immediate cross-censoring: each pair has
    one live member (alternating arms) and one member censored before any
    person-time.  Returns the empirical rejection rate and replication
    count.
    """
    rejections = 0
    used = 0
    grid = np.arange(0, horizon + 1)
    for rep in range(replications):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(rep,)))
        t_cont = rng.exponential(1.0 / rate, size=n_pairs)
        month = np.ceil(t_cont).astype(int) - 1
        event = month <= horizon
        x_live = np.where(event, month, horizon)
        arm = np.arange(n_pairs) % 2
        x = np.full((n_pairs, 2), -1, dtype=int)
        d = np.zeros((n_pairs, 2), dtype=int)
        x[np.arange(n_pairs), arm] = x_live
        d[np.arange(n_pairs), arm] = event.astype(int)
        ps = PairedSurvival(x=x, delta=d, grid=grid)
        res = logrank_test(ps)
        used += 1
        if not res.degenerate and res.p_value < alpha:
            rejections += 1
    return {"rejection_rate": rejections / used, "replications": used,
            "alpha": alpha}
