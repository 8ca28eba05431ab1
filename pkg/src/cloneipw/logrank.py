"""IPW weighted log-rank test for paired (cloned) survival data.

Both arms of each pair come from the same subject, so the variance of the
rank statistic must absorb the within-pair dependence.  The statistic is
the weighted observed-minus-expected death sum over the discrete visit
grid, scaled by 1/sqrt(n); its variance is estimated from per-subject
influence contributions differenced within pairs.

Conventions: a clone with observed time X is at risk at every grid time
t <= X (so a subject is at risk at its own event time), and its event
weight is the weight path evaluated at X.  Times where either arm has no
weighted at-risk mass contribute nothing; tau is the last time where both
arms are represented.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .errors import DataError, DegenerateVarianceError, NumericalError
from .regimen import CloneTable


@dataclass
class PairedSurvival:
    """Observed times, event flags, and weight paths per (pair, arm).

    ``x`` and ``delta`` are (n, 2); ``weights`` is (n, 2, len(grid)) with
    the weight path defined (positive) for grid times <= x.  An arm with
    no at-risk time at all is encoded by x < grid[0].
    """

    x: np.ndarray
    delta: np.ndarray
    grid: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=int)
        self.delta = np.asarray(self.delta, dtype=int)
        self.grid = np.asarray(self.grid, dtype=int)
        if self.x.ndim != 2 or self.x.shape[1] != 2:
            raise DataError("x must be an (n, 2) array")
        if self.delta.shape != self.x.shape:
            raise DataError("delta must match x")
        if self.weights is None:
            self.weights = np.ones((self.x.shape[0], 2, self.grid.size))
        else:
            self.weights = np.asarray(self.weights, dtype=float)
            if self.weights.shape != (self.x.shape[0], 2, self.grid.size):
                raise DataError("weights must have shape (n, 2, len(grid))")
        both = (self.delta[:, 0] == 1) & (self.delta[:, 1] == 1)
        if np.any(self.x[both, 0] != self.x[both, 1]):
            raise DataError("clone pairs with two events must share the event time")

    @property
    def n(self) -> int:
        return self.x.shape[0]

    def at_risk_mask(self) -> np.ndarray:
        """(n, 2, T) indicator of being at risk at each grid time."""
        return self.x[:, :, None] >= self.grid[None, None, :]


@dataclass
class LogRankResult:
    wstar: float
    sigma2_hat: float
    z: float
    p_value: float
    tau: int
    degenerate: bool = False


def _weighted_arrays(data: PairedSurvival):
    """Per-(pair, arm, time) weighted at-risk and death-increment arrays."""
    risk = data.at_risk_mask()
    y_ikt = data.weights * risk
    event_at = (data.x[:, :, None] == data.grid[None, None, :]) & (data.delta[:, :, None] == 1)
    d_ikt = data.weights * event_at
    return y_ikt, d_ikt


def weighted_processes(data: PairedSurvival, k: int):
    """Weighted at-risk and death processes (Y_k^w(t), d_k^w(t)) on the grid."""
    if k not in (1, 2):
        raise DataError("arm index k must be 1 or 2")
    y_ikt, d_ikt = _weighted_arrays(data)
    return y_ikt[:, k - 1, :].sum(axis=0), d_ikt[:, k - 1, :].sum(axis=0)


def weighted_nelson(data: PairedSurvival, k: int):
    """Weighted cumulative-hazard path; increments at times with zero
    weighted at-risk mass are excluded and reported.

    Returns (grid, cumhaz, excluded_times).
    """
    y, d = weighted_processes(data, k)
    inc = np.zeros_like(y)
    ok = y > 0
    inc[ok] = d[ok] / y[ok]
    excluded = data.grid[(~ok) & (d > 0)]
    return data.grid.copy(), np.cumsum(inc), excluded.tolist()


def _support(data: PairedSurvival):
    y1, d1 = weighted_processes(data, 1)
    y2, d2 = weighted_processes(data, 2)
    both = (y1 > 0) & (y2 > 0)
    if not both.any():
        raise NumericalError("arms share no at-risk support; tau undefined")
    tau_idx = int(np.nonzero(both)[0].max())
    return y1, d1, y2, d2, both, tau_idx


def wstar(data: PairedSurvival) -> float:
    """Weighted O-E statistic scaled by 1/sqrt(n), summed through tau."""
    y1, d1, y2, d2, both, _ = _support(data)
    if (d1.sum() + d2.sum()) == 0:
        raise NumericalError("no events; rank statistic undefined")
    tot = np.where(both, y1 + y2, 1.0)
    contrib = np.where(both, d1 - y1 * (d1 + d2) / tot, 0.0)
    return float(contrib.sum() / np.sqrt(data.n))


def variance_estimate(data: PairedSurvival) -> float:
    """Paired influence-contribution variance for the rank statistic.

    e_ik = sum_t H(t) / (Y_k^w(t)/n) [dN_ik^w(t) - Y_ik^w(t) dLambda_k^w(t)]
    with the sum over the shared-support times; sigma2 = mean of the squared
    within-pair differences.
    """
    if data.n < 2:
        raise NumericalError("variance estimate requires at least 2 pairs")
    y1, d1, y2, d2, both, _ = _support(data)
    y_ikt, d_ikt = _weighted_arrays(data)
    tot = np.where(both, y1 + y2, np.inf)
    # H/(Y_k/n) reduces to Y_other / (Y_1 + Y_2).
    f1 = np.where(both, y2 / tot, 0.0)
    f2 = np.where(both, y1 / tot, 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        dlam1 = np.where(y1 > 0, d1 / np.where(y1 > 0, y1, 1.0), 0.0)
        dlam2 = np.where(y2 > 0, d2 / np.where(y2 > 0, y2, 1.0), 0.0)
    e1 = ((d_ikt[:, 0, :] - y_ikt[:, 0, :] * dlam1[None, :]) * f1[None, :]).sum(axis=1)
    e2 = ((d_ikt[:, 1, :] - y_ikt[:, 1, :] * dlam2[None, :]) * f2[None, :]).sum(axis=1)
    return float(np.mean((e1 - e2) ** 2))


def logrank_test(data: PairedSurvival) -> LogRankResult:
    """Two-sided test of equal cumulative hazards under the two regimens."""
    w = wstar(data)
    s2 = variance_estimate(data)
    _, _, _, _, _, tau_idx = _support(data)
    tau = int(data.grid[tau_idx])
    if s2 <= 0.0:
        if abs(w) < 1e-12:
            return LogRankResult(wstar=w, sigma2_hat=0.0, z=0.0, p_value=1.0,
                                 tau=tau, degenerate=True)
        raise DegenerateVarianceError(
            f"variance estimate is zero but W* = {w:.6g}"
        )
    z = w / np.sqrt(s2)
    p = 2.0 * float(norm.sf(abs(z)))
    return LogRankResult(wstar=w, sigma2_hat=s2, z=float(z), p_value=p, tau=tau)


def paired_from_clones(clones: CloneTable, rid_1: int, rid_2: int,
                       min_month: int | None = None) -> PairedSurvival:
    """Assemble paired survival data for two regimens from a clone table.

    Uses the at-risk person-time rows (weighted by w_total when present;
    unit weights otherwise).  A subject lacking any person-time under one
    regimen enters with that arm immediately censored.
    """
    c = clones.cols
    lo = clones.start_t if min_month is None else min_month
    weights_col = c.get("w_total")
    at_risk = (c["censored"] == 0) & (c["t"] >= lo)
    sel = at_risk & np.isin(c["regimen_id"], [rid_1, rid_2])
    if not sel.any():
        raise DataError("no person-time rows for the requested regimen pair")
    subj = c["subject_idx"][sel]
    arm = (c["regimen_id"][sel] == rid_2).astype(int)
    t = c["t"][sel]
    ev = c["event"][sel]
    w = weights_col[sel] if weights_col is not None else np.ones(sel.sum())

    subjects = np.unique(subj)
    pos = {s: i for i, s in enumerate(subjects)}
    n = subjects.size
    hi = int(t.max())
    grid = np.arange(lo, hi + 1)
    x = np.full((n, 2), lo - 1, dtype=int)
    delta = np.zeros((n, 2), dtype=int)
    wpath = np.zeros((n, 2, grid.size))
    del pos
    rows_i = np.searchsorted(subjects, subj)
    np.maximum.at(x, (rows_i, arm), t)
    np.maximum.at(delta, (rows_i, arm), ev)
    wpath[rows_i, arm, t - lo] = w
    return PairedSurvival(x=x, delta=delta, grid=grid, weights=wpath)
