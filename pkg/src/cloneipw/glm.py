"""Weighted logistic regression by IRLS with cluster-robust covariance.

This is the numerical core used both for censoring-weight models and for
pooled-logistic survival model fits.  The solver works on the square-root
weighted design via a pivoted QR decomposition (never forming normal
equations), halves steps when the deviance worsens, and reports a model
based covariance from the weighted information plus an optional
working-independence sandwich covariance.

Responses may be fractional (grouped binomial proportions with the group
size folded into ``prior_weights``); the Bernoulli IRLS updates are
unchanged.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import NumericalError, RankDeficiencyError, SeparationError

# Fitted probabilities are clipped away from {0, 1} for numerical safety.
_MU_EPS = 1e-10
_SEPARATION_COEF = 15.0


@dataclass
class FittedGlm:
    """Result of a weighted logistic fit."""

    coefficients: np.ndarray
    model_covariance: np.ndarray
    converged: bool
    iterations: int
    deviance: float
    column_names: list[str] = field(default_factory=list)
    robust_covariance: np.ndarray | None = None
    ridge_rescued: bool = False

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.model_covariance))

    def robust_se(self) -> np.ndarray:
        if self.robust_covariance is None:
            raise NumericalError("robust covariance has not been computed")
        return np.sqrt(np.diag(self.robust_covariance))


def _check_separation(x, y, mu, beta, names):
    """Raise when a runaway coefficient pins its support to fitted 0/1.

    A coefficient past ±15 whose supporting rows all have fitted
    probabilities indistinguishable from the observed 0/1 responses marks
    a perfectly separating column.
    """
    big = np.nonzero(np.abs(beta) > _SEPARATION_COEF)[0]
    if big.size == 0:
        return
    runaway = []
    for j in big:
        support = np.abs(x[:, j]) > 0
        if not support.any():
            continue
        pinned = np.minimum(mu[support], 1.0 - mu[support]) < 1e-6
        agree = np.abs(y[support] - mu[support]) < 1e-6
        if np.all(pinned & agree):
            runaway.append(names[j])
    if runaway:
        raise SeparationError(runaway)


def _deviance(y, mu, w):
    # Fractional-response-safe binomial deviance (up to a constant in y).
    mu = np.clip(mu, _MU_EPS, 1.0 - _MU_EPS)
    return -2.0 * float(np.sum(w * (y * np.log(mu) + (1.0 - y) * np.log(1.0 - mu))))


def _solve_wls(x, z, w, column_names, ridge: float = 0.0):
    """Solve the weighted least squares step via pivoted QR.

    Returns (beta, r_matrix, pivot) where r_matrix/pivot describe the
    decomposition of sqrt(w)·x for covariance computation.
    """
    sw = np.sqrt(w)
    xw = x * sw[:, None]
    zw = z * sw
    if ridge > 0.0:
        scale = np.sqrt(ridge) * np.linalg.norm(xw, axis=0)
        xw = np.vstack([xw, np.diag(scale)])
        zw = np.concatenate([zw, np.zeros(x.shape[1])])
    q, r, piv = scipy.linalg.qr(xw, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    tol = 1e-10 * (diag.max() if diag.size else 0.0)
    rank = int(np.sum(diag > tol))
    if rank < x.shape[1]:
        bad = [column_names[j] for j in piv[rank:]]
        raise RankDeficiencyError(bad)
    beta_piv = scipy.linalg.solve_triangular(r, q.T @ zw)
    beta = np.empty_like(beta_piv)
    beta[piv] = beta_piv
    return beta, r, piv


def _information_inverse(r, piv):
    """(XᵀWX)⁻¹ from the pivoted R factor of sqrt(W)X."""
    rinv = scipy.linalg.solve_triangular(r, np.eye(r.shape[0]))
    cov_piv = rinv @ rinv.T
    cov = np.empty_like(cov_piv)
    cov[np.ix_(piv, piv)] = cov_piv
    return cov


def fit_logistic(
    design: np.ndarray,
    response: np.ndarray,
    prior_weights: np.ndarray | None = None,
    *,
    column_names: list[str] | None = None,
    max_iter: int = 50,
    coef_tol: float = 1e-8,
    deviance_tol: float = 1e-10,
    ridge_rescue: bool = False,
) -> FittedGlm:
    """Maximize the weight-multiplied Bernoulli log-likelihood by IRLS.

    Convergence is declared when the largest absolute coefficient change
    falls below ``coef_tol`` or the relative deviance change falls below
    ``deviance_tol``.  Raises :class:`SeparationError` when a coefficient
    runs away past ±15 without the step shrinking, and
    :class:`RankDeficiencyError` on singular designs (unless
    ``ridge_rescue`` is set, in which case a tiny ridge is applied and the
    fit is flagged).
    """
    x = np.asarray(design, dtype=float)
    if x.ndim != 2:
        raise NumericalError("design must be a 2-d array")
    y = np.asarray(response, dtype=float)
    n, p = x.shape
    if y.shape != (n,):
        raise NumericalError("response length does not match design rows")
    if prior_weights is None:
        w = np.ones(n)
    else:
        w = np.asarray(prior_weights, dtype=float)
        if w.shape != (n,):
            raise NumericalError("prior_weights length does not match design rows")
        if np.any(w <= 0):
            raise NumericalError("prior_weights must be positive")
    if np.any((y < 0) | (y > 1)):
        raise NumericalError("response values must lie in [0, 1]")
    names = list(column_names) if column_names is not None else [f"x{j}" for j in range(p)]
    if len(names) != p:
        raise NumericalError("column_names length does not match design columns")

    beta = np.zeros(p)
    mu = np.full(n, np.clip(np.average(y, weights=w), 0.01, 0.99))
    dev = _deviance(y, mu, w)
    eta = np.log(mu / (1.0 - mu))
    converged = False
    ridge_used = False
    iteration = 0
    prev_step = None

    for iteration in range(1, max_iter + 1):
        mu = np.clip(mu, _MU_EPS, 1.0 - _MU_EPS)
        variance = mu * (1.0 - mu)
        z = eta + (y - mu) / variance
        wk = w * variance
        try:
            beta_new, r, piv = _solve_wls(x, z, wk, names)
        except RankDeficiencyError:
            if not ridge_rescue:
                raise
            beta_new, r, piv = _solve_wls(x, z, wk, names, ridge=1e-8)
            ridge_used = True

        step = beta_new - beta
        # Step-halving: retreat while the deviance got worse.
        for _ in range(10):
            eta_new = x @ beta_new
            mu_new = 1.0 / (1.0 + np.exp(-eta_new))
            dev_new = _deviance(y, mu_new, w)
            if dev_new <= dev + 1e-12 * abs(dev):
                break
            beta_new = beta + (beta_new - beta) / 2.0
        else:
            eta_new = x @ beta_new
            mu_new = 1.0 / (1.0 + np.exp(-eta_new))
            dev_new = _deviance(y, mu_new, w)

        step = beta_new - beta
        max_step = float(np.max(np.abs(step))) if p else 0.0
        rel_dev = abs(dev - dev_new) / (abs(dev_new) + 1e-300)
        beta, eta, mu, dev = beta_new, eta_new, mu_new, dev_new
        prev_step = max_step
        if max_step < coef_tol or rel_dev < deviance_tol:
            converged = True
            break
        if np.max(np.abs(beta)) > 2 * _SEPARATION_COEF:
            break  # runaway coefficients; the post-fit check classifies them

    _check_separation(x, y, mu, beta, names)

    if not converged:
        warnings.warn(
            f"IRLS did not converge in {max_iter} iterations "
            f"(last max coefficient change {prev_step:.3e})",
            stacklevel=2,
        )

    mu = np.clip(mu, _MU_EPS, 1.0 - _MU_EPS)
    wk = w * mu * (1.0 - mu)
    try:
        _, r, piv = _solve_wls(x, eta, wk, names, ridge=1e-8 if ridge_used else 0.0)
    except RankDeficiencyError:
        if not ridge_rescue:
            raise
        _, r, piv = _solve_wls(x, eta, wk, names, ridge=1e-8)
        ridge_used = True
    cov = _information_inverse(r, piv)
    cov = (cov + cov.T) / 2.0
    if ridge_used:
        warnings.warn("singular information; ridge rescue (scale 1e-8) applied", stacklevel=2)
    return FittedGlm(
        coefficients=beta,
        model_covariance=cov,
        converged=converged,
        iterations=iteration,
        deviance=dev,
        column_names=names,
        ridge_rescued=ridge_used,
    )


def predict_proba(fit: FittedGlm, design: np.ndarray) -> np.ndarray:
    eta = np.asarray(design, dtype=float) @ fit.coefficients
    return 1.0 / (1.0 + np.exp(-eta))


def score_vector(fit: FittedGlm, design, response, prior_weights=None) -> np.ndarray:
    """Gradient of the weighted log-likelihood at the fitted coefficients."""
    x = np.asarray(design, dtype=float)
    y = np.asarray(response, dtype=float)
    w = np.ones(len(y)) if prior_weights is None else np.asarray(prior_weights, dtype=float)
    mu = predict_proba(fit, x)
    return x.T @ (w * (y - mu))


def cluster_sandwich_covariance(
    fit: FittedGlm,
    design: np.ndarray,
    response: np.ndarray,
    prior_weights: np.ndarray | None,
    cluster_ids: np.ndarray,
) -> np.ndarray:
    """Working-independence sandwich covariance with scores summed by cluster.

    bread = model covariance (inverse weighted information); meat = sum of
    outer products of within-cluster score sums.  The result is stored on
    the fit and returned.
    """
    if not fit.converged:
        warnings.warn("sandwich covariance computed on a non-converged fit", stacklevel=2)
    x = np.asarray(design, dtype=float)
    y = np.asarray(response, dtype=float)
    n = x.shape[0]
    w = np.ones(n) if prior_weights is None else np.asarray(prior_weights, dtype=float)
    ids = np.asarray(cluster_ids)
    if ids.shape != (n,):
        raise NumericalError("cluster_ids length does not match design rows")
    uniq, inverse = np.unique(ids, return_inverse=True)
    if uniq.size < 2:
        raise NumericalError("sandwich covariance requires at least two clusters")
    mu = predict_proba(fit, x)
    scores = x * (w * (y - mu))[:, None]
    cluster_scores = np.zeros((uniq.size, x.shape[1]))
    np.add.at(cluster_scores, inverse, scores)
    meat = cluster_scores.T @ cluster_scores
    bread = fit.model_covariance
    cov = bread @ meat @ bread
    cov = (cov + cov.T) / 2.0
    fit.robust_covariance = cov
    return cov


def spline_basis(t, knots) -> np.ndarray:
    """Natural (restricted) cubic spline basis values.

    With knots k_1 < ... < k_m the basis is {t, c_1, ..., c_{m-2}} where
    c_j(t) = d_j(t) - d_{m-1}(t) and
    d_j(t) = [(t-k_j)+^3 - (t-k_m)+^3] / (k_m - k_j).
    The curve is linear beyond the boundary knots and the dimension is
    (number of interior knots) + 1.  Two knots give the pure linear basis.
    """
    knots = np.asarray(knots, dtype=float)
    if knots.ndim != 1 or knots.size < 2:
        raise NumericalError("spline basis requires at least 2 knots")
    if np.any(np.diff(knots) <= 0):
        raise NumericalError("spline knots must be strictly increasing")
    t = np.atleast_1d(np.asarray(t, dtype=float))
    m = knots.size
    cols = [t]
    if m > 2:
        k_last = knots[-1]
        k_prev = knots[-2]

        def d(kj):
            return (np.clip(t - kj, 0.0, None) ** 3 - np.clip(t - k_last, 0.0, None) ** 3) / (k_last - kj)

        d_prev = d(k_prev)
        for j in range(m - 2):
            cols.append(d(knots[j]) - d_prev)
    return np.column_stack(cols)


def quantile_knots(values, probs=(0.05, 0.35, 0.65, 0.95)) -> np.ndarray:
    """Default spline knot placement at quantiles of the observed values."""
    values = np.asarray(values, dtype=float)
    knots = np.unique(np.quantile(values, probs))
    if knots.size < 2:
        raise NumericalError("too few distinct values for spline knots")
    return knots
