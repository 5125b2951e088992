"""Weighted maximum-likelihood logistic regression.

Newton-Raphson with step-halving from theta = 0. The weighted log-likelihood

    L(theta) = sum_i w_i [y_i log p_i + (1 - y_i) log(1 - p_i)] - ridge * ||slopes||^2

is maximized; convergence is declared when the infinity norm of grad L / sum(w)
drops below ``tol_grad``. Dividing by the weight total keeps the stopping rule
invariant to a global rescaling of the weights.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import linalg
from scipy.optimize import linprog
from scipy.special import expit, log_expit

PROB_CLAMP = 1e-12


class ConvergenceWarning(UserWarning):
    pass


class SingularInformationError(np.linalg.LinAlgError):
    """Observed information is singular; ``columns`` are design indices (0 = intercept)."""

    def __init__(self, columns):
        self.columns = tuple(int(c) for c in columns)
        super().__init__(
            "observed information is singular; collinear design columns "
            f"{list(self.columns)} (0 = intercept, j = feature j-1)"
        )


@dataclass(frozen=True)
class FitOptions:
    tol_grad: float = 1e-8
    max_iter: int = 100
    max_halvings: int = 30
    ridge: float = 0.0


@dataclass(frozen=True, eq=False)
class LogisticModel:
    theta: np.ndarray
    converged: bool
    iterations: int
    final_gradient_norm: float
    loglik: float
    weights_used: dict
    ridge: float = 0.0
    diagnostic: str = ""
    loglik_trace: tuple[float, ...] = ()

    @property
    def d(self) -> int:
        return self.theta.shape[0] - 1

    @property
    def intercept(self) -> float:
        return float(self.theta[0])

    @property
    def slopes(self) -> np.ndarray:
        return self.theta[1:]


@dataclass(frozen=True, eq=False)
class CovarianceEstimate:
    model_based: np.ndarray
    sandwich: np.ndarray


def design(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    return np.column_stack([np.ones(x.shape[0]), x])


def _loglik(eta, y, w, theta, ridge):
    # log p clamped at PROB_CLAMP so that saturated fits stay finite
    lo = np.log(PROB_CLAMP)
    hi = np.log1p(-PROB_CLAMP)
    lp1 = np.clip(log_expit(eta), lo, hi)
    lp0 = np.clip(log_expit(-eta), lo, hi)
    return float(np.sum(w * (y * lp1 + (1 - y) * lp0)) - ridge * np.sum(theta[1:] ** 2))


def weighted_loglik(theta, x, y, w=None, ridge: float = 0.0) -> float:
    X = design(x)
    y = np.asarray(y, dtype=float)
    w = np.ones_like(y) if w is None else np.asarray(w, dtype=float)
    theta = np.asarray(theta, dtype=float)
    return _loglik(X @ theta, y, w, theta, ridge)


def gradient(theta, x, y, w=None, ridge: float = 0.0) -> np.ndarray:
    """Analytic gradient of :func:`weighted_loglik`."""
    X = design(x)
    y = np.asarray(y, dtype=float)
    w = np.ones_like(y) if w is None else np.asarray(w, dtype=float)
    theta = np.asarray(theta, dtype=float)
    g = X.T @ (w * (y - expit(X @ theta)))
    g[1:] -= 2 * ridge * theta[1:]
    return g


def _is_separable(X, y, w) -> bool:
    """Albert-Anderson check: is there a nonzero b with s_i * x_i.b >= 0 for all i?"""
    keep = w > 0
    A = (2 * y[keep] - 1)[:, None] * X[keep]
    p = A.shape[1]
    # maximise sum(A b) subject to A b >= 0 and box bounds; optimum > 0 means (quasi-)separation
    res = linprog(-A.sum(axis=0), A_ub=-A, b_ub=np.zeros(A.shape[0]),
                  bounds=[(-1, 1)] * p, method="highs")
    return bool(res.status == 0 and -res.fun > 1e-7 * max(1.0, np.abs(A).sum() / A.shape[0]))


def _solve(H, g):
    try:
        return linalg.solve(H, g, assume_a="pos")
    except (linalg.LinAlgError, ValueError):
        return np.linalg.lstsq(H, g, rcond=None)[0]


def fit_weighted(features, labels, weights=None, options: Optional[FitOptions] = None, **kw) -> LogisticModel:
    """Maximize the weighted log-likelihood; see the module docstring.

    Keyword arguments override fields of ``options``. Separable data or a
    single-class sample (without ridge) return ``converged=False`` with a
    ``diagnostic`` message rather than an unreliable estimate.
    """
    opts = options or FitOptions()
    if kw:
        opts = FitOptions(**{**opts.__dict__, **kw})
    X = design(features)
    y = np.asarray(labels, dtype=float).reshape(-1)
    n, p = X.shape
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float).reshape(-1)
    if n < 1:
        raise ValueError("need at least one record")
    if y.shape[0] != n or w.shape[0] != n:
        raise ValueError("features, labels and weights must have the same length")
    if not np.all(np.isfinite(X)):
        raise ValueError("features must be finite")
    if np.any((y != 0) & (y != 1)):
        raise ValueError("labels must be binary")
    if not np.all(np.isfinite(w)) or np.any(w < 0) or not np.any(w > 0):
        raise ValueError("weights must be finite, >= 0, with at least one positive")
    if opts.ridge < 0:
        raise ValueError("ridge must be >= 0")

    wsum = float(w.sum())
    summary = {"min": float(w.min()), "max": float(w.max()), "sum": wsum}
    ridge = float(opts.ridge)
    theta = np.zeros(p)
    eta = X @ theta
    ll = _loglik(eta, y, w, theta, ridge)
    trace = [ll]

    def grad_hess(eta, theta):
        mu = expit(eta)
        g = X.T @ (w * (y - mu))
        H = X.T @ ((w * mu * (1 - mu))[:, None] * X)
        if ridge:
            g[1:] -= 2 * ridge * theta[1:]
            H[1:, 1:] += 2 * ridge * np.eye(p - 1)
        return g, H

    def result(converged, it, gnorm, diag=""):
        if diag:
            warnings.warn(diag, ConvergenceWarning, stacklevel=3)
        return LogisticModel(theta.copy(), converged, it, gnorm, ll, summary, ridge, diag, tuple(trace))

    active = w > 0
    if ridge == 0 and np.unique(y[active]).size < 2:
        return result(False, 0, float("nan"), "all weighted labels are in one class; the MLE does not exist")

    g, H = grad_hess(eta, theta)
    gnorm = float(np.max(np.abs(g)) / wsum)
    steps = 0
    while gnorm > opts.tol_grad and steps < opts.max_iter:
        step = _solve(H, g)
        t = 1.0
        for _ in range(opts.max_halvings + 1):
            cand = theta + t * step
            eta_c = X @ cand
            ll_c = _loglik(eta_c, y, w, cand, ridge)
            # tolerate rounding-level decreases only
            if ll_c >= ll - 1e-12 * abs(ll):
                break
            t *= 0.5
        else:
            return result(False, steps, gnorm, "step-halving failed to increase the log-likelihood")
        steps += 1
        theta, eta, ll = cand, eta_c, ll_c
        trace.append(ll)
        if not np.all(np.isfinite(theta)):
            return result(False, steps, float("nan"), "coefficients diverged")
        g, H = grad_hess(eta, theta)
        gnorm = float(np.max(np.abs(g)) / wsum)

    separable_msg = "data are (quasi-)separable; the MLE does not exist, consider ridge > 0"
    if gnorm > opts.tol_grad:
        diag = f"no convergence after {steps} iterations (gradient norm {gnorm:.3g})"
        if ridge == 0 and _is_separable(X, y, w):
            diag = separable_msg
        return result(False, steps, gnorm, diag)
    # the LP is exact; these triggers only decide when it is worth running
    suspicious = np.max(np.abs(eta[active])) > 15 or steps > 15
    if ridge == 0 and suspicious and _is_separable(X, y, w):
        return result(False, steps, gnorm, separable_msg)
    return result(True, steps, gnorm)


def predict_proba(model, x) -> np.ndarray:
    """sigmoid(theta . [1, x]) for a single row (returns a float) or a matrix of rows."""
    theta = model.theta if isinstance(model, LogisticModel) else np.asarray(model, dtype=float)
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x2 = x[None, :] if single else x
    if x2.shape[1] != theta.shape[0] - 1:
        raise ValueError(f"expected {theta.shape[0] - 1} features, got {x2.shape[1]}")
    p = expit(theta[0] + x2 @ theta[1:])
    return float(p[0]) if single else p


def _collinear_columns(H, tol=1e-10) -> np.ndarray:
    s, V = np.linalg.eigh(H)
    null = V[:, s <= tol * max(s.max(), 1e-300)]
    return np.flatnonzero(np.any(np.abs(null) > 1e-6, axis=1))


def covariance(model: LogisticModel, features, labels, weights=None) -> CovarianceEstimate:
    """Inverse observed information and the White sandwich H^-1 G H^-1.

    Both refer to the weighted log-likelihood, so they estimate the covariance
    of theta-hat itself (not scaled by n). G sums w_i^2 (y_i - p_i)^2 x_i x_i'.
    """
    if not model.converged:
        raise ValueError("covariance needs a converged model")
    X = design(features)
    y = np.asarray(labels, dtype=float)
    w = np.ones(X.shape[0]) if weights is None else np.asarray(weights, dtype=float)
    mu = expit(X @ model.theta)
    H = X.T @ ((w * mu * (1 - mu))[:, None] * X)
    if model.ridge:
        H[1:, 1:] += 2 * model.ridge * np.eye(X.shape[1] - 1)
    cols = _collinear_columns(H)
    if cols.size:
        raise SingularInformationError(cols)
    Hinv = linalg.inv(H)
    Hinv = 0.5 * (Hinv + Hinv.T)
    score = X * (w * (y - mu))[:, None]
    G = score.T @ score
    S = Hinv @ G @ Hinv
    return CovarianceEstimate(Hinv, 0.5 * (S + S.T))
