"""Semi-supervised Gaussian class-conditional classifier fit by EM.

The joint model is p(x, y) = prior_y N(x; mean_y, cov_y). Labelled (financed)
records enter through p(x, y), rejected records through the marginal
p(x) = sum_y p(x, y), which is the likelihood that is appropriate when
financing depends on x only.

The Gaussian family is a modelling choice of this package, nothing more:
it is the simplest family for which modelling p(x) visibly biases the
classifier when the real covariates are not Gaussian.

Covariances are kept positive definite by a ridge ``r`` fixed once from the
data (``ridge_scale * trace(cov(x)) / d``). It is implemented as the penalty
``-r/2 * tr(cov_y^-1)`` on every record's class log-density, so that the
M-step ``cov_y = scatter_y / n_y + r I`` is an exact maximizer and the
penalized objective recorded in ``loglik_trace`` never decreases.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import expit, logsumexp

from .seeding import derive_rng


class EMError(ValueError):
    pass


@dataclass(frozen=True)
class EMConfig:
    max_iter: int = 500
    tol: float = 1e-8
    ridge_scale: float = 1e-6
    equal_covariance: bool = False
    restarts: int = 0
    seed: int = 0


@dataclass(frozen=True, eq=False)
class GenerativeModel:
    prior: float
    mean0: np.ndarray
    mean1: np.ndarray
    cov0: np.ndarray
    cov1: np.ndarray
    loglik_trace: tuple[float, ...] = ()
    converged: bool = True
    iterations: int = 0
    ridge_floor: float = 0.0
    equal_covariance: bool = False

    @property
    def d(self) -> int:
        return self.mean0.shape[0]

    def logit(self, x) -> np.ndarray:
        """log P(y=1|x) - log P(y=0|x) by Bayes' rule, for rows of ``x``."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.d:
            raise ValueError(f"expected {self.d} features, got {x.shape[1]}")
        return (math.log(self.prior) - math.log1p(-self.prior)
                + _logpdf(x, self.mean1, self.cov1) - _logpdf(x, self.mean0, self.cov0))

    def induced_theta(self) -> np.ndarray:
        """Logistic coefficients equal to the posterior when the covariances are equal."""
        if not np.array_equal(self.cov0, self.cov1):
            raise ValueError("posterior is logistic in x only with equal covariances")
        a0 = np.linalg.solve(self.cov0, self.mean0)
        a1 = np.linalg.solve(self.cov0, self.mean1)
        b = math.log(self.prior) - math.log1p(-self.prior) - 0.5 * (self.mean1 @ a1 - self.mean0 @ a0)
        return np.concatenate([[b], a1 - a0])


def _logpdf(x, mean, cov):
    chol = np.linalg.cholesky(cov)
    z = np.linalg.solve(chol, (x - mean).T)
    return (-0.5 * np.einsum("ij,ij->j", z, z) - np.log(np.diag(chol)).sum()
            - 0.5 * mean.shape[0] * math.log(2 * math.pi))


def posterior(model: GenerativeModel, x):
    """P(y=1 | x), computed from the log-odds; a float for a single row."""
    x = np.asarray(x, dtype=float)
    p = expit(model.logit(x))
    return float(p[0]) if x.ndim == 1 else p


@dataclass
class _Params:
    prior: float
    means: np.ndarray  # (2, d)
    covs: np.ndarray  # (2, d, d)


def _mstep(x, resp1, ridge, equal_cov) -> _Params:
    """Weighted MLE given P(y=1) per row; exact maximizer of the penalized objective."""
    r = np.column_stack([1 - resp1, resp1])
    nk = r.sum(axis=0)
    means = (r.T @ x) / nk[:, None]
    d = x.shape[1]
    scatter = np.empty((2, d, d))
    for k in range(2):
        diff = x - means[k]
        scatter[k] = (diff * r[:, [k]]).T @ diff
    eye = np.eye(d)
    if equal_cov:
        pooled = (scatter[0] + scatter[1]) / nk.sum() + ridge * eye
        covs = np.stack([pooled, pooled])
    else:
        covs = scatter / nk[:, None, None] + ridge * eye
    covs = 0.5 * (covs + covs.transpose(0, 2, 1))
    return _Params(float(nk[1] / nk.sum()), means, covs)


def _joint_logdens(x, par: _Params, ridge) -> np.ndarray:
    """(n, 2) penalized log p(x, y=k)."""
    out = np.empty((x.shape[0], 2))
    logpri = (math.log1p(-par.prior), math.log(par.prior))
    for k in range(2):
        pen = 0.5 * ridge * np.trace(np.linalg.inv(par.covs[k]))
        out[:, k] = logpri[k] + _logpdf(x, par.means[k], par.covs[k]) - pen
    return out


def _objective(x_f, y_f, x_nf, par, ridge):
    jf = _joint_logdens(x_f, par, ridge)
    lab = jf[np.arange(y_f.shape[0]), y_f].sum()
    if x_nf.shape[0] == 0:
        return float(lab), np.empty(0)
    jn = _joint_logdens(x_nf, par, ridge)
    marg = logsumexp(jn, axis=1)
    return float(lab + marg.sum()), np.exp(jn[:, 1] - marg)


def _run(x_f, y_f, x_nf, par, ridge, cfg):
    x_all = np.vstack([x_f, x_nf])
    trace = []
    converged = False
    it = 0
    obj, resp = _objective(x_f, y_f, x_nf, par, ridge)
    trace.append(obj)
    while it < cfg.max_iter:
        it += 1
        par = _mstep(x_all, np.concatenate([y_f.astype(float), resp]), ridge, cfg.equal_covariance)
        obj, resp = _objective(x_f, y_f, x_nf, par, ridge)
        trace.append(obj)
        if abs(trace[-1] - trace[-2]) <= cfg.tol * abs(trace[-2]):
            converged = True
            break
    return par, trace, converged, it


def fit_em(x_f, y_f, x_nf=None, config: Optional[EMConfig] = None, **kw) -> GenerativeModel:
    """Fit prior, class means and class covariances on labelled and unlabelled rows.

    Starts from the supervised estimate on the labelled rows. Stops when the
    relative change of the objective falls below ``config.tol`` or after
    ``config.max_iter`` EM iterations. With ``restarts > 0`` extra runs start
    from seeded perturbations of the class means and the best objective wins.
    """
    cfg = config or EMConfig()
    if kw:
        cfg = EMConfig(**{**cfg.__dict__, **kw})
    x_f = np.atleast_2d(np.asarray(x_f, dtype=float))
    y_f = np.asarray(y_f).astype(int).reshape(-1)
    d = x_f.shape[1]
    x_nf = np.empty((0, d)) if x_nf is None else np.asarray(x_nf, dtype=float).reshape(-1, d)
    if x_f.shape[0] != y_f.shape[0]:
        raise EMError("x_f and y_f lengths differ")
    if not (np.all(np.isfinite(x_f)) and np.all(np.isfinite(x_nf))):
        raise EMError("inputs must be finite")
    if np.any((y_f != 0) & (y_f != 1)):
        raise EMError("labels must be binary")
    counts = np.bincount(y_f, minlength=2)
    if counts.min() < 2:
        raise EMError(f"each class needs at least 2 labelled records, got {counts.tolist()}")

    x_all = np.vstack([x_f, x_nf])
    spread = np.trace(np.atleast_2d(np.cov(x_all, rowvar=False))) / d
    ridge = cfg.ridge_scale * max(spread, np.finfo(float).tiny)

    start = _mstep(x_f, y_f.astype(float), ridge, cfg.equal_covariance)
    best = _run(x_f, y_f, x_nf, start, ridge, cfg)
    if cfg.restarts:
        rng = derive_rng(cfg.seed, "em-restarts")
        scale = np.sqrt(np.diag(np.atleast_2d(np.cov(x_all, rowvar=False))))
        for _ in range(cfg.restarts):
            jitter = _Params(start.prior, start.means + 0.5 * scale * rng.standard_normal(start.means.shape),
                             start.covs.copy())
            cand = _run(x_f, y_f, x_nf, jitter, ridge, cfg)
            if cand[1][-1] > best[1][-1]:
                best = cand
    par, trace, converged, it = best
    return GenerativeModel(par.prior, par.means[0].copy(), par.means[1].copy(), par.covs[0].copy(),
                           par.covs[1].copy(), tuple(trace), converged, it, ridge, cfg.equal_covariance)
