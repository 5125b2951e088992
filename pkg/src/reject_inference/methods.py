"""Reject-inference strategies, all returning a :class:`Scorer`.

Baselines: ``financed_only`` (the usual scorecard), ``oracle_full`` (all true
labels, simulation only) and ``ideal_reweighting`` (inverse true propensity
weights). Reject-inference methods: ``augmentation``, ``parceling`` and
``generative_method``.

Score bands are empirical k-quantiles of the financed-only model's default
probability over ALL applicants (financed and rejected pooled).
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np
from scipy.special import expit

from .data_model import Dataset, GroundTruth
from .generative import EMConfig, GenerativeModel, fit_em
from .logistic import FitOptions, LogisticModel, fit_weighted, predict_proba
from .seeding import derive_rng

SCORE_EPS = 1e-15


class MethodError(RuntimeError):
    """A method could not produce a scorer (degenerate data or a failed fit)."""


class PositivityError(MethodError):
    """Inverse-propensity weighting with a zero propensity somewhere in the population."""


class BandWarning(UserWarning):
    pass


@dataclass(frozen=True, eq=False)
class Scorer:
    method: str
    model: Union[LogisticModel, GenerativeModel]
    diagnostics: dict = field(default_factory=dict)
    audit: dict = field(default_factory=dict)

    def logit(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if isinstance(self.model, LogisticModel):
            theta = self.model.theta
            if x.shape[1] != theta.shape[0] - 1:
                raise ValueError(f"expected {theta.shape[0] - 1} features, got {x.shape[1]}")
            return theta[0] + x @ theta[1:]
        return self.model.logit(x)

    def score(self, x) -> np.ndarray:
        """P(y=1 | x), kept inside the open interval (0, 1)."""
        return np.clip(expit(self.logit(x)), SCORE_EPS, 1 - SCORE_EPS)

    @property
    def theta(self) -> Optional[np.ndarray]:
        return self.model.theta if isinstance(self.model, LogisticModel) else None


@dataclass(frozen=True, eq=False)
class ScoreBands:
    k: int
    edges: np.ndarray
    financed_count: np.ndarray
    rejected_count: np.ndarray
    financed_default_rate: np.ndarray  # NaN where no financed record
    acceptance: np.ndarray
    assignment: np.ndarray  # band index of every applicant

    @property
    def zero_acceptance(self) -> np.ndarray:
        return self.financed_count == 0

    def band_of(self, scores) -> np.ndarray:
        return np.searchsorted(self.edges, np.asarray(scores), side="left")


def make_score_bands(scores_all, financed_mask, labels_f, k: int = 10) -> ScoreBands:
    """Pool financed and rejected scores, cut at the ``j/k`` quantiles, tabulate per band.

    ``labels_f`` is either one label per financed applicant (in order) or a
    full-length label array whose non-financed entries are ignored. Band b
    holds ``edges[b-1] < score <= edges[b]``.
    """
    s = np.asarray(scores_all, dtype=float)
    f = np.asarray(financed_mask, dtype=bool)
    labels_f = np.asarray(labels_f, dtype=float)
    if labels_f.shape[0] == s.shape[0] and s.shape[0] != f.sum():
        labels_f = labels_f[f]
    if labels_f.shape[0] != f.sum():
        raise ValueError("labels_f must have one entry per financed applicant")
    if k < 2:
        raise ValueError("k must be >= 2")
    if np.unique(s).size < k:
        raise ValueError(f"k = {k} exceeds the number of distinct scores ({np.unique(s).size})")
    edges = np.quantile(s, np.arange(1, k) / k, method="linear")
    band = np.searchsorted(edges, s, side="left")
    fin = np.bincount(band[f], minlength=k)
    rej = np.bincount(band[~f], minlength=k)
    bad = np.bincount(band[f], weights=labels_f, minlength=k)
    with np.errstate(invalid="ignore", divide="ignore"):
        dr = np.where(fin > 0, bad / np.maximum(fin, 1), np.nan)
        acc = np.where(fin + rej > 0, fin / np.maximum(fin + rej, 1), 0.0)
    return ScoreBands(k, edges, fin, rej, dr, acc, band)


def _require_converged(model: LogisticModel, method: str) -> LogisticModel:
    if not model.converged:
        raise MethodError(f"{method}: logistic fit failed ({model.diagnostic})")
    return model


def _require_financed(train: Dataset, method: str) -> None:
    if not train.financed.any():
        raise MethodError(f"{method}: no financed records")


def financed_only(train: Dataset, options: Optional[FitOptions] = None) -> Scorer:
    _require_financed(train, "financed_only")
    model = fit_weighted(train.x_f, train.y_f, None, options)
    return Scorer("financed_only", _require_converged(model, "financed_only"))


def oracle_full(train: Dataset, ground_truth: GroundTruth, options: Optional[FitOptions] = None) -> Scorer:
    """Fit on every applicant with its true label; only possible in simulation."""
    if not ground_truth.agrees_with(train):
        raise MethodError("oracle_full: ground truth disagrees with observed labels")
    model = fit_weighted(train.features, ground_truth.full_labels, None, options)
    return Scorer("oracle_full", _require_converged(model, "oracle_full"))


def ideal_reweighting(train: Dataset, true_propensities, options: Optional[FitOptions] = None) -> Scorer:
    """Financed records weighted by 1 / p(f | x); refuses when positivity fails."""
    p = np.asarray(true_propensities, dtype=float)
    if p.shape[0] != train.n:
        raise ValueError("one propensity per applicant is required")
    _require_financed(train, "ideal_reweighting")
    if np.any(p <= 0):
        raise PositivityError(
            f"ideal_reweighting: {int(np.sum(p <= 0))} applicants have p(f|x) = 0; "
            "the unexplored region cannot be reweighted"
        )
    w = 1.0 / p[train.financed]
    model = fit_weighted(train.x_f, train.y_f, w, options)
    return Scorer("ideal_reweighting", _require_converged(model, "ideal_reweighting"),
                  {"weight_total": float(w.sum()), "n_total": train.n})


def _bands_from_financed_only(train: Dataset, k_bands: int, options):
    base = financed_only(train, options)
    scores = predict_proba(base.model, train.features)
    return base, make_score_bands(scores, train.financed, train.y_f, k_bands)


def augmentation(train: Dataset, k_bands: int = 10, w_max: float = 100.0,
                 options: Optional[FitOptions] = None) -> Scorer:
    """Weight financed records by the inverse acceptance proportion of their band, then refit.

    Bands without a financed record cannot be reweighted and are dropped with
    a warning; weights above ``w_max`` are capped.
    """
    if k_bands < 2:
        raise ValueError("k_bands must be >= 2")
    _, bands = _bands_from_financed_only(train, k_bands, options)
    if np.sum(bands.financed_count > 0) < 2:
        raise MethodError("augmentation: fewer than 2 bands contain financed records")
    zero = np.flatnonzero(bands.zero_acceptance & (bands.rejected_count > 0))
    if zero.size:
        warnings.warn(f"augmentation: bands {zero.tolist()} have no financed record and are dropped",
                      BandWarning, stacklevel=2)
    with np.errstate(divide="ignore"):
        raw = 1.0 / bands.acceptance[bands.assignment[train.financed]]
    w = np.minimum(raw, w_max)
    n_capped = int(np.sum(raw > w_max))
    if n_capped:
        warnings.warn(f"augmentation: weight cap {w_max:g} binding for {n_capped} records",
                      BandWarning, stacklevel=2)
    model = fit_weighted(train.x_f, train.y_f, w, options)
    diag = {
        "weight_total": float(w.sum()),
        "n_total": train.n,
        "weight_discrepancy": float(train.n - w.sum()),
        "n_capped": n_capped,
        "zero_acceptance_bands": zero.tolist(),
    }
    audit = {"ids": train.ids[train.financed], "band": bands.assignment[train.financed], "weight": w}
    return Scorer("augmentation", _require_converged(model, "augmentation"), diag, audit)


def parceling(train: Dataset, k_bands: int = 10, inflation: float = 1.25, seed: int = 0,
              options: Optional[FitOptions] = None, band_reject_rates=None) -> Scorer:
    """Impute rejected labels at an inflated per-band default rate, then refit on everyone.

    The rate assigned to a band's rejects is ``min(1, inflation * financed
    default rate of the band)``; a band with no financed record falls back to
    the global financed default rate. ``band_reject_rates`` overrides the
    per-band rates directly (used for oracle-calibrated experiments).
    """
    if inflation < 1:
        raise ValueError("inflation must be >= 1")
    if k_bands < 2:
        raise ValueError("k_bands must be >= 2")
    _, bands = _bands_from_financed_only(train, k_bands, options)
    if band_reject_rates is None:
        global_rate = float(train.y_f.mean())
        base_rate = np.where(bands.zero_acceptance, global_rate, bands.financed_default_rate)
        rates = np.minimum(1.0, inflation * base_rate)
    else:
        rates = np.asarray(band_reject_rates, dtype=float)
        if rates.shape != (k_bands,) or np.any((rates < 0) | (rates > 1)):
            raise ValueError("band_reject_rates must be k_bands probabilities")
    rej = ~train.financed
    p_rej = rates[bands.assignment[rej]]
    drawn = (derive_rng(seed, "parceling").random(int(rej.sum())) < p_rej).astype(int)
    x = np.vstack([train.x_f, train.x_nf])
    y = np.concatenate([train.y_f, drawn])
    model = fit_weighted(x, y, None, options)
    diag = {"band_reject_rates": rates.tolist(), "n_imputed": int(rej.sum()),
            "imputed_default_rate": float(drawn.mean()) if drawn.size else float("nan")}
    audit = {"ids": train.ids[rej], "band": bands.assignment[rej], "drawn_label": drawn}
    return Scorer("parceling", _require_converged(model, "parceling"), diag, audit)


def generative_method(train: Dataset, config: Optional[EMConfig] = None) -> Scorer:
    _require_financed(train, "generative")
    model = fit_em(train.x_f, train.y_f, train.x_nf, config)
    return Scorer("generative", model, {"converged": model.converged, "iterations": model.iterations})


def write_audit_csv(scorer: Scorer, path) -> None:
    """Parceling drawn labels or Augmentation band weights, one row per record."""
    if not scorer.audit:
        raise ValueError(f"{scorer.method} keeps no audit trail")
    cols = list(scorer.audit)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for row in zip(*(scorer.audit[c] for c in cols)):
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


METHOD_NAMES = ("financed_only", "oracle_full", "ideal_reweighting", "augmentation", "parceling", "generative")


def run_method(name: str, train: Dataset, *, truth: Optional[GroundTruth] = None, propensities=None,
               options: Optional[FitOptions] = None, k_bands: int = 10, w_max: float = 100.0,
               inflation: float = 1.25, seed: int = 0, em: Optional[EMConfig] = None) -> Scorer:
    """Dispatch by method name with the knobs each method understands."""
    if name == "financed_only":
        return financed_only(train, options)
    if name == "oracle_full":
        if truth is None:
            raise MethodError("oracle_full needs the ground truth (simulation only)")
        return oracle_full(train, truth, options)
    if name == "ideal_reweighting":
        if propensities is None:
            raise MethodError("ideal_reweighting needs the true propensities (simulation only)")
        return ideal_reweighting(train, propensities, options)
    if name == "augmentation":
        return augmentation(train, k_bands, w_max, options)
    if name == "parceling":
        return parceling(train, k_bands, inflation, seed, options)
    if name == "generative":
        return generative_method(train, em)
    raise MethodError(f"unknown method {name!r}; expected one of {METHOD_NAMES}")
