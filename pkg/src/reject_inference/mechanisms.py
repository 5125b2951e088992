"""Financing-selection mechanisms that hide the labels of rejected applicants.

Scores follow the scorecard convention of this package: a scorer returns a
default probability, so a LOWER score is a SAFER applicant and gets financed
first.

Kinds
-----
MCAR
    financed with probability ``target_acceptance_rate``, independently of x, y.
MAR_cutoff
    the ``round(rate * n)`` lowest-score applicants are financed; p(f|x) is 0
    or 1, so positivity fails on the rejected region by construction.
MAR_stochastic
    p(f|x) = floor + (1 - floor) * sigmoid(steepness * (tau - q(x))) where q is
    the applicant's score quantile in the population and tau is solved so that
    the mean propensity equals the target rate.
MNAR
    the MAR_stochastic propensity multiplied by ``mnar_default_penalty`` for
    defaulters (y = 1), tau re-solved for the target rate.

All stochastic kinds draw one uniform per applicant from the mechanism seed
and finance it when the uniform falls below its propensity. Propensities are
monotone in the rate, so a sweep over decreasing rates yields nested
financed sets for every kind.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Any, NamedTuple, Optional, Sequence

import numpy as np
from scipy import stats
from scipy.optimize import brentq
from scipy.special import expit

from .data_model import Dataset, GeneratorSpec, generate_synthetic
from .logistic import LogisticModel, fit_weighted, predict_proba
from .seeding import check_seed, derive_rng, derive_seed

KINDS = ("MCAR", "MAR_cutoff", "MAR_stochastic", "MNAR")


class MechanismError(ValueError):
    pass


@dataclass(frozen=True)
class MechanismSpec:
    kind: str
    target_acceptance_rate: float
    scorer: Any = None
    mnar_default_penalty: float = 0.5
    floor: float = 0.05
    steepness: float = 10.0
    seed: int = 0

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise MechanismError(f"unknown mechanism kind {self.kind!r}; expected one of {KINDS}")
        if not 0 < self.target_acceptance_rate <= 1:
            raise MechanismError("target_acceptance_rate must lie in (0, 1]")
        if self.kind != "MCAR" and self.scorer is None and self.target_acceptance_rate < 1:
            raise MechanismError(f"{self.kind} needs a scorer")
        if self.kind == "MNAR" and not 0 < self.mnar_default_penalty <= 1:
            raise MechanismError("mnar_default_penalty must lie in (0, 1]")
        if not 0 <= self.floor < 1:
            raise MechanismError("floor must lie in [0, 1)")
        if self.steepness <= 0:
            raise MechanismError("steepness must be positive")
        check_seed(self.seed)

    def at_rate(self, rate: float) -> "MechanismSpec":
        return replace(self, target_acceptance_rate=float(rate))


class SweepPoint(NamedTuple):
    rate: float
    dataset: Dataset
    propensities: np.ndarray


def score_with(scorer, x) -> np.ndarray:
    """Default-probability scores from a LogisticModel, a methods.Scorer or a callable."""
    if isinstance(scorer, LogisticModel):
        return predict_proba(scorer, x)
    if hasattr(scorer, "score"):
        return scorer.score(x)
    return np.asarray(scorer(x), dtype=float)


def score_quantiles(scores: np.ndarray) -> np.ndarray:
    """Mid-rank quantiles (rank - 1/2) / n, ties sharing their average rank."""
    return (stats.rankdata(scores, method="average") - 0.5) / scores.shape[0]


def _solve_tau(propensity_at, target: float, steepness: float) -> float:
    span = 50.0 / steepness + 1.0
    lo, hi = -span, 1.0 + span
    f_lo = propensity_at(lo).mean() - target
    f_hi = propensity_at(hi).mean() - target
    if f_lo > 0 or f_hi < 0:
        achievable = (propensity_at(lo).mean(), propensity_at(hi).mean())
        raise MechanismError(
            f"target rate {target:g} unachievable; mean propensity ranges over "
            f"[{achievable[0]:.4g}, {achievable[1]:.4g}]"
        )
    return brentq(lambda t: propensity_at(t).mean() - target, lo, hi, xtol=1e-12, rtol=1e-12)


def propensities(spec: MechanismSpec, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """True p(f | x, y) for every record under ``spec``."""
    spec.validate()
    n = x.shape[0]
    rate = spec.target_acceptance_rate
    if rate == 1.0:
        return np.ones(n)
    if spec.kind == "MCAR":
        return np.full(n, rate)
    scores = score_with(spec.scorer, x)
    if spec.kind == "MAR_cutoff":
        k = int(round(rate * n))
        p = np.zeros(n)
        p[np.argsort(scores, kind="stable")[:k]] = 1.0
        return p
    q = score_quantiles(scores)
    eps, kappa = spec.floor, spec.steepness
    mult = np.ones(n)
    if spec.kind == "MNAR":
        mult = np.where(np.asarray(y) == 1, spec.mnar_default_penalty, 1.0)

    def at(tau):
        return (eps + (1 - eps) * expit(kappa * (tau - q))) * mult

    tau = _solve_tau(at, rate, kappa)
    p = at(tau)
    if abs(p.mean() - rate) > 1e-3:
        raise MechanismError(f"renormalization missed the target rate ({p.mean():.5f} vs {rate:g})")
    return p


def _finance(spec: MechanismSpec, p: np.ndarray) -> np.ndarray:
    if spec.kind == "MAR_cutoff" or spec.target_acceptance_rate == 1.0:
        return p >= 1.0
    u = derive_rng(spec.seed, "financing").random(p.shape[0])
    return u < p


def _full_labels(dataset: Dataset, full_labels) -> np.ndarray:
    if full_labels is not None:
        return np.asarray(full_labels).astype(int)
    if not dataset.financed.all():
        raise MechanismError("apply_mechanism needs every label present (or full_labels)")
    return dataset.labels.astype(int)


def apply_mechanism(dataset: Dataset, spec: MechanismSpec, full_labels=None) -> tuple[Dataset, np.ndarray]:
    """Mask labels under ``spec``; returns the masked dataset and the true propensities."""
    y = _full_labels(dataset, full_labels)
    p = propensities(spec, dataset.features, y)
    return dataset.masked(_finance(spec, p), y), p


def sweep_mechanism(dataset: Dataset, base_spec: MechanismSpec, rates: Sequence[float],
                    full_labels=None) -> list[SweepPoint]:
    """One masked dataset per rate, all driven by the base seed's uniforms (nested selections)."""
    rates = [float(r) for r in rates]
    if not rates or any(not 0 < r <= 1 for r in rates):
        raise MechanismError("rates must lie in (0, 1]")
    if any(b >= a for a, b in zip(rates, rates[1:])):
        raise MechanismError("rates must be strictly decreasing")
    y = _full_labels(dataset, full_labels)
    out = []
    for r in rates:
        spec = base_spec.at_rate(r)
        p = propensities(spec, dataset.features, y)
        out.append(SweepPoint(r, dataset.masked(_finance(spec, p), y), p))
    return out


def fit_pilot_scorer(generator: GeneratorSpec, fraction: float = 0.1, seed: Optional[int] = None,
                     ridge: float = 0.0) -> LogisticModel:
    """Incumbent scorecard: a logistic fit on a fresh, fully-labelled pilot sample.

    The pilot is a separate draw from the same population (``fraction`` of
    ``n_total`` records), so the selection it drives depends on x only.
    """
    if not 0 < fraction <= 1:
        raise MechanismError("pilot fraction must lie in (0, 1]")
    n = max(2 * (generator.d + 1), int(round(fraction * generator.n_total)))
    seed = generator.seed if seed is None else seed
    pilot, _ = generate_synthetic(replace(generator, n_total=n, seed=derive_seed(seed, "pilot")))
    model = fit_weighted(pilot.features, pilot.labels, ridge=ridge)
    if not model.converged:
        raise MechanismError(f"pilot scorer did not converge: {model.diagnostic}")
    return model


def selection_dependence_test(financed, labels, scores, bins: int = 20):
    """Does financing depend on y within score-quantile strata?

    Sums the Pearson chi-square of the 2x2 (financed x label) table of each
    stratum; strata with an empty margin are skipped. Returns
    ``(statistic, dof, p_value)``.
    """
    financed = np.asarray(financed, dtype=bool)
    labels = np.asarray(labels).astype(int)
    strata = np.minimum((score_quantiles(np.asarray(scores)) * bins).astype(int), bins - 1)
    stat, dof = 0.0, 0
    for b in range(bins):
        m = strata == b
        table = np.array([[np.sum(financed[m] & (labels[m] == v)) for v in (0, 1)],
                          [np.sum(~financed[m] & (labels[m] == v)) for v in (0, 1)]], dtype=float)
        if np.any(table.sum(axis=0) == 0) or np.any(table.sum(axis=1) == 0):
            continue
        stat += stats.chi2_contingency(table, correction=False)[0]
        dof += 1
    return stat, dof, float(stats.chi2.sf(stat, dof)) if dof else 1.0
