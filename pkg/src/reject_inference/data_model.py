"""Datasets, synthetic generators with known ground truth, CSV ingestion and binning.

Label convention, used everywhere in the package: ``y = 1`` is a default
(bad payer), ``y = 0`` a good payer. A label is observed only for financed
records; unobserved labels are stored as NaN.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
import yaml
from scipy.special import expit

from .seeding import check_seed, derive_rng

WELL_SPECIFIED = "well_specified"
MISSPECIFIED = "misspecified"
SPEC_TAGS = (WELL_SPECIFIED, MISSPECIFIED)


class DataError(ValueError):
    """Invalid dataset, generator spec or input file."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Binning:
    """Equal-frequency bin edges, one array per binned column."""

    columns: tuple[int, ...]
    edges: tuple[np.ndarray, ...]
    bins: int


@dataclass(frozen=True, eq=False)
class Dataset:
    """Applicants with a financing mask; ``labels[i]`` is NaN unless financed."""

    features: np.ndarray
    labels: np.ndarray
    financed: np.ndarray
    ids: np.ndarray
    feature_names: tuple[str, ...] = ()
    holdout_labels: Optional[np.ndarray] = None
    binning: Optional[Binning] = None

    def __post_init__(self):
        x = np.asarray(self.features, dtype=float)
        if x.ndim != 2:
            raise DataError("features must be a 2-D array")
        n, d = x.shape
        if n < 1 or d < 1:
            raise DataError(f"dataset needs n >= 1 and d >= 1, got n={n}, d={d}")
        if not np.all(np.isfinite(x)):
            raise DataError("features contain non-finite values")
        y = np.asarray(self.labels, dtype=float).reshape(-1)
        f = np.asarray(self.financed, dtype=bool).reshape(-1)
        ids = np.asarray(self.ids).reshape(-1)
        if not (y.shape[0] == f.shape[0] == ids.shape[0] == n):
            raise DataError("features, labels, financed and ids must have the same length")
        present = ~np.isnan(y)
        if not np.array_equal(present, f):
            raise DataError("a label must be present exactly on financed records")
        if np.any((y[present] != 0) & (y[present] != 1)):
            raise DataError("labels must be 0 or 1")
        names = tuple(self.feature_names) or tuple(f"x{j + 1}" for j in range(d))
        if len(names) != d:
            raise DataError("feature_names length does not match d")
        object.__setattr__(self, "features", _frozen(x))
        object.__setattr__(self, "labels", _frozen(y))
        object.__setattr__(self, "financed", _frozen(f))
        object.__setattr__(self, "ids", _frozen(ids))
        object.__setattr__(self, "feature_names", names)
        if self.holdout_labels is not None:
            object.__setattr__(self, "holdout_labels", _frozen(np.asarray(self.holdout_labels, dtype=float)))

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    @property
    def x_f(self) -> np.ndarray:
        return self.features[self.financed]

    @property
    def y_f(self) -> np.ndarray:
        return self.labels[self.financed].astype(int)

    @property
    def x_nf(self) -> np.ndarray:
        return self.features[~self.financed]

    @property
    def acceptance_rate(self) -> float:
        return float(self.financed.mean())

    def masked(self, financed: np.ndarray, full_labels: np.ndarray) -> "Dataset":
        """Same applicants under a new financing mask, labels taken from ``full_labels``."""
        financed = np.asarray(financed, dtype=bool)
        labels = np.where(financed, np.asarray(full_labels, dtype=float), np.nan)
        return replace(self, labels=labels, financed=financed, holdout_labels=None)

    @classmethod
    def fully_labelled(cls, features, labels, ids=None, **kw) -> "Dataset":
        labels = np.asarray(labels, dtype=float)
        ids = np.arange(labels.shape[0]) if ids is None else ids
        return cls(features, labels, np.ones(labels.shape[0], dtype=bool), ids, **kw)


# -- synthetic generation -----------------------------------------------------

FEATURE_KINDS = ("gaussian", "uniform", "lognormal_mixture")


@dataclass(frozen=True)
class FeatureDistribution:
    """Covariate law for the logistic generator.

    ``gaussian``: N(mean, scale^2 * R) with R equicorrelated at ``rho``.
    ``uniform``: independent U(low, high).
    ``lognormal_mixture``: pick component k with probability ``weights[k]``,
    then x_j = exp(mus[k][j] + sigmas[k] * z_j) + shift, z standard normal.
    """

    kind: str = "gaussian"
    mean: Optional[tuple[float, ...]] = None
    scale: float = 1.0
    rho: float = 0.0
    low: float = -1.0
    high: float = 1.0
    weights: tuple[float, ...] = (0.5, 0.5)
    mus: tuple[tuple[float, ...], ...] = ((0.0,), (1.0,))
    sigmas: tuple[float, ...] = (0.5, 0.5)
    shift: float = 0.0

    def validate(self, d: int) -> None:
        if self.kind not in FEATURE_KINDS:
            raise DataError(f"unknown feature distribution {self.kind!r}")
        if self.kind == "gaussian":
            if self.mean is not None and len(self.mean) != d:
                raise DataError("feature mean has the wrong dimension")
            if self.scale <= 0 or not -1.0 / max(d - 1, 1) < self.rho < 1:
                raise DataError("invalid gaussian scale/rho")
        elif self.kind == "uniform":
            if not self.low < self.high:
                raise DataError("uniform needs low < high")
        else:
            k = len(self.weights)
            if k < 1 or len(self.mus) != k or len(self.sigmas) != k:
                raise DataError("lognormal mixture: weights, mus and sigmas must have equal length")
            if any(w < 0 for w in self.weights) or not math.isclose(sum(self.weights), 1.0, rel_tol=1e-9):
                raise DataError("mixture weights must be non-negative and sum to 1")
            if any(len(m) not in (1, d) for m in self.mus) or any(s <= 0 for s in self.sigmas):
                raise DataError("lognormal mixture: bad mus/sigmas")

    def sample(self, rng: np.random.Generator, n: int, d: int) -> np.ndarray:
        if self.kind == "gaussian":
            mean = np.zeros(d) if self.mean is None else np.asarray(self.mean, dtype=float)
            corr = np.full((d, d), self.rho)
            np.fill_diagonal(corr, 1.0)
            chol = np.linalg.cholesky(corr) * self.scale
            return mean + rng.standard_normal((n, d)) @ chol.T
        if self.kind == "uniform":
            return rng.uniform(self.low, self.high, size=(n, d))
        comp = rng.choice(len(self.weights), size=n, p=np.asarray(self.weights) / sum(self.weights))
        mus = np.array([np.broadcast_to(np.asarray(m, dtype=float), (d,)) for m in self.mus])
        sig = np.asarray(self.sigmas, dtype=float)
        z = rng.standard_normal((n, d))
        return np.exp(mus[comp] + sig[comp, None] * z) + self.shift


@dataclass(frozen=True)
class ClassConditionalGaussians:
    """Generative truth: y ~ Bernoulli(prior), then x | y ~ N(mean_y, cov_y)."""

    prior: float
    mean0: tuple[float, ...]
    mean1: tuple[float, ...]
    cov0: tuple[tuple[float, ...], ...]
    cov1: tuple[tuple[float, ...], ...]

    def arrays(self):
        return (np.asarray(self.mean0, float), np.asarray(self.mean1, float),
                np.asarray(self.cov0, float), np.asarray(self.cov1, float))

    def validate(self, d: int) -> None:
        if not 0 < self.prior < 1:
            raise DataError("class prior must lie in (0, 1)")
        m0, m1, c0, c1 = self.arrays()
        if m0.shape != (d,) or m1.shape != (d,) or c0.shape != (d, d) or c1.shape != (d, d):
            raise DataError("class-conditional parameters have the wrong dimension")
        for c in (c0, c1):
            if not np.allclose(c, c.T) or np.linalg.eigvalsh(c).min() <= 0:
                raise DataError("class covariances must be symmetric positive definite")

    @property
    def equal_covariance(self) -> bool:
        return bool(np.array_equal(np.asarray(self.cov0), np.asarray(self.cov1)))

    def logit(self, x: np.ndarray) -> np.ndarray:
        m0, m1, c0, c1 = self.arrays()
        return (math.log(self.prior / (1 - self.prior))
                + _gauss_logpdf(x, m1, c1) - _gauss_logpdf(x, m0, c0))

    def linear_theta(self) -> np.ndarray:
        """Exact logistic coefficients when the two covariances are equal."""
        m0, m1, c0, _ = self.arrays()
        a = np.linalg.solve(c0, m1 - m0)
        b = math.log(self.prior / (1 - self.prior)) - 0.5 * (m1 @ np.linalg.solve(c0, m1) - m0 @ np.linalg.solve(c0, m0))
        return np.concatenate([[b], a])


def _gauss_logpdf(x, mean, cov):
    chol = np.linalg.cholesky(cov)
    z = np.linalg.solve(chol, (np.atleast_2d(x) - mean).T)
    return -0.5 * np.sum(z**2, axis=0) - np.log(np.diag(chol)).sum() - 0.5 * len(mean) * math.log(2 * math.pi)


@dataclass(frozen=True)
class GeneratorSpec:
    """Recipe for a synthetic population.

    With ``classes`` unset, y ~ Bernoulli(sigmoid(g(x))) where g is the linear
    predictor theta_true . [1, x] in the well-specified arm, plus
    ``misspec_c * x1**2`` in the misspecified arm. With ``classes`` set, the
    population is drawn from class-conditional Gaussians instead and the
    spec tag follows from whether the class covariances are equal.
    """

    n_total: int
    d: int
    spec_tag: str = WELL_SPECIFIED
    theta_true: Optional[tuple[float, ...]] = None
    misspec_c: float = 1.0
    features: FeatureDistribution = field(default_factory=FeatureDistribution)
    classes: Optional[ClassConditionalGaussians] = None
    seed: int = 0
    id_offset: int = 0

    def validate(self) -> None:
        if self.d < 1:
            raise DataError(f"d must be >= 1, got {self.d}")
        if self.n_total < 2 * (self.d + 1):
            raise DataError(f"n_total must be >= 2(d+1) = {2 * (self.d + 1)}, got {self.n_total}")
        check_seed(self.seed)
        if self.classes is not None:
            self.classes.validate(self.d)
            expected = WELL_SPECIFIED if self.classes.equal_covariance else MISSPECIFIED
            if self.spec_tag != expected:
                raise DataError(f"class-conditional truth with these covariances is {expected}")
            return
        if self.spec_tag not in SPEC_TAGS:
            raise DataError(f"spec_tag must be one of {SPEC_TAGS}")
        if self.theta_true is None or len(self.theta_true) != self.d + 1:
            raise DataError(f"theta_true must have d+1 = {self.d + 1} entries")
        if not all(math.isfinite(t) for t in self.theta_true):
            raise DataError("theta_true must be finite")
        if not math.isfinite(self.misspec_c):
            raise DataError("misspec_c must be finite")
        self.features.validate(self.d)

    def true_logit(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.classes is not None:
            return self.classes.logit(x)
        theta = np.asarray(self.theta_true, dtype=float)
        eta = theta[0] + x @ theta[1:]
        if self.spec_tag == MISSPECIFIED:
            eta = eta + self.misspec_c * x[:, 0] ** 2
        return eta

    def with_(self, **changes) -> "GeneratorSpec":
        return replace(self, **changes)


@dataclass(frozen=True, eq=False)
class GroundTruth:
    """What the simulation knows and the analyst does not.

    ``generator`` is None for real data, where the only truth is the labels of
    records held back from the analyst.
    """

    generator: Optional[GeneratorSpec]
    full_labels: np.ndarray
    mechanism_tag: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "full_labels", _frozen(np.asarray(self.full_labels, dtype=int)))

    @property
    def spec_tag(self) -> Optional[str]:
        return None if self.generator is None else self.generator.spec_tag

    @property
    def theta_true(self) -> Optional[np.ndarray]:
        """theta_vrai when the logistic family contains the truth, else None."""
        g = self.generator
        if g is None or g.spec_tag != WELL_SPECIFIED:
            return None
        if g.classes is not None:
            return g.classes.linear_theta()
        return np.asarray(g.theta_true, dtype=float)

    @property
    def oracle(self) -> str:
        g = self.generator
        if g is None:
            return "observed labels"
        if g.classes is not None:
            return "class-conditional gaussian log-odds"
        if g.spec_tag == MISSPECIFIED:
            return f"linear predictor + {g.misspec_c:g} * x1^2"
        return "linear predictor"

    def default_probability(self, x: np.ndarray) -> np.ndarray:
        if self.generator is None:
            raise ValueError("no generating law for real data")
        return expit(self.generator.true_logit(x))

    def agrees_with(self, dataset: Dataset) -> bool:
        f = dataset.financed
        return bool(np.array_equal(dataset.labels[f].astype(int), self.full_labels[f]))


def generate_synthetic(spec: GeneratorSpec) -> tuple[Dataset, GroundTruth]:
    """Draw a fully-labelled population; selection is applied later by ``mechanisms``."""
    spec.validate()
    rng = derive_rng(spec.seed, "generate")
    n, d = spec.n_total, spec.d
    if spec.classes is not None:
        m0, m1, c0, c1 = spec.classes.arrays()
        y = (rng.random(n) < spec.classes.prior).astype(int)
        z = rng.standard_normal((n, d))
        x = np.where(y[:, None] == 1,
                     m1 + z @ np.linalg.cholesky(c1).T,
                     m0 + z @ np.linalg.cholesky(c0).T)
    else:
        x = spec.features.sample(rng, n, d)
        if not np.all(np.isfinite(x)):
            raise DataError("feature distribution produced non-finite values")
        y = (rng.random(n) < expit(spec.true_logit(x))).astype(int)
    ids = np.arange(spec.id_offset, spec.id_offset + n, dtype=np.int64)
    data = Dataset.fully_labelled(x, y, ids)
    return data, GroundTruth(spec, y)


# -- CSV ingestion --------------------------------------------------------------

@dataclass(frozen=True)
class CsvSchema:
    label: str
    financed: str
    features: tuple[str, ...]
    id: Optional[str] = None
    keep_rejected_labels: bool = False

    @classmethod
    def from_mapping(cls, m: dict) -> "CsvSchema":
        allowed = {"label", "financed", "features", "id", "keep_rejected_labels"}
        unknown = set(m) - allowed
        if unknown:
            raise DataError(f"unknown schema key(s): {', '.join(sorted(unknown))}")
        for key in ("label", "financed", "features"):
            if key not in m:
                raise DataError(f"schema is missing {key!r}")
        feats = m["features"]
        if isinstance(feats, str) or not feats:
            raise DataError("schema 'features' must be a non-empty list of column names")
        return cls(str(m["label"]), str(m["financed"]), tuple(str(c) for c in feats),
                   None if m.get("id") is None else str(m["id"]), bool(m.get("keep_rejected_labels", False)))

    @classmethod
    def from_file(cls, path) -> "CsvSchema":
        with open(path, encoding="utf-8") as fh:
            return cls.from_mapping(yaml.safe_load(fh) or {})


_TRUE = {"1", "true", "yes", "y", "t"}
_FALSE = {"0", "false", "no", "n", "f"}


def _parse_flag(text: str, row: int) -> bool:
    t = text.strip().lower()
    if t in _TRUE:
        return True
    if t in _FALSE:
        return False
    raise DataError(f"row {row}: financing flag {text!r} is not a boolean")


def _parse_label(text: str, row: int) -> float:
    t = text.strip()
    if t == "":
        return math.nan
    try:
        v = float(t)
    except ValueError:
        raise DataError(f"row {row}: label {text!r} is not numeric") from None
    if v not in (0.0, 1.0):
        raise DataError(f"row {row}: label {text!r} outside {{0,1}}")
    return v


def load_csv(path, schema) -> Dataset:
    """Read a comma-separated UTF-8 file with a header row.

    ``schema`` is a :class:`CsvSchema`, a mapping, or a path to a YAML file
    naming the label, financing, feature and (optional) id columns. Labels of
    non-financed rows are dropped, or kept in ``holdout_labels`` when the
    schema sets ``keep_rejected_labels``.
    """
    if not isinstance(schema, CsvSchema):
        schema = CsvSchema.from_mapping(schema) if isinstance(schema, dict) else CsvSchema.from_file(schema)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError("empty dataset") from None
        rows = [r for r in reader if any(c.strip() for c in r)]
    needed = [schema.label, schema.financed, *schema.features] + ([schema.id] if schema.id else [])
    missing = [c for c in needed if c not in header]
    if missing:
        raise DataError(f"missing column(s): {', '.join(missing)}")
    if not rows:
        raise DataError("empty dataset")
    col = {h: i for i, h in enumerate(header)}
    n, d = len(rows), len(schema.features)
    x = np.empty((n, d))
    labels = np.full(n, np.nan)
    raw = np.full(n, np.nan)
    financed = np.zeros(n, dtype=bool)
    ids = []
    for i, r in enumerate(rows):
        lineno = i + 2
        if len(r) != len(header):
            raise DataError(f"row {lineno}: expected {len(header)} fields, got {len(r)}")
        for j, c in enumerate(schema.features):
            try:
                x[i, j] = float(r[col[c]])
            except ValueError:
                raise DataError(f"row {lineno}: column {c!r} value {r[col[c]]!r} is not numeric") from None
        financed[i] = _parse_flag(r[col[schema.financed]], lineno)
        raw[i] = _parse_label(r[col[schema.label]], lineno)
        if financed[i]:
            if math.isnan(raw[i]):
                raise DataError(f"row {lineno}: financed record without a label")
            labels[i] = raw[i]
        ids.append(r[col[schema.id]] if schema.id else i)
    if not np.all(np.isfinite(x)):
        raise DataError("features contain non-finite values")
    holdout = np.where(financed, np.nan, raw) if schema.keep_rejected_labels else None
    return Dataset(x, labels, financed, np.asarray(ids), feature_names=schema.features, holdout_labels=holdout)


# -- discretization -------------------------------------------------------------

def _bin_indicators(values: np.ndarray, edges: np.ndarray) -> np.ndarray:
    # bin b holds edges[b-1] < v <= edges[b]; bin 0 is the reference level
    idx = np.searchsorted(edges, values, side="left")
    return (idx[:, None] == np.arange(1, len(edges) + 1)[None, :]).astype(float)


def apply_binning(dataset: Dataset, binning: Binning) -> Dataset:
    """Replace the binned columns using previously fitted edges (no refitting)."""
    x = dataset.features
    blocks, names = [], []
    binned = dict(zip(binning.columns, binning.edges))
    for j in range(dataset.d):
        if j in binned:
            edges = binned[j]
            blocks.append(_bin_indicators(x[:, j], edges))
            names += [f"{dataset.feature_names[j]}_bin{b}" for b in range(1, len(edges) + 1)]
        else:
            blocks.append(x[:, [j]])
            names.append(dataset.feature_names[j])
    return replace(dataset, features=np.hstack(blocks), feature_names=tuple(names), binning=binning)


def discretize(dataset: Dataset, bins_per_feature: int, columns: Optional[Sequence[int]] = None) -> Dataset:
    """Equal-frequency binning into reference-coded indicator columns.

    Edges are the ``j / bins`` quantiles (linear interpolation between order
    statistics, numpy's default) of the financed records. Repeated edges are
    merged, so heavily tied columns may yield fewer than ``bins - 1``
    indicators. The returned dataset carries the edges in ``binning`` for
    :func:`apply_binning` on test data.
    """
    if bins_per_feature < 2:
        raise DataError("bins_per_feature must be >= 2")
    columns = tuple(range(dataset.d)) if columns is None else tuple(int(c) for c in columns)
    ref = dataset.x_f if dataset.financed.any() else dataset.features
    probs = np.arange(1, bins_per_feature) / bins_per_feature
    edges = []
    for j in columns:
        col = ref[:, j]
        if np.unique(col).size < bins_per_feature:
            raise DataError(f"column {j}: insufficient distinct values for {bins_per_feature} bins")
        edges.append(np.unique(np.quantile(col, probs, method="linear")))
    return apply_binning(dataset, Binning(columns, tuple(edges), bins_per_feature))
