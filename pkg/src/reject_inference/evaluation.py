"""Metrics and Monte Carlo harnesses.

* :func:`gini` -- 2 AUC - 1 with the Mann-Whitney rank statistic, ties 1/2.
* :func:`bootstrap_gini_diff` -- paired bootstrap over test rows.
* :func:`monte_carlo_table1` -- bias / variance verdicts of the financed-only
  estimator in the 2x2 grid {well, mis}-specified x {MAR, MNAR}.
* :func:`acceptance_sweep` -- test Gini of every method as selection tightens.
"""

from __future__ import annotations

import csv
import functools
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .data_model import (MISSPECIFIED, WELL_SPECIFIED, CsvSchema, Dataset, GeneratorSpec,
                         GroundTruth, FeatureDistribution, generate_synthetic, load_csv)
from .generative import EMConfig
from .logistic import FitOptions, LogisticModel, covariance, fit_weighted
from .mechanisms import MechanismSpec, fit_pilot_scorer, sweep_mechanism, apply_mechanism
from .methods import MethodError, Scorer, oracle_full, run_method
from .seeding import derive_rng, derive_seed

MIN_REPLICATIONS = 10
VARIANCE_BAND = (0.9, 1.1)
BIAS_Z = 3.0
REAL_DATA_CAVEAT = (
    "real-data mode: test Gini is measured on held-out FINANCED records only; "
    "rejected applicants have no observed outcome"
)


class InsufficientReplicationsError(ValueError):
    pass


class LeakageError(ValueError):
    pass


# -- Gini -------------------------------------------------------------------------

def _grouped(scores, labels):
    order = np.argsort(scores, kind="mergesort")
    s = scores[order]
    starts = np.flatnonzero(np.r_[True, s[1:] != s[:-1]])
    return order, starts


def gini(scores, labels, weights=None) -> float:
    """2 AUC - 1, AUC = P(score of a defaulter > score of a non-defaulter), ties counted 1/2.

    ``weights`` are record multiplicities (e.g. bootstrap counts). Higher
    scores are meant to indicate defaulters (y = 1).
    """
    s = np.asarray(scores, dtype=float).reshape(-1)
    y = np.asarray(labels, dtype=float).reshape(-1)
    if s.shape != y.shape:
        raise ValueError("scores and labels must have the same length")
    w = np.ones_like(s) if weights is None else np.asarray(weights, dtype=float)
    pos_w = w * y
    neg_w = w * (1 - y)
    P, N = pos_w.sum(), neg_w.sum()
    if P == 0 or N == 0:
        raise ValueError("gini needs both classes in the labels")
    order, starts = _grouped(s, y)
    pos_g = np.add.reduceat(pos_w[order], starts)
    neg_g = np.add.reduceat(neg_w[order], starts)
    below = np.cumsum(neg_g) - neg_g
    u = np.sum(pos_g * (below + 0.5 * neg_g))
    # (2U - PN) / PN: exact numerator for integer multiplicities, one rounding
    return float((2.0 * u - P * N) / (P * N))


def _batched_gini(scores, labels, counts) -> np.ndarray:
    """Gini for every row of a (B, n) multiplicity matrix; NaN where a class is absent."""
    order, starts = _grouped(scores, labels)
    y = labels[order].astype(float)
    c = counts[:, order].astype(float)
    pos_g = np.add.reduceat(c * y, starts, axis=1)
    neg_g = np.add.reduceat(c * (1 - y), starts, axis=1)
    below = np.cumsum(neg_g, axis=1) - neg_g
    u = np.sum(pos_g * (below + 0.5 * neg_g), axis=1)
    P, N = pos_g.sum(axis=1), neg_g.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where((P > 0) & (N > 0), (2.0 * u - P * N) / (P * N), np.nan)


def _bootstrap_counts(n: int, B: int, seed: int, chunk: int = 100):
    rng = derive_rng(seed, "bootstrap")
    probs = np.full(n, 1.0 / n)
    done = 0
    while done < B:
        m = min(chunk, B - done)
        yield rng.multinomial(n, probs, size=m)
        done += m


@dataclass(frozen=True)
class GiniDiff:
    diff: float
    lo: float
    hi: float
    significant: bool

    def __iter__(self):
        return iter((self.diff, (self.lo, self.hi), self.significant))


def bootstrap_gini_diff(scores_a, scores_b, labels, B: int = 1000, seed: int = 0) -> GiniDiff:
    """gini(a) - gini(b) with a paired percentile-bootstrap 95% interval.

    The same resampled test rows are used for both scorers. Significant iff
    the interval excludes 0.
    """
    if B < 200:
        raise ValueError("B must be >= 200")
    a = np.asarray(scores_a, dtype=float)
    b = np.asarray(scores_b, dtype=float)
    y = np.asarray(labels, dtype=float)
    diff = gini(a, y) - gini(b, y)
    draws = [_batched_gini(a, y, c) - _batched_gini(b, y, c) for c in _bootstrap_counts(y.shape[0], B, seed)]
    draws = np.concatenate(draws)
    draws = draws[np.isfinite(draws)]
    lo, hi = np.percentile(draws, [2.5, 97.5])
    return GiniDiff(float(diff), float(lo), float(hi), bool(lo > 0 or hi < 0))


# -- parameter error -------------------------------------------------------------

@dataclass(frozen=True)
class ParameterError:
    l2: float
    linf: float
    bias: np.ndarray  # signed, estimate - reference, per coefficient


def parameter_error(scorer, reference_theta) -> ParameterError:
    if isinstance(scorer, Scorer):
        if scorer.theta is None:
            raise TypeError(f"parameter_error applies to logistic scorers, not {scorer.method!r}")
        theta = scorer.theta
    elif isinstance(scorer, LogisticModel):
        theta = scorer.theta
    else:
        theta = np.asarray(scorer, dtype=float)
    ref = np.asarray(reference_theta, dtype=float)
    if theta.shape != ref.shape:
        raise ValueError("reference has the wrong dimension")
    bias = theta - ref
    return ParameterError(float(np.linalg.norm(bias)), float(np.max(np.abs(bias))), bias)


@functools.lru_cache(maxsize=16)
def pseudo_true_theta(generator: GeneratorSpec, reference_n: int = 1_000_000, seed: int = 0):
    """theta_opt: the logistic fit on one large unselected sample, with its sandwich covariance."""
    data, truth = generate_synthetic(replace(generator, n_total=reference_n, seed=derive_seed(seed, "reference")))
    model = fit_weighted(data.features, truth.full_labels)
    if not model.converged:
        raise MethodError(f"reference fit failed: {model.diagnostic}")
    cov = covariance(model, data.features, truth.full_labels).sandwich
    return model.theta.copy(), cov


# -- bias / variance grid (table1) ----------------------------------------------

@dataclass(frozen=True)
class Table1Config:
    n: int = 5000
    replications: int = 200
    d: int = 2
    theta_true: tuple[float, ...] = (-1.0, 1.0, 1.0)
    misspec_c: float = 1.0
    features: FeatureDistribution = field(default_factory=FeatureDistribution)
    acceptance_rate: float = 0.5
    floor: float = 0.05
    steepness: float = 10.0
    mnar_default_penalty: float = 0.3
    pilot_fraction: float = 0.1
    reference_n: int = 1_000_000
    seed: int = 0
    jobs: int = 1


ARMS = (WELL_SPECIFIED, MISSPECIFIED)
MECHS = ("MAR", "MNAR")
_MECH_KIND = {"MAR": "MAR_stochastic", "MNAR": "MNAR"}


@dataclass(frozen=True)
class CellVerdict:
    spec_tag: str
    mechanism: str
    bias_equal: bool
    bias: np.ndarray
    bias_se: np.ndarray
    max_abs_bias: float
    max_abs_t: float
    variance_ratio: float
    variance_equal: bool
    replications: int
    n: int
    mean_acceptance: float

    @property
    def name(self) -> str:
        return f"{self.spec_tag}|{self.mechanism}"


@dataclass(frozen=True)
class Table1Verdict:
    cells: dict  # (spec_tag, mechanism) -> CellVerdict
    config: Table1Config

    def cell(self, spec_tag: str, mechanism: str) -> CellVerdict:
        return self.cells[(spec_tag, mechanism)]

    def matches_expected_pattern(self) -> bool:
        """Theta equality only for (well-specified, MAR); covariance equality nowhere."""
        return all(
            c.bias_equal == (key == (WELL_SPECIFIED, "MAR")) and not c.variance_equal
            for key, c in self.cells.items()
        )

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["cell", "bias_equal", "variance_ratio", "details"])
        for arm in ARMS:
            for mech in MECHS:
                c = self.cells[(arm, mech)]
                details = ";".join([
                    f"variance_equal={c.variance_equal}",
                    f"max_abs_bias={_fmt(c.max_abs_bias)}",
                    f"max_abs_t={_fmt(c.max_abs_t)}",
                    "bias=" + " ".join(_fmt(b) for b in c.bias),
                    f"replications={c.replications}",
                    f"n={c.n}",
                    f"mean_acceptance={_fmt(c.mean_acceptance)}",
                ])
                w.writerow([c.name, c.bias_equal, _fmt(c.variance_ratio), details])
        return buf.getvalue()


def _fmt(x: float) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    return f"{x:.10g}"


def _table1_generator(cfg: Table1Config, arm: str) -> GeneratorSpec:
    return GeneratorSpec(n_total=cfg.n, d=cfg.d, spec_tag=arm, theta_true=tuple(cfg.theta_true),
                         misspec_c=cfg.misspec_c, features=cfg.features, seed=0)


def _table1_replication(cfg: Table1Config, arm: str, r: int, scorer: LogisticModel):
    gen = replace(_table1_generator(cfg, arm), seed=derive_seed(cfg.seed, "table1", arm, "train", r))
    data, truth = generate_synthetic(gen)
    full = fit_weighted(data.features, truth.full_labels)
    if not full.converged:
        raise MethodError(f"table1 {arm} replication {r}: full-sample fit failed ({full.diagnostic})")
    out = {"full": full.theta, "n": data.n}
    for mech in MECHS:
        spec = MechanismSpec(_MECH_KIND[mech], cfg.acceptance_rate, scorer=scorer,
                             mnar_default_penalty=cfg.mnar_default_penalty, floor=cfg.floor,
                             steepness=cfg.steepness, seed=derive_seed(cfg.seed, "table1", arm, mech, r))
        masked, _ = apply_mechanism(data, spec)
        fin = fit_weighted(masked.x_f, masked.y_f)
        if not fin.converged:
            raise MethodError(f"table1 {arm}/{mech} replication {r}: financed-only fit failed ({fin.diagnostic})")
        out[mech] = (fin.theta, int(masked.financed.sum()))
    return out


def _run_table1_task(args):
    return _table1_replication(*args)


def _scaled_trace(thetas: np.ndarray, sizes: np.ndarray) -> float:
    z = (thetas - thetas.mean(axis=0)) * np.sqrt(sizes)[:, None]
    return float(np.trace(np.atleast_2d(np.cov(z, rowvar=False))))


def monte_carlo_table1(config: Table1Config) -> Table1Verdict:
    """Monte Carlo check of whether theta_opt^f equals theta_opt and Sigma^f equals Sigma.

    Per cell: bias_equal iff every coefficient of mean(theta_f) - theta_ref lies
    within 3 standard errors of zero (the standard error includes the
    reference's own sampling error in the misspecified arm). variance_equal iff
    tr Cov(sqrt(n_f) theta_f) / tr Cov(sqrt(n) theta_full) lies in [0.9, 1.1].
    """
    cfg = config
    if cfg.replications < MIN_REPLICATIONS:
        raise InsufficientReplicationsError(
            f"insufficient replications: {cfg.replications} < {MIN_REPLICATIONS} needed for a 3-SE bias test"
        )
    refs = {}
    scorers = {}
    for arm in ARMS:
        gen = _table1_generator(cfg, arm)
        gen.validate()
        if arm == WELL_SPECIFIED:
            refs[arm] = (np.asarray(cfg.theta_true, dtype=float), np.zeros((cfg.d + 1, cfg.d + 1)))
        else:
            refs[arm] = pseudo_true_theta(gen, cfg.reference_n, derive_seed(cfg.seed, "table1", arm))
        scorers[arm] = fit_pilot_scorer(gen, cfg.pilot_fraction, derive_seed(cfg.seed, "table1", arm))

    tasks = [(cfg, arm, r, scorers[arm]) for arm in ARMS for r in range(cfg.replications)]
    if cfg.jobs > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            results = list(pool.map(_run_table1_task, tasks, chunksize=8))
    else:
        results = [_run_table1_task(t) for t in tasks]

    cells = {}
    R = cfg.replications
    for i, arm in enumerate(ARMS):
        reps = results[i * R:(i + 1) * R]
        full = np.array([o["full"] for o in reps])
        full_trace = _scaled_trace(full, np.array([o["n"] for o in reps], dtype=float))
        ref, ref_cov = refs[arm]
        for mech in MECHS:
            thetas = np.array([o[mech][0] for o in reps])
            sizes = np.array([o[mech][1] for o in reps], dtype=float)
            bias = thetas.mean(axis=0) - ref
            se = np.sqrt(thetas.var(axis=0, ddof=1) / R + np.diag(ref_cov))
            t = np.abs(bias) / se
            ratio = _scaled_trace(thetas, sizes) / full_trace
            cells[(arm, mech)] = CellVerdict(
                arm, mech, bool(np.all(t <= BIAS_Z)), bias, se, float(np.max(np.abs(bias))),
                float(np.max(t)), ratio, bool(VARIANCE_BAND[0] <= ratio <= VARIANCE_BAND[1]), R, cfg.n,
                float(sizes.mean() / cfg.n))
    return Table1Verdict(cells, cfg)


# -- acceptance-rate sweep --------------------------------------------------------

@dataclass(frozen=True)
class MethodConfig:
    name: str
    k_bands: int = 10
    w_max: float = 100.0
    inflation: float = 1.25
    em: EMConfig = field(default_factory=EMConfig)


@dataclass(frozen=True)
class CsvSource:
    path: str
    schema: CsvSchema
    test_fraction: float = 0.3


@dataclass(frozen=True)
class SweepConfig:
    generator: Optional[GeneratorSpec]
    mechanism: MechanismSpec
    methods: tuple[MethodConfig, ...]
    rates: tuple[float, ...]
    replications: int = 1
    n_test: int = 10000
    bootstrap: int = 1000
    pilot_fraction: float = 0.1
    ridge: float = 0.0
    seed: int = 0
    csv_source: Optional[CsvSource] = None
    jobs: int = 1


@dataclass(frozen=True)
class SweepRow:
    method: str
    rate: float
    gini: float
    lo: float
    hi: float
    param_l2: float  # NaN for non-logistic methods
    replications: int


@dataclass(frozen=True)
class SweepResult:
    rows: tuple[SweepRow, ...]
    seed: int
    real_data: bool = False

    def row(self, method: str, rate: float) -> SweepRow:
        for r in self.rows:
            if r.method == method and math.isclose(r.rate, rate):
                return r
        raise KeyError((method, rate))

    @property
    def methods(self) -> list[str]:
        return sorted({r.method for r in self.rows})

    @property
    def rates(self) -> list[float]:
        return sorted({r.rate for r in self.rows})

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "rate", "gini", "lo", "hi", "param_l2"])
        for r in self.rows:
            w.writerow([r.method, _fmt(r.rate), _fmt(r.gini), _fmt(r.lo), _fmt(r.hi), _fmt(r.param_l2)])
        return buf.getvalue()


@dataclass(frozen=True, eq=False)
class _Replicate:
    train: Dataset
    truth: GroundTruth
    scorer: LogisticModel


def _simulated_replicate(cfg: SweepConfig, r: int) -> _Replicate:
    gen = replace(cfg.generator, seed=derive_seed(cfg.seed, "train", r), id_offset=0)
    train, truth = generate_synthetic(gen)
    scorer = fit_pilot_scorer(gen, cfg.pilot_fraction, derive_seed(cfg.seed, "pilot", r), ridge=cfg.ridge)
    return _Replicate(train, truth, scorer)


def _csv_split(cfg: SweepConfig):
    """Split the financed records of the file into train / pilot / test sets (test fixed across replications)."""
    data = load_csv(cfg.csv_source.path, cfg.csv_source.schema)
    fin = np.flatnonzero(data.financed)
    rng = derive_rng(cfg.seed, "csv-test-split")
    perm = rng.permutation(fin)
    n_test = int(round(cfg.csv_source.test_fraction * fin.size))
    test_idx, rest = np.sort(perm[:n_test]), perm[n_test:]
    x, y = data.features, data.labels
    test = Dataset.fully_labelled(x[test_idx], y[test_idx], data.ids[test_idx], feature_names=data.feature_names)
    return data, test, rest


def _csv_replicate(cfg: SweepConfig, data: Dataset, rest: np.ndarray, r: int) -> _Replicate:
    rng = derive_rng(cfg.seed, "csv-pilot-split", r)
    perm = rng.permutation(rest)
    n_pilot = max(2 * (data.d + 1), int(round(cfg.pilot_fraction * perm.size)))
    pilot_idx, train_idx = perm[:n_pilot], np.sort(perm[n_pilot:])
    x, y = data.features, data.labels
    scorer = fit_weighted(x[pilot_idx], y[pilot_idx], ridge=cfg.ridge)
    if not scorer.converged:
        raise MethodError(f"pilot scorer did not converge: {scorer.diagnostic}")
    train = Dataset.fully_labelled(x[train_idx], y[train_idx], data.ids[train_idx], feature_names=data.feature_names)
    return _Replicate(train, GroundTruth(None, y[train_idx].astype(int)), scorer)


def _method_scorer(m: MethodConfig, point, rep: _Replicate, cfg: SweepConfig, r: int) -> Scorer:
    opts = FitOptions(ridge=cfg.ridge)
    seed = derive_seed(cfg.seed, "method", m.name, r, point.rate)
    try:
        return run_method(m.name, point.dataset, truth=rep.truth, propensities=point.propensities,
                          options=opts, k_bands=m.k_bands, w_max=m.w_max, inflation=m.inflation,
                          seed=seed, em=m.em)
    except (MethodError, ValueError, np.linalg.LinAlgError) as exc:
        raise MethodError(f"method {m.name!r} failed at rate {point.rate:g}, replication {r}: {exc}") from exc


def _sweep_replication(cfg: SweepConfig, r: int, rep: _Replicate, x_test: np.ndarray):
    oracle_theta = oracle_full(rep.train, rep.truth, FitOptions(ridge=cfg.ridge)).theta
    spec = replace(cfg.mechanism, scorer=rep.scorer, seed=derive_seed(cfg.seed, "mechanism", r))
    points = sweep_mechanism(rep.train, spec, sorted(cfg.rates, reverse=True), rep.truth.full_labels)
    logits, dists = {}, {}
    for point in points:
        for m in cfg.methods:
            sc = _method_scorer(m, point, rep, cfg, r)
            key = (m.name, point.rate)
            logits[key] = sc.logit(x_test)
            dists[key] = parameter_error(sc, oracle_theta).l2 if sc.theta is not None else math.nan
    return logits, dists


def check_disjoint(train: Dataset, test: Dataset) -> None:
    """Refuse a train/test pair that shares record ids."""
    shared = np.intersect1d(train.ids, test.ids)
    if shared.size:
        raise LeakageError(f"train and test sets share {shared.size} record id(s), e.g. {shared[0]!r}")


def _run_sweep_task(args):
    return _sweep_replication(*args)


def acceptance_sweep(config: SweepConfig) -> SweepResult:
    """Test Gini, bootstrap 95% interval and parameter distance to the oracle per (method, rate).

    Each replication draws a training population, masks it at every rate
    with nested selections, and fits every method. The test set is drawn once
    and shared, so the bootstrap resamples the same rows for every method;
    the reported Gini and its interval refer to the mean over replications.
    """
    cfg = config
    if cfg.replications < 1:
        raise InsufficientReplicationsError("the sweep needs at least one replication")
    if cfg.bootstrap < 200:
        raise ValueError("bootstrap must be >= 200")
    if len({m.name for m in cfg.methods}) != len(cfg.methods):
        raise ValueError("duplicate method names")
    real = cfg.csv_source is not None
    if real:
        data, test, rest = _csv_split(cfg)
        reps = [_csv_replicate(cfg, data, rest, r) for r in range(cfg.replications)]
        x_test, y_test = test.features, test.y_f
    else:
        test_gen = replace(cfg.generator, n_total=cfg.n_test, seed=derive_seed(cfg.seed, "test"),
                           id_offset=cfg.generator.n_total)
        test, test_truth = generate_synthetic(test_gen)
        x_test, y_test = test.features, test_truth.full_labels
        reps = [_simulated_replicate(cfg, r) for r in range(cfg.replications)]
    for rep in reps:
        check_disjoint(rep.train, test)

    tasks = [(cfg, r, rep, x_test) for r, rep in enumerate(reps)]
    if cfg.jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            per_rep = list(pool.map(_run_sweep_task, tasks))
    else:
        per_rep = [_run_sweep_task(t) for t in tasks]
    logits = {}  # (method, rate) -> test log-odds, one array per replication
    dists = {}
    for rep_logits, rep_dists in per_rep:
        for key in rep_logits:
            logits.setdefault(key, []).append(rep_logits[key])
            dists.setdefault(key, []).append(rep_dists[key])

    keys = sorted(logits)
    y = np.asarray(y_test, dtype=float)
    point_est = {k: float(np.mean([gini(s, y) for s in logits[k]])) for k in keys}
    boot = {k: [] for k in keys}
    for counts in _bootstrap_counts(y.shape[0], cfg.bootstrap, derive_seed(cfg.seed, "sweep-bootstrap")):
        for k in keys:
            boot[k].append(np.mean([_batched_gini(s, y, counts) for s in logits[k]], axis=0))
    rows = []
    for k in keys:
        b = np.concatenate(boot[k])
        lo, hi = np.percentile(b[np.isfinite(b)], [2.5, 97.5])
        rows.append(SweepRow(k[0], k[1], point_est[k], float(lo), float(hi), float(np.mean(dists[k])),
                             cfg.replications))
    return SweepResult(tuple(rows), cfg.seed, real)
