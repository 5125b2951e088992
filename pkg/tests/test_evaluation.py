from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from reject_inference.data_model import Dataset, FeatureDistribution, GeneratorSpec
from reject_inference.evaluation import (InsufficientReplicationsError, LeakageError, MethodConfig, SweepConfig,
                                         Table1Config, acceptance_sweep, bootstrap_gini_diff, check_disjoint, gini,
                                         monte_carlo_table1, parameter_error, pseudo_true_theta)
from reject_inference.logistic import fit_weighted
from reject_inference.mechanisms import MechanismSpec
from reject_inference.methods import Scorer, generative_method


def gini_oracle(scores, labels):
    # all positive-negative pairs, exact rational arithmetic
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = sum(Fraction(1) if p > q else Fraction(1, 2) if p == q else Fraction(0) for p in pos for q in neg)
    return float(2 * wins / (len(pos) * len(neg)) - 1)


def random_instance(rng):
    n = int(rng.integers(2, 51))
    y = rng.integers(0, 2, n)
    y[0], y[1] = 0, 1
    scores = rng.integers(0, int(rng.integers(1, 12)), n) if rng.random() < 0.5 else rng.normal(size=n)
    return scores.astype(float), y


def test_gini_examples():
    assert gini([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0
    assert gini([0.3] * 6, [0, 1, 0, 1, 1, 0]) == 0.0
    assert gini([0.9, 0.6, 0.4, 0.2], [1, 0, 1, 0]) == 0.5
    assert gini_oracle([0.9, 0.6, 0.4, 0.2], [1, 0, 1, 0]) == 0.5


def test_gini_matches_brute_force_exactly():
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        s, y = random_instance(rng)
        assert gini(s, y) == gini_oracle(s.tolist(), y.tolist())


def test_gini_single_class():
    with pytest.raises(ValueError):
        gini([0.1, 0.2], [1, 1])


def test_gini_weights_equal_repetition():
    rng = np.random.default_rng(1)
    s, y = rng.normal(size=30), rng.integers(0, 2, 30)
    w = rng.integers(0, 4, 30)
    if y[w > 0].min() == y[w > 0].max():
        w[:] = 1
    assert gini(s, y, w) == pytest.approx(gini(np.repeat(s, w), np.repeat(y, w)), abs=1e-15)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(-5, 5), st.integers(0, 1)), min_size=2, max_size=40))
def test_gini_invariances(pairs):
    s = np.array([p[0] for p in pairs], dtype=float)
    y = np.array([p[1] for p in pairs])
    if y.min() == y.max():
        return
    g = gini(s, y)
    # strictly increasing transform, ties preserved
    assert gini(np.exp(s) * 3 + 1, y) == g
    assert gini(-s, y) == -g
    assert gini(s, 1 - y) == -g


def test_bootstrap_identical_scores():
    rng = np.random.default_rng(0)
    s, y = rng.normal(size=300), rng.integers(0, 2, 300)
    d = bootstrap_gini_diff(s, s, y, B=500)
    assert d.diff == 0 and d.lo == 0 and d.hi == 0 and not d.significant


def test_bootstrap_detects_perfect_scorer():
    rng = np.random.default_rng(1)
    y = rng.integers(0, 2, 500)
    diff, (lo, hi), sig = bootstrap_gini_diff(rng.random(500), y + 0.1 * rng.random(500), y, B=1000, seed=3)
    assert sig and hi < 0 and lo < diff < hi


def test_bootstrap_deterministic_and_seeded():
    rng = np.random.default_rng(2)
    y = rng.integers(0, 2, 200)
    a, b = rng.random(200) + 0.3 * y, rng.random(200)
    assert bootstrap_gini_diff(a, b, y, seed=5) == bootstrap_gini_diff(a, b, y, seed=5)
    assert bootstrap_gini_diff(a, b, y, seed=5) != bootstrap_gini_diff(a, b, y, seed=6)
    with pytest.raises(ValueError):
        bootstrap_gini_diff(a, b, y, B=100)


def test_parameter_error():
    theta = np.array([0.5, -1.0, 2.0])
    assert parameter_error(theta, theta).l2 == 0.0
    e = parameter_error(theta, [0.0, 0.0, 2.5])
    assert e.bias.tolist() == [0.5, -1.0, -0.5]
    assert e.linf == 1.0 and e.l2 == pytest.approx(np.sqrt(1.5))
    assert parameter_error([0.0, 0.0, 2.5], theta).bias.tolist() == [-0.5, 1.0, 0.5]


def test_parameter_error_refuses_generative():
    rng = np.random.default_rng(0)
    data = Dataset.fully_labelled(rng.normal(size=(40, 2)), np.arange(40) % 2)
    with pytest.raises(TypeError):
        parameter_error(generative_method(data), np.zeros(3))
    sc = Scorer("financed_only", fit_weighted(data.features, data.labels))
    assert parameter_error(sc, sc.theta).linf == 0


def test_pseudo_true_reference_is_cached_and_shifted():
    gen = GeneratorSpec(1000, 2, "misspecified", (-1.0, 1.0, 1.0))
    a = pseudo_true_theta(gen, 200_000, 1)
    assert pseudo_true_theta(gen, 200_000, 1) is a
    theta, cov = a
    # the quadratic term in x1 is absorbed by the intercept and slopes: theta_opt != theta_true
    assert np.max(np.abs(theta - np.array([-1.0, 1, 1]))) > 0.1
    assert np.all(np.linalg.eigvalsh(cov) > 0)


# -- bias / variance grid (table1) ----------------------------------------------

@pytest.fixture(scope="module")
def table1():
    return monte_carlo_table1(Table1Config(seed=3))


def test_table1_cells(table1):
    assert table1.cell("well_specified", "MAR").bias_equal
    assert not table1.cell("well_specified", "MNAR").bias_equal
    assert not table1.cell("misspecified", "MAR").bias_equal
    assert not table1.cell("misspecified", "MNAR").bias_equal
    assert all(not c.variance_equal for c in table1.cells.values())
    assert all(abs(c.mean_acceptance - 0.5) < 0.01 for c in table1.cells.values())
    assert table1.matches_expected_pattern()


def test_table1_reproducible(table1):
    assert monte_carlo_table1(Table1Config(seed=3)).to_csv() == table1.to_csv()


def test_table1_csv_layout(table1):
    lines = table1.to_csv().splitlines()
    assert lines[0] == "cell,bias_equal,variance_ratio,details"
    assert [l.split(",")[0] for l in lines[1:]] == ["well_specified|MAR", "well_specified|MNAR",
                                                     "misspecified|MAR", "misspecified|MNAR"]


def test_table1_needs_replications():
    with pytest.raises(InsufficientReplicationsError, match="insufficient replications"):
        monte_carlo_table1(Table1Config(replications=1))


# -- sweep ---------------------------------------------------------------------------

def small_sweep(**kw):
    gen = GeneratorSpec(1500, 2, "misspecified", (-1.0, 1.0, 1.0), misspec_c=0.5,
                        features=FeatureDistribution(rho=0.2))
    base = dict(generator=gen, mechanism=MechanismSpec("MAR_stochastic", 1.0, floor=0.1),
                methods=tuple(MethodConfig(m) for m in ("financed_only", "oracle_full", "ideal_reweighting",
                                                        "augmentation", "parceling", "generative")),
                rates=(1.0, 0.6, 0.3), replications=2, n_test=2000, bootstrap=200, seed=4)
    base.update(kw)
    return SweepConfig(**base)


@pytest.fixture(scope="module")
def sweep():
    return acceptance_sweep(small_sweep())


def test_sweep_rows_sorted_and_complete(sweep):
    keys = [(r.method, r.rate) for r in sweep.rows]
    assert keys == sorted(keys) and len(keys) == 6 * 3
    for r in sweep.rows:
        assert r.lo <= r.hi and -1 <= r.gini <= 1 and r.replications == 2


def test_sweep_full_acceptance_collapse(sweep):
    base = sweep.row("financed_only", 1.0).gini
    for m in ("oracle_full", "ideal_reweighting", "augmentation", "parceling"):
        assert abs(sweep.row(m, 1.0).gini - base) < 1e-6
        assert sweep.row(m, 1.0).param_l2 < 1e-6
    assert np.isnan(sweep.row("generative", 1.0).param_l2)


def test_sweep_deterministic_and_parallel_equal(sweep):
    assert acceptance_sweep(small_sweep(jobs=2)).to_csv() == sweep.to_csv()


def test_sweep_methods_do_not_shift_each_other(sweep):
    only = acceptance_sweep(small_sweep(methods=(MethodConfig("parceling"),)))
    for rate in (1.0, 0.6, 0.3):
        assert only.row("parceling", rate).gini == sweep.row("parceling", rate).gini


def test_sweep_single_row():
    res = acceptance_sweep(small_sweep(methods=(MethodConfig("financed_only"),), rates=(1.0,), replications=1))
    assert len(res.rows) == 1 and res.to_csv().count("\n") == 2


def test_leakage_refused():
    x = np.zeros((3, 1))
    a = Dataset.fully_labelled(x, [0, 1, 0], ids=np.array([1, 2, 3]))
    b = Dataset.fully_labelled(x, [0, 1, 0], ids=np.array([3, 4, 5]))
    with pytest.raises(LeakageError):
        check_disjoint(a, b)
    check_disjoint(a, Dataset.fully_labelled(x, [0, 1, 0], ids=np.array([7, 8, 9])))


def test_sweep_config_errors():
    with pytest.raises(InsufficientReplicationsError):
        acceptance_sweep(small_sweep(replications=0))
    with pytest.raises(ValueError):
        acceptance_sweep(small_sweep(bootstrap=50))
