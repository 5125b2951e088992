import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import multivariate_normal

from reject_inference.generative import EMConfig, EMError, GenerativeModel, fit_em, posterior
from reject_inference.logistic import predict_proba


def gaussian_problem(rng, n_f=120, n_nf=150, d=2):
    means = rng.normal(scale=1.5, size=(2, d))
    y = (rng.random(n_f + n_nf) < rng.uniform(0.2, 0.8)).astype(int)
    a = rng.normal(size=(2, d, d))
    x = means[y] + np.einsum("nij,nj->ni", a[y], rng.normal(size=(n_f + n_nf, d)))
    return x[:n_f], y[:n_f], x[n_f:]


def one_d(prior, m0, m1, v0=1.0, v1=1.0):
    return GenerativeModel(prior, np.array([m0]), np.array([m1]), np.array([[v0]]), np.array([[v1]]))


def test_no_unlabelled_data_gives_closed_form():
    rng = np.random.default_rng(0)
    x, y, _ = gaussian_problem(rng, n_f=300, n_nf=0)
    m = fit_em(x, y, np.empty((0, 2)))
    assert m.prior == pytest.approx(y.mean(), abs=1e-12)
    for k, (mean, cov) in enumerate(((m.mean0, m.cov0), (m.mean1, m.cov1))):
        xs = x[y == k]
        assert np.allclose(mean, xs.mean(axis=0), atol=1e-12)
        assert np.allclose(cov, np.cov(xs, rowvar=False, bias=True) + m.ridge_floor * np.eye(2), atol=1e-12)
    assert m.converged


@pytest.mark.parametrize("seed", range(100))
def test_em_trace_non_decreasing(seed):
    rng = np.random.default_rng(seed)
    d = 1 + seed % 3
    x_f, y_f, x_nf = gaussian_problem(rng, n_f=int(rng.integers(10, 80)), n_nf=int(rng.integers(0, 200)), d=d)
    if np.bincount(y_f, minlength=2).min() < 2:
        y_f[:2], y_f[2:4] = 0, 1
    m = fit_em(x_f, y_f, x_nf, equal_covariance=bool(seed % 2))
    trace = np.array(m.loglik_trace)
    assert np.all(np.diff(trace) >= -1e-9)
    assert trace[-1] >= trace[0]
    for c in (m.cov0, m.cov1):
        assert np.linalg.eigvalsh(c).min() >= m.ridge_floor * (1 - 1e-9)


def test_symmetric_one_dimensional_problem():
    rng = np.random.default_rng(3)
    half = rng.normal(1.0, 0.8, 50)
    x_f = np.concatenate([-half, half])[:, None]
    y_f = np.repeat([0, 1], 50)
    u = rng.normal(1.0, 0.8, 80)
    x_nf = np.concatenate([-u, u])[:, None]
    m = fit_em(x_f, y_f, x_nf)
    assert abs(m.prior - 0.5) < 1e-6
    assert abs(m.mean0[0] + m.mean1[0]) < 1e-6
    assert abs(m.cov0[0, 0] - m.cov1[0, 0]) < 1e-6


def test_posterior_equidistant_point():
    m = GenerativeModel(0.5, np.array([-1.0, 2]), np.array([1.0, 0]), np.diag([2.0, 1]), np.diag([2.0, 1]))
    assert posterior(m, np.array([0.0, 1.0])) == pytest.approx(0.5, abs=1e-15)


def test_prior_domination():
    m = one_d(1 - 1e-9, -1, 1)
    for x in np.linspace(-2, 2, 9):
        assert posterior(m, np.array([x])) > 0.999


def test_posterior_against_density_ratio():
    m = one_d(0.5, -1, 1)
    f1 = multivariate_normal(1, 1).pdf(0.3)
    f0 = multivariate_normal(-1, 1).pdf(0.3)
    oracle = f1 / (f1 + f0)
    got = posterior(m, np.array([0.3]))
    assert got == pytest.approx(oracle, abs=1e-14)
    assert got == pytest.approx(1 / (1 + math.exp(-0.6)), abs=1e-14)
    assert abs(got - 0.645656) < 1e-6


def test_posterior_dimension_mismatch():
    with pytest.raises(ValueError):
        posterior(one_d(0.5, 0, 1), np.array([1.0, 2.0]))


def test_equal_covariance_posterior_is_logistic():
    rng = np.random.default_rng(5)
    x_f, y_f, x_nf = gaussian_problem(rng, d=3)
    m = fit_em(x_f, y_f, x_nf, equal_covariance=True)
    assert np.array_equal(m.cov0, m.cov1)
    x = rng.normal(scale=3, size=(1000, 3))
    assert np.max(np.abs(posterior(m, x) - predict_proba(m.induced_theta(), x))) < 1e-6


def test_unequal_covariances_have_no_induced_theta():
    with pytest.raises(ValueError):
        one_d(0.5, 0, 1, 1, 2).induced_theta()


def test_rejects_degenerate_inputs():
    x = np.arange(6.0)[:, None]
    with pytest.raises(EMError, match="at least 2"):
        fit_em(x, [0, 0, 0, 0, 0, 1])
    with pytest.raises(EMError, match="finite"):
        fit_em(x, [0, 0, 0, 1, 1, 1], np.array([[np.nan]]))


def test_deterministic_and_restarts_never_worse():
    rng = np.random.default_rng(8)
    x_f, y_f, x_nf = gaussian_problem(rng)
    a, b = fit_em(x_f, y_f, x_nf), fit_em(x_f, y_f, x_nf)
    assert a.loglik_trace == b.loglik_trace and np.array_equal(a.cov1, b.cov1)
    c = fit_em(x_f, y_f, x_nf, EMConfig(restarts=3, seed=1))
    assert c.loglik_trace[-1] >= a.loglik_trace[-1]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_posterior_in_unit_interval(seed):
    rng = np.random.default_rng(seed)
    x_f, y_f, x_nf = gaussian_problem(rng, n_f=40, n_nf=40)
    if np.bincount(y_f, minlength=2).min() < 2:
        return
    m = fit_em(x_f, y_f, x_nf)
    p = posterior(m, rng.normal(scale=10, size=(50, 2)))
    assert np.all((p >= 0) & (p <= 1))
    assert 0 < m.prior < 1
