import math

import numpy as np
import pytest
from hypothesis import assume, given, strategies as st
from numpy.testing import assert_allclose
from scipy.special import gammaln

from conftest import GAUSS_GRID, builtin_cases
from statmanifold import family as F
from statmanifold.errors import BasePointMismatch, DegeneracyError, DimensionError
from statmanifold.expr import Expression
from statmanifold.metric import (FisherMatrix, fisher_matrix, fisher_matrix_hessian, from_entries,
                                 inner_product, inverse_metric, metric_derivative, require_same_point)
from statmanifold.support import Interval


@pytest.mark.parametrize("mu, s", GAUSS_GRID)
def test_gaussian_metric(gauss, mu, s):
    g = fisher_matrix(gauss, [mu, s])
    assert_allclose(g.entries, np.diag([1 / s ** 2, 2 / s ** 2]), atol=1e-6)
    assert np.array_equal(g.entries, g.entries.T)


@pytest.mark.parametrize("theta", [-1.0, 0.0, 1.0, 2.5])
def test_poisson_metric_series_oracle(pois, theta):
    k = np.arange(400)
    p = np.exp(k * theta - math.exp(theta) - gammaln(k + 1))
    var = np.sum(p * (k - np.sum(p * k)) ** 2)
    assert fisher_matrix(pois, [theta]).entries[0, 0] == pytest.approx(var, rel=1e-12)
    assert fisher_matrix(pois, [theta]).entries[0, 0] == pytest.approx(math.exp(theta), rel=1e-12)


@pytest.mark.parametrize("p", [0.1, 0.5, 0.77])
def test_bernoulli_metric(p):
    assert fisher_matrix(F.bernoulli(), [p]).entries[0, 0] == pytest.approx(1 / (p * (1 - p)), rel=1e-12)


def test_hessian_form_examples(gauss, pois):
    assert_allclose(fisher_matrix_hessian(gauss, [0.0, 1.0]).entries, np.diag([1.0, 2.0]), atol=1e-5)
    assert fisher_matrix_hessian(pois, [0.0]).entries[0, 0] == pytest.approx(1.0, abs=1e-10)


def test_exponential_family_metric_is_psi_hessian():
    spec = F.ExponentialFamilySpec(Expression("0"), [Expression("x"), Expression("x*x")], Interval())
    fam = F.make_exponential_family(spec, F.box([(-5.0, 5.0), (-5.0, -0.05)]))
    th = np.array([0.4, -0.7])
    psi = fam.exponential.psi

    def fd_hessian(h):
        out = np.empty((2, 2))
        for i in range(2):
            for j in range(2):
                ei, ej = np.eye(2)[i] * h, np.eye(2)[j] * h
                out[i, j] = (psi(th + ei + ej) - psi(th + ei - ej) - psi(th - ei + ej)
                             + psi(th - ei - ej)) / (4 * h * h)
        return out

    # Richardson-extrapolated second differences of the psi integral
    hess = (4 * fd_hessian(1e-3) - fd_hessian(2e-3)) / 3
    assert_allclose(fisher_matrix_hessian(fam, th).entries, hess, atol=1e-6)
    assert_allclose(fisher_matrix(fam, th).entries, hess, atol=1e-6)
    # closed form for x ~ N(m, v) with theta = (m/v, -1/(2v))
    v = -1 / (2 * th[1])
    m = th[0] * v
    closed = np.array([[v, 2 * m * v], [2 * m * v, 4 * m * m * v + 2 * v * v]])
    assert_allclose(hess, closed, atol=1e-6)


@pytest.mark.parametrize("fam, points", builtin_cases(), ids=lambda v: getattr(v, "name", ""))
def test_two_forms_agree(fam, points):
    for xi in points:
        a = fisher_matrix(fam, xi).entries
        b = fisher_matrix_hessian(fam, xi).entries
        assert np.max(np.abs(a - b)) < 1e-5, (fam.name, xi)


@given(c=st.lists(st.floats(-10, 10), min_size=2, max_size=2), mu=st.floats(-2, 2), s=st.floats(0.2, 4))
def test_quadratic_form_positive(gauss, c, mu, s):
    c = np.asarray(c)
    q = c @ fisher_matrix(gauss, [mu, s]).entries @ c
    assert q >= 0
    assume(np.linalg.norm(c) > 1e-100)  # keep c^T g c clear of underflow
    assert q > 0


def test_linear_reparametrization_covariance(gauss):
    A = np.array([[1.0, 0.5], [0.2, 1.5]])

    def logpdf(x, xi):
        return gauss.log_density(x, A @ xi)

    dom = F.box([(-math.inf, math.inf)] * 2, predicate=lambda xi: (A @ xi)[1] > 0.05)
    fam = F.ParametricFamily("gauss_linear", 2, dom, gauss.support, logpdf,
                             sampler=lambda xi, rng, n: gauss.sampler(A @ xi, rng, n),
                             scale_hint=lambda xi: gauss.scale_hint(A @ xi))
    xi = np.linalg.solve(A, [0.3, 1.2])
    g_xi = fisher_matrix(fam, xi).entries
    g_eta = fisher_matrix(gauss, A @ xi).entries
    assert_allclose(g_xi, A.T @ g_eta @ A, atol=1e-6)


def test_degenerate_parametrization_names_direction(gauss):
    def logpdf(x, xi):
        return gauss.log_density(x, np.array([xi[0] + xi[1], 1.0]))

    fam = F.ParametricFamily("redundant", 2, F.box([(-5.0, 5.0)] * 2), gauss.support, logpdf,
                             sampler=lambda xi, rng, n: rng.normal(xi[0] + xi[1], 1.0, n))
    with pytest.raises(DegeneracyError) as info:
        fisher_matrix(fam, [0.1, 0.2])
    d = np.asarray(info.value.direction)
    assert abs(abs(d @ np.array([1, -1]) / math.sqrt(2)) - 1) < 1e-6


def test_inner_product_examples():
    g = from_entries(np.diag([1.0, 2.0]))
    assert inner_product(g, [1, 0], [0, 1]) == 0
    assert inner_product(g, [0, 1], [0, 1]) == 2.0
    s = 2.0
    g2 = from_entries(np.diag([1 / s ** 2, 2 / s ** 2]))
    assert inner_product(g2, [1, 0], [1, 0]) == pytest.approx(0.25)
    with pytest.raises(DimensionError):
        inner_product(g, [1, 0, 0], [1, 0])


def test_inverse_metric_examples():
    s = 1.7
    assert_allclose(inverse_metric(from_entries(np.diag([1 / s ** 2, 2 / s ** 2]))), np.diag([s ** 2, s ** 2 / 2]),
                    rtol=1e-14)
    assert_allclose(inverse_metric(from_entries(np.eye(3))), np.eye(3))
    assert inverse_metric(fisher_matrix(F.poisson(), [1.0]))[0, 0] == pytest.approx(math.exp(-1.0), rel=1e-12)
    with pytest.raises(DegeneracyError):
        from_entries([[1.0, 1.0], [1.0, 1.0]])


def test_to_json_fields(gauss):
    js = fisher_matrix(gauss, [0.0, 1.0]).to_json()
    assert set(js) >= {"at", "entries", "inverse", "condition_number"}
    assert js["condition_number"] == pytest.approx(2.0, rel=1e-8)


def test_metric_derivative_gaussian(gauss):
    s = 1.3
    d = metric_derivative(gauss, [0.2, s])
    assert_allclose(d[1], np.diag([-2 / s ** 3, -4 / s ** 3]), atol=1e-8)
    assert_allclose(d[0], 0.0, atol=1e-8)


def test_base_point_mismatch():
    with pytest.raises(BasePointMismatch):
        require_same_point((0.0, 1.0), (0.0, 1.5))
