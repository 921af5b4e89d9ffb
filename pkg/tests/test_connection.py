import numpy as np
import pytest
from hypothesis import given, strategies as st
from numpy.testing import assert_allclose

from conftest import GAUSS_GRID
from statmanifold import family as F
from statmanifold.connection import (ConnectionCoefficients, alpha_connection, christoffel_second_kind,
                                     convert_connection, geometry_at, skewness_tensor)
from statmanifold.errors import BasePointMismatch
from statmanifold.metric import fisher_matrix, from_entries, metric_derivative


def gaussian_connection_oracle(s, alpha):
    """Closed-form alpha-connection of N(mu, s^2) in (mu, s), first kind [i, j, k]."""
    G = np.zeros((2, 2, 2))
    G[0, 0, 1] = (1 - alpha) / s ** 3
    G[0, 1, 0] = G[1, 0, 0] = -(1 + alpha) / s ** 3
    G[1, 1, 1] = -2 * (1 + 2 * alpha) / s ** 3
    return G


@given(mu=st.floats(-2, 2), s=st.floats(0.3, 3), alpha=st.floats(-2, 2))
def test_gaussian_connection_closed_form(gauss, mu, s, alpha):
    G = alpha_connection(gauss, [mu, s], alpha)
    assert_allclose(G.entries, gaussian_connection_oracle(s, alpha), atol=1e-7 / s ** 3)
    assert G.raw_asymmetry < 1e-6
    assert np.array_equal(G.entries, np.transpose(G.entries, (1, 0, 2)))


def test_levi_civita_from_metric_derivative(gauss):
    # independent oracle: Christoffel formula on finite differences of g
    xi = [0.4, 0.8]
    dg = metric_derivative(gauss, xi)                     # [k, i, j]
    lc = 0.5 * (np.einsum("ijk->ijk", dg.transpose(0, 1, 2)) + np.einsum("jik->ijk", dg)
                - np.einsum("kij->ijk", dg))
    assert_allclose(alpha_connection(gauss, xi, 0.0).entries, lc, atol=1e-7)
    assert alpha_connection(gauss, xi, 0.0).entries[0, 0, 1] == pytest.approx(1 / 0.8 ** 3, rel=1e-9)


def test_skewness_examples(gauss):
    s = 1.4
    T = skewness_tensor(gauss, [0.3, s])
    assert abs(T.entries[0, 0, 0]) < 1e-10
    assert T.entries[0, 0, 1] == pytest.approx(2 / s ** 3, rel=1e-9)
    assert T.entries[1, 1, 1] == pytest.approx(8 / s ** 3, rel=1e-9)
    for p in [(0, 2, 1), (1, 0, 2), (2, 1, 0)]:
        assert np.array_equal(T.entries, np.transpose(T.entries, p))
    assert T.raw_asymmetry < 1e-6
    Tb = skewness_tensor(F.bernoulli(), [0.5])
    assert abs(Tb.entries[0, 0, 0]) < 1e-12


def test_flat_connections():
    assert np.max(np.abs(alpha_connection(F.poisson(), [0.7], 1.0).entries)) < 1e-6
    assert np.max(np.abs(alpha_connection(F.uniform_beta_mixture(), [0.3], -1.0).entries)) < 1e-6
    assert np.max(np.abs(alpha_connection(F.gaussian_natural(), [0.5, -0.8], 1.0).entries)) < 1e-6
    assert np.max(np.abs(alpha_connection(F.categorical(3), [0.2, 0.5], -1.0).entries)) < 1e-6


def test_conversion(gauss):
    xi = [0.1, 1.3]
    T = skewness_tensor(gauss, xi)
    g1 = alpha_connection(gauss, xi, 1.0)
    assert convert_connection(g1, T, 1.0) is g1
    direct = alpha_connection(gauss, xi, -1.0)
    conv = convert_connection(g1, T, -1.0)
    assert conv.alpha == -1.0
    assert_allclose(conv.entries, direct.entries, atol=1e-6)
    back = convert_connection(convert_connection(g1, T, 0.37), T, 1.0)
    assert_allclose(back.entries, g1.entries, rtol=1e-15, atol=1e-15)
    with pytest.raises(BasePointMismatch):
        convert_connection(g1, skewness_tensor(gauss, [0.1, 1.4]), 0.0)


@given(alpha=st.floats(-3, 3))
def test_convex_combinations(gauss, alpha):
    xi = [-0.5, 0.7]
    G = {a: alpha_connection(gauss, xi, a).entries for a in (-1.0, 0.0, 1.0)}
    Ga = alpha_connection(gauss, xi, alpha).entries
    assert_allclose(Ga, (1 - alpha) * G[0.0] + alpha * G[1.0], atol=1e-6)
    assert_allclose(Ga, (1 + alpha) / 2 * G[1.0] + (1 - alpha) / 2 * G[-1.0], atol=1e-6)


@pytest.mark.parametrize("fam, points", [
    (F.gaussian(), GAUSS_GRID),
    (F.poisson(), [(-1.0,), (0.0,), (1.0,)]),
    (F.gaussian_natural(), [(0.5, -0.8), (-1.0, -1.5)]),
], ids=["gaussian", "poisson", "gaussian_natural"])
def test_metric_compatibility_and_duality(fam, points):
    for xi in points:
        dg = metric_derivative(fam, xi)                                  # [k, i, j]
        L = alpha_connection(fam, xi, 0.0).entries                       # [k, i, j] = Gamma_{ki,j}
        compat = dg - L - np.transpose(L, (0, 2, 1))
        assert np.max(np.abs(compat)) < 1e-5
        e = alpha_connection(fam, xi, 1.0).entries
        m = alpha_connection(fam, xi, -1.0).entries
        dual = dg - e - np.transpose(m, (0, 2, 1))
        assert np.max(np.abs(dual)) < 1e-5


def test_christoffel_second_kind(gauss):
    s = 0.9
    g = fisher_matrix(gauss, [0.0, s])
    C = christoffel_second_kind(alpha_connection(gauss, [0.0, s], 0.0), g)
    assert C[1, 0, 0] == pytest.approx(1 / (2 * s), rel=1e-9)
    zero = ConnectionCoefficients(g.at, 0.0, np.zeros((2, 2, 2)))
    assert np.all(christoffel_second_kind(zero, g) == 0)
    ident = from_entries(np.eye(2), at=g.at)
    rnd = np.random.default_rng(0).normal(size=(2, 2, 2))
    assert_allclose(christoffel_second_kind(ConnectionCoefficients(g.at, 0.0, rnd), ident), np.transpose(rnd, (2, 0, 1)))
    with pytest.raises(BasePointMismatch):
        christoffel_second_kind(alpha_connection(gauss, [0.0, 1.0], 0.0), g)


def test_geometry_at_matches_separate_calls(gauss):
    xi = [0.2, 1.1]
    g, G = geometry_at(gauss, xi, 0.5)
    assert_allclose(g.entries, fisher_matrix(gauss, xi).entries, rtol=1e-12)
    assert_allclose(G.entries, alpha_connection(gauss, xi, 0.5).entries, rtol=1e-10, atol=1e-14)
