import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st
from numpy.testing import assert_allclose
from scipy.special import gammaln

from conftest import builtin_cases
from statmanifold import family as F
from statmanifold.errors import DomainError, FamilyConstructionError, SupportError
from statmanifold.expr import Expression
from statmanifold.integrate import expect
from statmanifold.support import IntegerRange, Interval


def test_gaussian_log_density_at_mean():
    for mu, s in [(0.0, 1.0), (2.0, 0.5)]:
        assert F.log_density(F.gaussian(), mu, [mu, s]) == pytest.approx(-math.log(s) - 0.5 * math.log(2 * math.pi))


def test_poisson_log_density():
    assert F.log_density(F.poisson(), 0, [0.0]) == pytest.approx(-1.0, abs=1e-15)
    # l = x theta - e^theta - log x!
    assert F.log_density(F.poisson(), 3, [0.7]) == pytest.approx(3 * 0.7 - math.exp(0.7) - math.log(6))


@pytest.mark.parametrize("fam, points", builtin_cases(), ids=lambda v: getattr(v, "name", ""))
def test_density_is_exp_log_density(fam, points):
    rng = np.random.default_rng(0)
    for xi in points:
        x = F.sample(fam, xi, seed=1, count=5)
        assert_allclose(F.density(fam, x, xi), np.exp(F.log_density(fam, x, xi)))


def test_gaussian_score_oracle():
    assert_allclose(F.score(F.gaussian(), 1.0, [0.0, 1.0]), [1.0, 0.0], atol=1e-15)
    # hand derivative: (x-mu)/s^2, -1/s + (x-mu)^2/s^3
    assert_allclose(F.score(F.gaussian(), 2.0, [0.5, 2.0]), [0.375, -0.5 + 2.25 / 8])


def test_poisson_score():
    assert_allclose(F.score(F.poisson(), 2, [0.0]), [1.0])


def test_domain_and_support_errors():
    g = F.gaussian()
    with pytest.raises(DomainError):
        F.log_density(g, 0.0, [0.0, 0.0])
    with pytest.raises(DomainError):
        F.log_density(g, 0.0, [0.0, 0.5e-6])  # inside the safety margin
    with pytest.raises(DomainError):
        F.score(g, 0.0, [0.0, 1.0, 2.0])
    with pytest.raises(SupportError):
        F.log_density(F.poisson(), 1.5, [0.0])
    with pytest.raises(SupportError):
        F.log_density(F.uniform_beta_mixture(), 2.0, [0.5])
    assert not issubclass(SupportError, DomainError) and not issubclass(DomainError, SupportError)


@pytest.mark.parametrize("fam, points", builtin_cases(), ids=lambda v: getattr(v, "name", ""))
def test_builtin_invariants(fam, points):
    discrete_finite = isinstance(fam.support, IntegerRange) and fam.support.finite
    for xi in points:
        d = F.validate_family(fam, xi)
        assert abs(d.normalization_residual) < (1e-12 if discrete_finite else 1e-8)
        assert d.score_mean_residual < 1e-6
        assert d.support_invariant and d.converged
        if d.score_fd_deviation is not None:
            assert d.score_fd_deviation < 1e-6


@given(x=st.floats(-4, 4), mu=st.floats(-2, 2), s=st.floats(0.2, 3))
def test_gaussian_score_matches_finite_differences(x, mu, s):
    g = F.gaussian()
    assert_allclose(F.score(g, x, [mu, s]), F.fd_score(g, x, [mu, s]), atol=1e-6)


@given(x=st.floats(0.001, 0.999), xi=st.floats(0.05, 0.95))
def test_mixture_score_matches_finite_differences(x, xi):
    m = F.uniform_beta_mixture()
    assert_allclose(F.score(m, x, [xi]), F.fd_score(m, x, [xi]), atol=1e-6)


def test_exponential_family_poisson_from_statistics():
    spec = F.ExponentialFamilySpec(Expression("-lgamma(x + 1)"), [Expression("x")], IntegerRange(0))
    fam = F.make_exponential_family(spec, F.box([(-5.0, 3.0)]))
    for th in (-1.0, 0.0, 1.2):
        # truncated-series oracle for psi = log sum_k e^{k th} / k!
        k = np.arange(200)
        oracle = np.log(np.sum(np.exp(k * th - gammaln(k + 1))))
        assert fam.exponential.psi(np.array([th])) == pytest.approx(oracle, abs=1e-12)
        assert fam.exponential.psi(np.array([th])) == pytest.approx(math.exp(th), abs=1e-12)


def test_exponential_family_unit_gaussian():
    spec = F.ExponentialFamilySpec(Expression("-x*x/2 - log(sqrt(2*pi))"), [Expression("x")], Interval())
    fam = F.make_exponential_family(spec, F.box([(-4.0, 4.0)]))
    for th in (-1.5, 0.0, 0.8):
        assert fam.exponential.psi(np.array([th])) == pytest.approx(th * th / 2, abs=1e-11)
        # d psi = E[F]
        mean = expect(fam, [th], lambda x: x).value
        assert fam.exponential.psi_grad(np.array([th]))[0] == pytest.approx(mean, abs=1e-6)
        assert mean == pytest.approx(th, abs=1e-9)


def test_exponential_family_constant_statistic_rejected():
    spec = F.ExponentialFamilySpec(Expression("-x*x/2"), [Expression("2")], Interval())
    with pytest.raises(FamilyConstructionError):
        F.make_exponential_family(spec, F.box([(-1.0, 1.0)]))


def test_exponential_family_divergent_normalization():
    # exp(theta x) on the whole real line is never integrable
    spec = F.ExponentialFamilySpec(Expression("0"), [Expression("x")], Interval())
    with pytest.raises(FamilyConstructionError):
        F.make_exponential_family(spec, F.box([(-1.0, 1.0)]))


def test_mixture_at_origin_equals_carrier():
    m = F.uniform_beta_mixture()
    x = np.linspace(0.01, 0.99, 7)
    # xi -> 0 is outside the open box; use the affine structure instead
    p1 = F.density(m, x, [0.25])
    p2 = F.density(m, x, [0.75])
    carrier = 1.5 * p1 - 0.5 * p2     # extrapolates the affine map to xi = 0
    assert_allclose(carrier, np.ones_like(x), atol=1e-14)


def test_mixture_negative_density_reported():
    spec = F.MixtureFamilySpec(Expression("1"), [Expression("2*x - 1")], Interval(0.0, 1.0))
    with pytest.raises(FamilyConstructionError) as info:
        F.make_mixture_family(spec, F.box([(-2.0, 2.0)]))
    err = info.value
    assert err.x is not None and err.xi is not None
    assert 1.0 + err.xi[0] * (2 * err.x - 1) < 0


def test_mixture_normalization_checked():
    spec = F.MixtureFamilySpec(Expression("2"), [Expression("2*x - 1")], Interval(0.0, 1.0))
    with pytest.raises(FamilyConstructionError):
        F.make_mixture_family(spec, F.box([(-0.5, 0.5)]))


def test_unnormalized_density_residual():
    g = F.gaussian()
    short = replace(g, log_density=lambda x, xi: g.log_density(x, xi) + math.log(0.9))
    d = F.validate_family(short, [0.0, 1.0])
    assert d.normalization_residual == pytest.approx(0.1, abs=1e-9)


def test_parameter_dependent_support_detected():
    # uniform on (0, xi): support moves with the parameter
    def logpdf(x, xi):
        x = np.asarray(x, dtype=float)
        return np.where((x > 0) & (x < xi[0]), -math.log(xi[0]), -np.inf)

    fam = F.ParametricFamily("uniform_width", 1, F.box([(0.0, 10.0)]), Interval(0.0, 10.0), logpdf,
                             sampler=lambda xi, rng, n: rng.uniform(0, xi[0], n))
    d = F.validate_family(fam, [2.0], reference=[5.0])
    assert not d.support_invariant and len(d.support_mismatches) > 0


def test_sampler_reproducible_and_in_support():
    for fam, points in builtin_cases():
        a = F.sample(fam, points[0], seed=3, count=50)
        b = F.sample(fam, points[0], seed=3, count=50)
        assert_allclose(a, b)
        assert np.all(fam.support.contains(a))


def test_sampler_moments():
    x = F.sample(F.poisson(), [math.log(3.0)], seed=0, count=200_000)
    assert abs(x.mean() - 3.0) < 4 * math.sqrt(3.0 / x.size)
    m = F.uniform_beta_mixture()
    y = F.sample(m, [0.4], seed=0, count=200_000)
    # E[x] = 1/2 + xi * int x (2x - 1) dx = 1/2 + xi/6
    assert abs(y.mean() - (0.5 + 0.4 / 6)) < 4 * y.std() / math.sqrt(y.size)


def test_categorical_domain_predicate():
    c = F.categorical(3)
    with pytest.raises(DomainError):
        F.log_density(c, 0, [0.6, 0.5])
    assert F.density(c, 0, [0.2, 0.3]) == pytest.approx(0.5)
    assert F.density(c, 2, [0.2, 0.3]) == pytest.approx(0.3)
