import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from statmanifold import family as F

settings.register_profile(
    "default", deadline=None, max_examples=25,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile("default")

GAUSS_GRID = [(mu, s) for mu in (-1.0, 0.0, 1.0) for s in (0.5, 1.0, 2.0)]


@pytest.fixture(scope="session")
def gauss():
    return F.gaussian()


@pytest.fixture(scope="session")
def pois():
    return F.poisson()


@pytest.fixture(scope="session")
def mixture():
    return F.uniform_beta_mixture()


def builtin_cases():
    """(family, list of parameter points) for every built-in family."""
    return [
        (F.gaussian(), GAUSS_GRID),
        (F.gaussian_known_sigma(1.5), [(-1.0,), (0.0,), (2.0,)]),
        (F.gaussian_natural(), [(0.0, -0.5), (1.0, -1.0), (-0.5, -2.0)]),
        (F.poisson(), [(-1.0,), (0.0,), (1.5,)]),
        (F.bernoulli(), [(0.1,), (0.5,), (0.8,)]),
        (F.categorical(3), [(0.2, 0.3), (1 / 3, 1 / 3), (0.6, 0.1)]),
        (F.uniform_beta_mixture(), [(0.1,), (0.5,), (0.9,)]),
    ]


def as_array(xi):
    return np.asarray(xi, dtype=float)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is None or not acceptance.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(acceptance.RESULTS):
        terminalreporter.write_line(acceptance.RESULTS[k])
