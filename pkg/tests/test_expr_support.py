import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from statmanifold.errors import FamilyConstructionError
from statmanifold.expr import Expression
from statmanifold.support import IntegerRange, Interval, support_from_json


@pytest.mark.parametrize("src, x, expected", [
    ("x*x + 1", 2.0, 5.0),
    ("-x^2", 3.0, None),
    ("pow(x, 3) / 2", 2.0, 4.0),
    ("exp(log(x))", 7.5, 7.5),
    ("-lgamma(x + 1)", 4.0, -math.log(24.0)),
    ("sqrt(2*pi)", 0.0, math.sqrt(2 * math.pi)),
    ("1 - -x", 2.0, 3.0),
    ("2*x-1", 0.25, -0.5),
])
def test_expression_values(src, x, expected):
    if expected is None:
        with pytest.raises(FamilyConstructionError):
            Expression(src)
        return
    assert_allclose(Expression(src)(x), expected, rtol=1e-15)


def test_expression_broadcasts_and_keywords():
    e = Expression("u1*u2 + 1", ("u1", "u2"))
    assert_allclose(e(np.array([1.0, 2.0]), 3.0), [4.0, 7.0])
    assert_allclose(e(u1=2.0, u2=2.0), 5.0)
    assert Expression("3")(np.zeros(4)).shape == (4,)


@pytest.mark.parametrize("bad", ["x +", "foo(x)", "y", "(x", "1 2", ""])
def test_expression_parse_errors(bad):
    with pytest.raises(FamilyConstructionError):
        Expression(bad)


def test_supports():
    iv = Interval(0.0, 1.0)
    assert list(iv.contains([-0.1, 0.5, 1.0])) == [False, True, True]
    ir = IntegerRange(0, 3)
    assert list(ir.contains([0, 1.5, 3, 4])) == [True, False, True, False]
    assert not IntegerRange(0).finite
    assert support_from_json({"type": "interval", "lo": "-inf", "hi": "inf"}) == Interval()
    assert support_from_json({"type": "integers", "lo": 0, "hi": None}) == IntegerRange(0)
    assert support_from_json(iv.to_json()) == iv
    with pytest.raises(ValueError):
        Interval(1.0, 1.0)
