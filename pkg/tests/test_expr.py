import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from invhom.expr import Expression, ExpressionError


def test_evaluates_constants_and_functions():
    e = Expression("2*pi + e - sin(0*y1) + exp(0)", 2)
    y = np.zeros((2, 3))
    np.testing.assert_allclose(e(y), 2 * math.pi + math.e + 1.0)


def test_variables_are_vectorised():
    e = Expression("y1**2 + 3*y2", 2)
    y = np.array([[1.0, 2.0], [0.0, 1.0]])
    np.testing.assert_allclose(e(y), [1.0, 7.0])


@pytest.mark.parametrize("src", ["import os", "y3", "__class__", "abs(y1)", "y1 if y2 else 0", "sin(", "'a'"])
def test_rejects_unsafe_or_unknown(src):
    with pytest.raises(ExpressionError):
        Expression(src, 2)


def test_non_finite_evaluation_raises():
    e = Expression("1/y1", 1)
    with pytest.raises(ExpressionError):
        e(np.zeros((1, 2)))


@given(st.floats(-5, 5), st.floats(-5, 5))
def test_matches_python_arithmetic(a, b):
    e = Expression("cos(y1)*y2 - y1/3", 2)
    assert e(np.array([[a], [b]]))[0] == pytest.approx(math.cos(a) * b - a / 3, abs=1e-12)
