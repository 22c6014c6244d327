import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from coexist.special import digamma
from oracles import digamma_series

EULER = 0.57721566490153286


def test_reference_values():
    assert abs(digamma(1.0) - (-0.5772156649015329)) < 1e-12
    assert abs(digamma(2.0) - digamma(1.0) - 1.0) < 1e-12
    assert abs(digamma(0.5) - (-EULER - 2 * math.log(2))) < 1e-12


def test_series_oracle():
    for x in (0.3, 1.0, 2.5, 7.0):
        assert abs(digamma(x) - digamma_series(x)) < 1e-5


@settings(max_examples=400)
@given(st.floats(1e-3, 1e6))
def test_matches_mpmath_on_range(x):
    ref = float(mpmath.digamma(mpmath.mpf(x)))
    assert abs(digamma(x) - ref) < 1e-12


def test_vectorized():
    xs = np.array([[0.1, 1.0], [10.0, 250.5]])
    out = digamma(xs)
    assert out.shape == xs.shape
    assert np.array_equal(out, np.vectorize(digamma)(xs))


@pytest.mark.parametrize("bad", [0.0, -1.0, float("nan")])
def test_domain_error(bad):
    with pytest.raises(ValueError):
        digamma(bad)
