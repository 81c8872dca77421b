import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aggmark.catalogue import (
    Constant,
    GompertzMakeham,
    Linear,
    Logistic,
    PiecewiseConstant,
    Product,
    Sum,
    from_spec,
    integrate,
)

FUNCTIONS = [
    Constant(0.7),
    Linear(0.1, 0.02),
    GompertzMakeham(0.0005, 10 ** (5.88 - 10), 10**0.038),
    Logistic(0.9, 0.5, 0.4, 55.0),
    PiecewiseConstant([1.0, 3.0], [0.0, 2.0, 0.5]),
    Sum([Constant(1.0), Linear(0.0, 0.5)]),
    Product([Constant(2.0), GompertzMakeham(0.0, 0.01, 1.1)]),
]


@pytest.mark.parametrize("f", FUNCTIONS, ids=lambda f: f.to_dict()["type"])
def test_json_round_trip(f):
    g = from_spec(f.to_dict())
    x = np.linspace(0, 80, 33)
    np.testing.assert_array_equal(f(x), g(x))
    assert g == f


@pytest.mark.parametrize("f", FUNCTIONS, ids=lambda f: f.to_dict()["type"])
def test_integral_matches_quadrature(f):
    a, b = 0.5, 62.0
    num = integrate(f, a, b, f.breakpoints, nodes=20, max_piece=1.0)
    assert float(f.integral(a, b)) == pytest.approx(float(num), rel=1e-10, abs=1e-12)


def test_piecewise_constant_is_right_continuous():
    f = PiecewiseConstant([1.0], [0.0, 1.0])
    assert f(1.0) == 1.0 and f(0.999999) == 0.0


def test_number_is_constant():
    assert from_spec(3) == Constant(3.0)


@pytest.mark.parametrize("bad", [{"type": "nope"}, {"value": 1}, "x", True, {"type": "linear", "slope": 1}])
def test_bad_specs_rejected(bad):
    with pytest.raises(ValueError):
        from_spec(bad)


def test_integrate_vectorized_limits():
    f = Linear(0.0, 1.0)
    out = integrate(f, np.array([0.0, 1.0]), np.array([1.0, 3.0]))
    np.testing.assert_allclose(out, [0.5, 4.0])


@settings(max_examples=40, deadline=None)
@given(st.floats(0, 50), st.floats(0, 50))
def test_integral_is_additive(a, b):
    f = FUNCTIONS[2]
    m = 0.5 * (a + b)
    assert float(f.integral(a, b)) == pytest.approx(float(f.integral(a, m) + f.integral(m, b)), abs=1e-12)
