import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nnvi.utility import UtilityFamily, dual_utility, numeric_dual_utility

UTILS = [UtilityFamily.power(0.5), UtilityFamily.power(0.3), UtilityFamily.non_hara()]


def brute_dual(u, K, y):
    # dense grid in log(x - K); independent of the golden-section search
    w = np.exp(np.linspace(-12, 12, 400_001))
    return float(np.max(u(w) - (K + w) * y))


@pytest.mark.parametrize("u", UTILS, ids=lambda u: f"{u.kind}-{u.gamma}")
def test_closed_form_dual_matches_numeric_sup(u):
    ys = np.geomspace(0.05, 20, 25)
    closed = u.dual(ys, 1.0)
    numeric = np.array([numeric_dual_utility(u, 1.0, y) for y in ys])
    assert np.max(np.abs(closed - numeric)) <= 1e-8


@pytest.mark.parametrize("u", UTILS[::2], ids=lambda u: u.kind)
def test_closed_form_dual_matches_grid_sup(u):
    for y in (0.05, 0.5, 1.0, 3.0, 20.0):
        assert abs(u.dual(y, 1.0) - brute_dual(u, 1.0, y)) < 1e-6 * max(1.0, abs(u.dual(y, 1.0)))


def test_power_dual_example_values():
    u = UtilityFamily.power(0.5)
    # (1 - g)/g * y^(g/(g-1)) - K y = 1/y - y
    assert u.dual(2.0, 1.0) == pytest.approx(0.5 - 2.0)
    assert u.dual_argmax(2.0, 1.0) == pytest.approx(1.25)


@pytest.mark.parametrize("u", UTILS, ids=lambda u: f"{u.kind}-{u.gamma}")
def test_biconjugate_recovers_utility(u):
    K = 1.0
    xs = np.linspace(K + 0.2, K + 10, 50)
    z = np.linspace(-12, 6, 200_001)
    y = np.exp(z)
    Ut = u.dual(y, K)
    for x in xs:
        inf = np.min(Ut + x * y)
        assert inf == pytest.approx(float(u(x - K)), rel=1e-6)


def test_biconjugate_example_point():
    u = UtilityFamily.power(0.5)
    # minimiser y solves x* (y) = x: 1 + y^-2 = 2 -> y = 1
    assert u.dual(1.0, 1.0) + 2.0 * 1.0 == pytest.approx(2.0)


@given(x=st.floats(1.001, 20.0), y=st.floats(0.01, 50.0), which=st.integers(0, 2))
def test_fenchel_young(x, y, which):
    u = UTILS[which]
    assert u.dual(y, 1.0) + x * y >= float(u(x - 1.0)) - 1e-9 * (1 + abs(x * y))


@given(y=st.floats(0.05, 20.0), which=st.integers(0, 2))
def test_dual_derivative_is_minus_argmax(y, which):
    u = UTILS[which]
    h = 1e-6 * y
    fd = (u.dual(y + h, 1.0) - u.dual(y - h, 1.0)) / (2 * h)
    assert fd == pytest.approx(float(u.dual_derivative(y, 1.0)), rel=1e-5)


def test_dual_is_convex_and_decreasing():
    ys = np.geomspace(0.05, 20, 400)
    for u in UTILS:
        v = u.dual(ys, 1.0)
        assert np.all(np.diff(v) < 0)
        # convex in y: slopes increase
        assert np.all(np.diff(np.diff(v) / np.diff(ys)) > -1e-12)


def test_nonhara_marginal_utility_inverts_argmax():
    u = UtilityFamily.non_hara()
    ys = np.geomspace(0.1, 10, 20)
    x = u.dual_argmax(ys, 0.0)
    assert np.allclose(u.derivative(x), ys, rtol=1e-10)


def test_custom_utility_numeric_dual():
    u = UtilityFamily("custom", func=lambda x: np.log1p(np.maximum(x, 0)))
    # sup_w log(1+w) - (K+w) y  ->  w* = 1/y - 1 for y < 1
    y = 0.25
    expected = np.log(1 / y) - (1.0 + 1 / y - 1) * y
    assert dual_utility(u, 1.0, y) == pytest.approx(expected, abs=1e-9)


def test_invalid_inputs():
    with pytest.raises(ValueError):
        UtilityFamily.power(1.5)
    with pytest.raises(ValueError):
        UtilityFamily("exotic")
    with pytest.raises(ValueError):
        dual_utility(UtilityFamily.power(0.5), 1.0, [1.0, 0.0])
    with pytest.raises(ValueError):
        numeric_dual_utility(UtilityFamily.power(0.5), 1.0, -1.0)
