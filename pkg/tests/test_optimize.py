"""Adam and L-BFGS behavior on known objectives."""

import numpy as np
import pytest

from symkan.errors import NumericalError
from symkan.optimize import adam_init, adam_step, lbfgs_minimize


def test_adam_zero_gradient_no_move():
    st = adam_init(3)
    x = np.array([1.0, -2.0, 0.5])
    x2 = adam_step(x, np.zeros(3), st, 0.1)
    np.testing.assert_array_equal(x2, x)
    assert st.t == 1


def test_adam_quadratic_convergence():
    st = adam_init(1)
    x = np.array([0.0])
    for _ in range(200):
        g = 2.0 * (x - 3.0)
        x = adam_step(x, g, st, 0.1)
    assert abs(x[0] - 3.0) <= 1e-2


def test_adam_per_element_lr():
    st = adam_init(2)
    x = np.zeros(2)
    lr = np.array([1e-3, 1e-4])
    x2 = adam_step(x, np.array([1.0, 1.0]), st, lr)
    # after one bias-corrected step the move is exactly -lr * g/|g| (up to eps)
    np.testing.assert_allclose(x2, -lr, rtol=1e-6)


def test_adam_rejects_nonfinite():
    st = adam_init(2)
    x = np.array([1.0, 2.0])
    with pytest.raises(NumericalError):
        adam_step(x, np.array([1.0, np.nan]), st, 0.1)
    assert st.t == 0  # state untouched by the rejected step
    assert np.all(st.m == 0.0)


def test_adam_deterministic():
    def run():
        st = adam_init(4)
        x = np.linspace(-1, 1, 4)
        for k in range(50):
            g = np.sin(x * (k + 1))
            x = adam_step(x, g, st, 0.01)
        return x
    np.testing.assert_array_equal(run(), run())


def _quadratic(a):
    def obj(x):
        d = x - a
        return 0.5 * float(np.dot(d, d)), d
    return obj


def test_lbfgs_quadratic_exact():
    a = np.array([1.0, -2.0, 3.5, 0.0, 7.25])
    res = lbfgs_minimize(_quadratic(a), np.zeros(5))
    assert np.max(np.abs(res.x - a)) <= 1e-10
    assert res.iterations <= 7  # dim + 2


def test_lbfgs_rosenbrock():
    def rosen(z):
        x, y = z
        f = (1 - x) ** 2 + 100.0 * (y - x * x) ** 2
        g = np.array([-2 * (1 - x) - 400.0 * x * (y - x * x),
                      200.0 * (y - x * x)])
        return float(f), g
    res = lbfgs_minimize(rosen, np.array([-1.2, 1.0]), max_iter=200)
    assert res.f <= 1e-8
    assert np.max(np.abs(res.x - 1.0)) <= 1e-3


def test_lbfgs_already_optimal():
    a = np.array([2.0, -1.0])
    res = lbfgs_minimize(_quadratic(a), a.copy())
    assert res.reason == "gradient_tolerance"
    np.testing.assert_array_equal(res.x, a)
    assert res.iterations <= 1


def test_lbfgs_never_worse_than_start():
    def rosen(z):
        x, y = z
        f = (1 - x) ** 2 + 100.0 * (y - x * x) ** 2
        g = np.array([-2 * (1 - x) - 400.0 * x * (y - x * x),
                      200.0 * (y - x * x)])
        return float(f), g
    x0 = np.array([-1.2, 1.0])
    f0, _ = rosen(x0)
    for budget in (1, 2, 3, 5):
        res = lbfgs_minimize(rosen, x0, max_iter=budget)
        assert res.f <= f0


def test_lbfgs_zero_budget_returns_start():
    a = np.array([4.0])
    res = lbfgs_minimize(_quadratic(a), np.zeros(1), max_iter=0)
    assert res.reason == "max_iter"
    np.testing.assert_array_equal(res.x, np.zeros(1))


def test_lbfgs_nonfinite_start_raises():
    def bad(x):
        return float("nan"), np.zeros_like(x)
    with pytest.raises(NumericalError):
        lbfgs_minimize(bad, np.zeros(2))


def test_lbfgs_high_dimensional_quadratic():
    rng = np.random.default_rng(0)
    a = rng.normal(size=40)
    res = lbfgs_minimize(_quadratic(a), np.zeros(40), max_iter=100)
    assert np.max(np.abs(res.x - a)) <= 1e-8
