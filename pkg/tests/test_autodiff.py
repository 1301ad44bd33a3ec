"""Tape recording, reverse sweep, and Taylor jets."""

import math

import numpy as np
import pytest

from symkan.autodiff import (Jet, Tape, backward, grad_check, jet_add,
                             jet_apply_primitive, jet_mul, jet_scale, vabs,
                             vcos, veqsel, vexp, vlog, vmax2, vmuladd, vpow_abs,
                             vpow_signed, vrecip, vsigmoid, vsign0, vsin,
                             vstmix, vsum, vtanh)
from symkan.errors import NumericalError
from symkan.primitives import get_primitive


def test_leaf_arithmetic_values():
    t = Tape()
    x = t.leaf(3.0)
    y = t.leaf(4.0)
    assert (x + y).value == 7.0
    assert (x - y).value == -1.0
    assert (x * y).value == 12.0
    assert (x / y).value == 0.75
    assert (-x).value == -3.0
    assert (2.0 * x).value == 6.0
    assert (x + 1.5).value == 4.5
    assert (1.0 / y).value == 0.25
    assert (5.0 - x).value == 2.0


def test_constant_folding_shortcuts():
    # +0 and *1 return the same node; *0 collapses to a shared constant
    t = Tape()
    x = t.leaf(2.0)
    assert (x + 0.0) is x
    assert (x * 1.0) is x
    z = x * 0.0
    assert z.value == 0.0
    n_before = len(t.op)
    z2 = x * 0.0
    assert z2.idx == z.idx and len(t.op) == n_before


def test_backward_product_rule():
    t = Tape()
    x = t.leaf(3.0)
    y = t.leaf(4.0)
    f = x * y + x
    g = backward(t, f)
    assert g[x.idx] == pytest.approx(5.0)   # y + 1
    assert g[y.idx] == pytest.approx(3.0)


def test_backward_matches_fd_on_composite():
    def build(vals):
        t = Tape()
        xs = [t.leaf(v) for v in vals]
        a, b, c = xs
        f = vsin(a * b) + vexp(c) / (1.0 + vabs(a)) + vtanh(b - c) * a
        return t, xs, f

    point = np.array([0.6, -1.2, 0.4])
    t, xs, f = build(point)
    g = backward(t, f)
    for k in range(3):
        hp = point.copy(); hp[k] += 1e-6
        hm = point.copy(); hm[k] -= 1e-6
        fp = build(hp)[2].value
        fm = build(hm)[2].value
        fd = (fp - fm) / 2e-6
        assert g[xs[k].idx] == pytest.approx(fd, rel=1e-6, abs=1e-9)


def test_grad_check_helper_small():
    def fn(theta):
        t = Tape()
        xs = [t.leaf(v) for v in theta]
        f = vlog(1.0 + xs[0] * xs[0]) * vcos(xs[1])
        g = backward(t, f)
        return f.value, np.array([g[x.idx] for x in xs])

    worst = grad_check(fn, np.array([0.8, 0.3]))
    assert worst < 1e-6


def test_unary_coverage_against_fd():
    fns = [
        (vexp, 0.5), (vlog, 2.0), (vsin, 1.1), (vcos, 1.1), (vtanh, 0.4),
        (vrecip, 1.7), (vabs, -0.9), (vsigmoid, 0.25),
        (lambda x: vpow_abs(x, 2.15), -1.3),
        (lambda x: vpow_signed(x, 2.15), -1.3),
    ]
    for fn, x0 in fns:
        t = Tape()
        x = t.leaf(x0)
        f = fn(x)
        g = backward(t, f)[x.idx]
        fd = None
        h = 1e-6
        t2 = Tape(); fp = fn(t2.leaf(x0 + h)).value
        t3 = Tape(); fm = fn(t3.leaf(x0 - h)).value
        fd = (fp - fm) / (2 * h)
        assert g == pytest.approx(fd, rel=2e-5, abs=1e-9), fn


def test_sign0_and_eqsel_have_no_gradient():
    t = Tape()
    x = t.leaf(-2.0)
    y = t.leaf(-2.0)
    f = vsign0(x) + veqsel(x, y)
    assert f.value == pytest.approx(0.0)   # sign(-2) = -1, eqsel = 1
    g = backward(t, f)
    assert g[x.idx] == 0.0 and g[y.idx] == 0.0


def test_max2_routes_gradient_to_winner_tie_to_first():
    t = Tape()
    a = t.leaf(2.0)
    b = t.leaf(5.0)
    g = backward(t, vmax2(a, b))
    assert (g[a.idx], g[b.idx]) == (0.0, 1.0)
    t = Tape()
    a = t.leaf(3.0)
    b = t.leaf(3.0)
    g = backward(t, vmax2(a, b))
    assert (g[a.idx], g[b.idx]) == (1.0, 0.0)


def test_stmix_value_hard_gradient_soft():
    t = Tape()
    soft = t.leaf(0.3)
    hard = t.leaf(1.0)
    scale = t.leaf(2.0)
    f = vstmix(soft, hard) * scale
    assert f.value == pytest.approx(2.0)   # forward uses the hard value
    g = backward(t, f, st_through_mask=True)
    assert g[soft.idx] == pytest.approx(2.0)
    assert g[hard.idx] == 0.0
    # with routing off the mask is locally constant: no gradient either way
    g_off = backward(t, f, st_through_mask=False)
    assert g_off[soft.idx] == 0.0
    assert g_off[hard.idx] == 0.0
    assert g_off[scale.idx] == pytest.approx(1.0)


def test_muladd_fuses_and_differentiates():
    t = Tape()
    a, b, c = t.leaf(2.0), t.leaf(3.0), t.leaf(4.0)
    f = vmuladd(a, b, c)
    assert f.value == 10.0
    g = backward(t, f)
    assert (g[a.idx], g[b.idx], g[c.idx]) == (3.0, 2.0, 1.0)


def test_vsum_balanced_reduction():
    t = Tape()
    xs = [t.leaf(float(i)) for i in range(7)]
    s = vsum(xs)
    assert s.value == 21.0
    g = backward(t, s)
    assert all(g[x.idx] == 1.0 for x in xs)


def test_lane_rows_broadcast_and_lane_sum_adjoint():
    t = Tape()
    row = t.const_row(np.array([1.0, 2.0, 3.0]))
    w = t.leaf(2.0)
    f = w * row          # lanes [2, 4, 6]
    assert np.allclose(f.value, [2.0, 4.0, 6.0])
    total = vsum([f])
    g = backward(t, total)
    # scalar leaf consumed by lane rows accumulates the lane sum
    assert g[w.idx] == pytest.approx(6.0)


def test_backward_seeds_weighted():
    t = Tape()
    x = t.leaf(1.5)
    f1 = x * x
    f2 = vsin(x)
    g = backward(t, seeds={f1.idx: 2.0, f2.idx: 1.0})
    assert g[x.idx] == pytest.approx(2.0 * 2.0 * 1.5 + math.cos(1.5))


def test_replay_after_set_leaf():
    t = Tape()
    x = t.leaf(2.0)
    f = x * x + 1.0
    assert f.value == 5.0
    t.set_leaf(x, 3.0)
    t.replay()
    assert f.value == 10.0


def test_check_finite_raises_on_overflow():
    t = Tape()
    x = t.leaf(1e200)
    with pytest.raises(NumericalError):
        x * x        # inf


def test_check_finite_off_allows_nonfinite():
    t = Tape(check_finite=False)
    x = t.leaf(1e200)
    f = x * x
    assert math.isinf(f.value)


def test_exp_clamp_region_value_and_zero_slope():
    t = Tape()
    x = t.leaf(100.0)
    f = vexp(x)
    assert f.value == pytest.approx(math.exp(30.0))
    g = backward(t, f)
    assert g[x.idx] == 0.0


# -- jets ------------------------------------------------------------------------


def test_jet_seed_and_const_shapes():
    j = Jet.seed(2.0, order=2)
    assert j.dense() == (2.0, 1.0, 0.0)
    c = Jet.const(5.0, order=3)
    assert c.dense() == (5.0, 0.0, 0.0, 0.0)
    assert c.order == 3


def test_jet_mul_leibniz():
    # (2 + 3h + h^2) * (1 - h): coefficients by hand
    a = Jet([2.0, 3.0, 1.0])
    b = Jet([1.0, -1.0, 0.0])
    p = jet_mul(a, b)
    assert p.dense() == (2.0, 1.0, -2.0)
    s = jet_add(a, jet_scale(2.0, b))
    assert s.dense() == (4.0, 1.0, 1.0)


@pytest.mark.parametrize("name,x0", [
    ("sin", 0.7), ("cos", -0.4), ("exp", 0.3), ("tanh", 0.9),
    ("square", 1.3), ("cube", -0.8), ("lorentz", 0.6), ("log1pabs", 1.1),
    ("sinh", 0.5), ("cosh", -0.2), ("identity", 2.0), ("one", 3.0),
])
def test_jet_derivatives_match_fd(name, x0):
    prim = get_primitive(name)
    j = jet_apply_primitive(prim, Jet.seed(x0, order=2))
    h = 1e-5
    f = lambda z: prim.eval(0, z)
    d1_fd = (f(x0 + h) - f(x0 - h)) / (2 * h)
    d2_fd = (f(x0 + h) - 2 * f(x0) + f(x0 - h)) / h ** 2
    assert j.derivative(1) == pytest.approx(d1_fd, rel=1e-4, abs=1e-7)
    assert j.derivative(2) == pytest.approx(d2_fd, rel=1e-3, abs=1e-4)


def test_jet_third_order_sin():
    j = jet_apply_primitive(get_primitive("sin"), Jet.seed(0.7, order=3))
    assert j.derivative(3) == pytest.approx(-math.cos(0.7), rel=1e-12)


def test_jet_chain_rule_with_inner_slope():
    # d/dt sin(w t) at t0: w cos(w t0); second: -w^2 sin(w t0)
    w, t0 = 2.5, 0.3
    inner = Jet([w * t0, w, None])
    j = jet_apply_primitive(get_primitive("sin"), inner)
    assert j.derivative(1) == pytest.approx(w * math.cos(w * t0), rel=1e-12)
    assert j.derivative(2) == pytest.approx(-w * w * math.sin(w * t0), rel=1e-12)


def test_jet_lane_coefficients():
    xs = np.array([0.2, 0.9, 1.7])
    j = jet_apply_primitive(get_primitive("square"), Jet.seed(xs, order=2))
    assert np.allclose(j.coeff(0), xs ** 2)
    assert np.allclose(j.derivative(1), 2 * xs)
    assert np.allclose(j.derivative(2), np.full(3, 2.0))


def test_jet_coeff_of_pruned_slot_is_zero():
    j = Jet.seed(1.0, order=1)
    assert j.coeff(3) == 0.0
    assert j.derivative(2) == 0.0
