"""Primitive registry: derivatives, safety policies, renderers, libraries."""

import math

import numpy as np
import pytest

from symkan.errors import ConfigError
from symkan.primitives import (PrimitiveLibrary, canonical_name,
                               default_library, get_primitive, make_library)

CANONICAL_ORDER = ["zero", "one", "identity", "square", "cube", "sin", "cos",
                   "tanh", "exp", "log1pabs", "lorentz", "sinh", "cosh"]

# namespace for evaluating rendered expression strings
_EVAL_NS = {
    "sin": math.sin, "cos": math.cos, "tanh": math.tanh, "exp": math.exp,
    "log": math.log, "abs": abs, "sinh": math.sinh, "cosh": math.cosh,
}


def test_default_library_order_and_size():
    lib = default_library()
    assert len(lib) == 13
    assert lib.names == CANONICAL_ORDER
    # position index is the selection index
    for i, name in enumerate(CANONICAL_ORDER):
        assert lib.index[name] == i
        assert lib[i].name == name


def test_library_subset_order_preserved():
    lib = make_library(["sin", "cos", "exp", "x", "x^2"])
    assert lib.names == ["sin", "cos", "exp", "identity", "square"]
    assert len(lib) == 5


def test_library_subset_eight():
    lib = make_library(["1", "x", "x^2", "sin", "cos", "sinh", "cosh", "exp"])
    assert lib.names == ["one", "identity", "square", "sin", "cos", "sinh",
                         "cosh", "exp"]
    assert len(lib) == 8


def test_library_unknown_name():
    with pytest.raises(ConfigError):
        make_library(["sin", "frobnicate"])
    with pytest.raises(ConfigError):
        canonical_name("frobnicate")


def test_library_empty():
    with pytest.raises(ConfigError):
        PrimitiveLibrary([])
    with pytest.raises(ConfigError):
        make_library([])


def test_library_duplicate():
    with pytest.raises(ConfigError):
        make_library(["sin", "sin"])
    with pytest.raises(ConfigError):
        make_library(["x", "identity"])  # alias collides with canonical name


def test_aliases():
    assert canonical_name("0") == "zero"
    assert canonical_name("1") == "one"
    assert canonical_name("x") == "identity"
    assert canonical_name("x^2") == "square"
    assert canonical_name("x**2") == "square"
    assert canonical_name("x^3") == "cube"
    assert canonical_name("x**3") == "cube"
    assert canonical_name("sin") == "sin"


def test_lorentz_at_zero():
    p = get_primitive("lorentz")
    f, d1, d2 = p.derivs(0.0, 2)
    assert f == 1.0
    assert d1 == 0.0
    assert d2 == -2.0


def test_square_at_three():
    p = get_primitive("square")
    assert p.derivs(3.0, 3) == [9.0, 6.0, 2.0, 0.0]


def test_tanh_third_derivative_at_zero():
    p = get_primitive("tanh")
    f, d1, d2, d3 = p.derivs(0.0, 3)
    assert f == 0.0
    assert d1 == 1.0
    assert d2 == 0.0
    assert d3 == -2.0


def test_exp_clamp():
    p = get_primitive("exp")
    e30 = math.exp(30.0)
    assert p.eval(0, 100.0) == e30
    assert p.eval(0, 30.0) == e30
    assert p.eval(1, 100.0) == 0.0  # flat outside the clamp window
    assert p.eval(0, -100.0) == math.exp(-30.0)
    assert p.eval(1, -100.0) == 0.0
    assert abs(p.eval(0, 100.0) - 1.0686e13) < 1e10


def test_sinh_cosh_clamp():
    for name in ("sinh", "cosh"):
        p = get_primitive(name)
        assert p.eval(0, 500.0) == p.eval(0, 30.0)
        assert p.eval(1, 500.0) == 0.0
        assert math.isfinite(p.eval(0, 1e300))


def test_log1pabs_kink():
    p = get_primitive("log1pabs")
    f, d1 = p.derivs(0.0, 1)
    assert f == 0.0
    assert d1 == 0.0
    # away from the kink it is smooth: d/dx log(1+x) = 1/(1+x) for x>0
    f, d1, d2, d3 = p.derivs(2.0, 3)
    assert abs(f - math.log(3.0)) < 1e-15
    assert abs(d1 - 1.0 / 3.0) < 1e-15
    assert abs(d2 + 1.0 / 9.0) < 1e-15
    assert abs(d3 - 2.0 / 27.0) < 1e-15
    # odd symmetry of the derivative
    assert p.eval(1, -2.0) == -p.eval(1, 2.0)


def test_constants_all_derivatives_zero():
    zero = get_primitive("zero")
    one = get_primitive("one")
    assert zero.derivs(3.7, 3) == [0.0, 0.0, 0.0, 0.0]
    assert one.derivs(-1.2, 3) == [1.0, 0.0, 0.0, 0.0]
    assert zero.is_const and one.is_const
    assert not get_primitive("sin").is_const


def test_derivatives_match_finite_differences():
    rng = np.random.default_rng(7)
    xs = rng.uniform(-5.0, 5.0, size=100)
    for name in CANONICAL_ORDER:
        p = get_primitive(name)
        for x in xs:
            if name == "log1pabs" and abs(x) < 1e-3:
                continue
            h1, h2 = 1e-5, 3e-4
            fd1 = (p.eval(0, x + h1) - p.eval(0, x - h1)) / (2 * h1)
            fd2 = (p.eval(0, x + h2) - 2 * p.eval(0, x) + p.eval(0, x - h2)) / h2**2
            an1 = p.eval(1, x)
            an2 = p.eval(2, x)
            assert abs(fd1 - an1) / max(abs(an1), 1.0) <= 1e-6, (name, x)
            assert abs(fd2 - an2) / max(abs(an2), 1.0) <= 1e-4, (name, x)


def test_third_derivatives_match_finite_differences():
    # five-point stencil for f'''；noisier, so looser bound and tamer domain
    rng = np.random.default_rng(11)
    xs = rng.uniform(-3.0, 3.0, size=25)
    h = 1e-2
    for name in CANONICAL_ORDER:
        p = get_primitive(name)
        for x in xs:
            if name == "log1pabs" and abs(x) < 0.1:
                continue
            fd3 = (p.eval(0, x + 2 * h) - 2 * p.eval(0, x + h)
                   + 2 * p.eval(0, x - h) - p.eval(0, x - 2 * h)) / (2 * h**3)
            an3 = p.eval(3, x)
            assert abs(fd3 - an3) / max(abs(an3), 1.0) <= 1e-3, (name, x)


def test_render_eval_round_trip():
    rng = np.random.default_rng(3)
    xs = rng.uniform(-5.0, 5.0, size=20)
    for name in CANONICAL_ORDER:
        p = get_primitive(name)
        expr = p.render("x")
        for x in xs:
            got = eval(expr, dict(_EVAL_NS), {"x": float(x)})
            want = p.eval(0, float(x))
            assert abs(got - want) <= 1e-12 * max(1.0, abs(want)), (name, x)


def test_render_strings():
    assert get_primitive("zero").render("q") == "0"
    assert get_primitive("one").render("q") == "1"
    assert get_primitive("identity").render("q") == "q"
    assert get_primitive("square").render("q") == "(q)**2"
    assert get_primitive("cube").render("q") == "(q)**3"
    assert get_primitive("sin").render("q") == "sin(q)"
    assert get_primitive("lorentz").render("q") == "1/(1 + (q)**2)"
    assert get_primitive("log1pabs").render("q") == "log(1 + abs(q))"


def test_eval_on_arrays():
    p = get_primitive("sin")
    x = np.array([0.0, math.pi / 2, math.pi])
    f, d1 = p.derivs(x, 1)
    np.testing.assert_allclose(f, np.sin(x), atol=1e-15)
    np.testing.assert_allclose(d1, np.cos(x), atol=1e-15)


def test_eval_order_bounds():
    p = get_primitive("sin")
    with pytest.raises(ValueError):
        p.derivs(0.0, 4)
    with pytest.raises(ValueError):
        p.derivs(0.0, -1)


def test_library_eval_by_name_and_index():
    lib = default_library()
    assert lib.eval("square", 1, 3.0) == 6.0
    assert lib.eval(3, 1, 3.0) == 6.0  # square is index 3
    assert [p.name for p in lib][:2] == ["zero", "one"]
