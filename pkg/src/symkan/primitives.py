"""Analytic primitive library.

Each primitive supplies its value and derivatives up to order 3 through one
`derivs` routine written against the generic value ops, so the identical
formulas serve plain numbers, arrays, and tape recording. Safety policy:
exp/sinh/cosh clamp their input to [-30, 30] (derivatives are those of the
clamped function, i.e. zero outside); log1pabs treats the kink at 0 as having
all derivatives 0; constants have derivative 0 everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .autodiff import (
    CLAMP, vabs, vcos, vcosh, veqsel, vexp, vlog, vmax2, vrecip, vsign0,
    vsin, vsinh, vtanh,
)
from .errors import ConfigError


def _inwin(x):
    """1 where x lies inside the clamp window [-CLAMP, CLAMP], else 0."""
    lo = vmax2(x, -CLAMP)
    clamped = -vmax2(-lo, -CLAMP)
    return veqsel(clamped, x)


@dataclass(frozen=True)
class Primitive:
    name: str
    derivs_fn: Callable = field(repr=False)
    render_fn: Callable = field(repr=False)
    is_const: bool = False

    def derivs(self, x, m: int) -> list:
        """[f(x), f'(x), ..., f^(m)(x)] sharing subexpressions where possible."""
        if not 0 <= m <= 3:
            raise ValueError("derivative order must be 0..3")
        return self.derivs_fn(x, m)

    def eval(self, k: int, x):
        """k-th derivative value at x, k <= 3."""
        return self.derivs(x, k)[k]

    def render(self, arg: str) -> str:
        return self.render_fn(arg)


def _zero(x, m):
    return [0.0] * (m + 1)


def _one(x, m):
    return [1.0] + [0.0] * m


def _identity(x, m):
    return [x, 1.0, 0.0, 0.0][: m + 1]


def _square(x, m):
    out = [x * x]
    if m >= 1:
        out.append(2.0 * x)
    if m >= 2:
        out.append(2.0)
    if m >= 3:
        out.append(0.0)
    return out


def _cube(x, m):
    x2 = x * x
    out = [x2 * x]
    if m >= 1:
        out.append(3.0 * x2)
    if m >= 2:
        out.append(6.0 * x)
    if m >= 3:
        out.append(6.0)
    return out


def _sin(x, m):
    s = vsin(x)
    out = [s]
    if m >= 1:
        out.append(vcos(x))
    if m >= 2:
        out.append(-s)
    if m >= 3:
        out.append(-out[1])
    return out


def _cos(x, m):
    c = vcos(x)
    out = [c]
    if m >= 1:
        s = vsin(x)
        out.append(-s)
    if m >= 2:
        out.append(-c)
    if m >= 3:
        out.append(s)
    return out


def _tanh(x, m):
    t = vtanh(x)
    out = [t]
    if m >= 1:
        t2 = t * t
        f1 = 1.0 - t2
        out.append(f1)
    if m >= 2:
        out.append(-2.0 * (t * f1))
    if m >= 3:
        out.append(f1 * (6.0 * t2 - 2.0))
    return out


def _exp(x, m):
    e = vexp(x)
    out = [e]
    if m >= 1:
        d = e * _inwin(x)  # derivative of the clamped function: 0 outside
        out.extend([d] * m)
    return out


def _log1pabs(x, m):
    a = vabs(x)
    d = a + 1.0
    out = [vlog(d)]
    if m >= 1:
        s = vsign0(x)
        r = vrecip(d)
        out.append(s * r)
    if m >= 2:
        s2 = s * s
        rr = r * r
        out.append(-(s2 * rr))
    if m >= 3:
        out.append(2.0 * (s * (rr * r)))
    return out


def _lorentz(x, m):
    x2 = x * x
    f = vrecip(x2 + 1.0)
    out = [f]
    if m >= 1:
        f2 = f * f
        out.append(-2.0 * (x * f2))
    if m >= 2:
        f3 = f2 * f
        out.append(8.0 * (x2 * f3) - 2.0 * f2)
    if m >= 3:
        out.append(24.0 * (x * f3) - 48.0 * ((x2 * x) * (f2 * f2)))
    return out


def _sinh(x, m):
    s = vsinh(x)
    out = [s]
    if m >= 1:
        g = _inwin(x)
        cg = vcosh(x) * g
        out.append(cg)
    if m >= 2:
        sg = s * g
        out.append(sg)
    if m >= 3:
        out.append(cg)
    return out


def _cosh(x, m):
    c = vcosh(x)
    out = [c]
    if m >= 1:
        g = _inwin(x)
        sg = vsinh(x) * g
        out.append(sg)
    if m >= 2:
        out.append(c * g)
    if m >= 3:
        out.append(sg)
    return out


_PRIMS = {
    "zero": Primitive("zero", _zero, lambda a: "0", is_const=True),
    "one": Primitive("one", _one, lambda a: "1", is_const=True),
    "identity": Primitive("identity", _identity, lambda a: a),
    "square": Primitive("square", _square, lambda a: f"({a})**2"),
    "cube": Primitive("cube", _cube, lambda a: f"({a})**3"),
    "sin": Primitive("sin", _sin, lambda a: f"sin({a})"),
    "cos": Primitive("cos", _cos, lambda a: f"cos({a})"),
    "tanh": Primitive("tanh", _tanh, lambda a: f"tanh({a})"),
    "exp": Primitive("exp", _exp, lambda a: f"exp({a})"),
    "log1pabs": Primitive("log1pabs", _log1pabs, lambda a: f"log(1 + abs({a}))"),
    "lorentz": Primitive("lorentz", _lorentz, lambda a: f"1/(1 + ({a})**2)"),
    "sinh": Primitive("sinh", _sinh, lambda a: f"sinh({a})"),
    "cosh": Primitive("cosh", _cosh, lambda a: f"cosh({a})"),
}

DEFAULT_ORDER = [
    "zero", "one", "identity", "square", "cube", "sin", "cos", "tanh",
    "exp", "log1pabs", "lorentz", "sinh", "cosh",
]

ALIASES = {
    "0": "zero",
    "1": "one",
    "x": "identity",
    "x^2": "square",
    "x**2": "square",
    "x^3": "cube",
    "x**3": "cube",
}


class PrimitiveLibrary:
    """Ordered set of primitives; the position index is the selection index."""

    def __init__(self, prims: list[Primitive]):
        if not prims:
            raise ConfigError("primitive library cannot be empty")
        self.prims = list(prims)
        self.index = {p.name: i for i, p in enumerate(self.prims)}
        if len(self.index) != len(self.prims):
            raise ConfigError("duplicate primitive in library")

    def __len__(self):
        return len(self.prims)

    def __getitem__(self, i: int) -> Primitive:
        return self.prims[i]

    def __iter__(self):
        return iter(self.prims)

    @property
    def names(self) -> list[str]:
        return [p.name for p in self.prims]

    def eval(self, name_or_idx, k: int, x):
        p = self.prims[name_or_idx] if isinstance(name_or_idx, int) else self.prims[self.index[name_or_idx]]
        return p.eval(k, x)


def canonical_name(name: str) -> str:
    n = ALIASES.get(name, name)
    if n not in _PRIMS:
        raise ConfigError(f"unknown primitive '{name}'")
    return n


def default_library() -> PrimitiveLibrary:
    return PrimitiveLibrary([_PRIMS[n] for n in DEFAULT_ORDER])


def make_library(names: list[str]) -> PrimitiveLibrary:
    """Library from config names (aliases allowed), order preserved."""
    return PrimitiveLibrary([_PRIMS[canonical_name(n)] for n in names])


def get_primitive(name: str) -> Primitive:
    return _PRIMS[canonical_name(name)]
