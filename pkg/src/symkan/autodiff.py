"""Reverse-mode autodiff on a flat scalar tape, plus truncated Taylor jets.

The tape records a scalar program as parallel arrays (opcode, parent ids,
float payload). Each node is semantically a scalar; during batched execution
a node's value may be a 1-d array holding that scalar for every sample point
("lanes"). There are no tensor operations: the only batch-aware rule is that
a scalar leaf consumed by lane-valued ops accumulates its adjoint as the sum
over lanes, in lane order.

Values are computed eagerly while recording, so a freshly recorded tape
doubles as a reference evaluation. Frozen tapes can be re-executed with new
leaf bindings through `symkan.engine`.

Taylor jets carry coefficients c_k = u^(k)/k! up to order 3 and propagate
through primitives by Faa di Bruno's formula. Jet coefficients may be plain
numbers, arrays, or tape variables, so the same network code serves
recording, plain evaluation, and derivative checks.
"""

from __future__ import annotations

import math
from typing import Callable, Union

import numpy as np

from .errors import NumericalError

# opcodes (mirrored by the compiled kernels in symkan.engine)
OP_LEAF = 0
OP_CONST = 1
OP_ADD = 2
OP_SUB = 3
OP_MUL = 4
OP_DIV = 5
OP_MULADD = 6   # a*b + c
OP_SCALE = 7    # aux * a
OP_ADDC = 8     # a + aux
OP_NEG = 9
OP_RECIP = 10
OP_EXPC = 11    # exp(clip(a, -30, 30))
OP_LOG = 12
OP_SIN = 13
OP_COS = 14
OP_TANH = 15
OP_SINHC = 16   # sinh(clip(a, -30, 30))
OP_COSHC = 17   # cosh(clip(a, -30, 30))
OP_ABS = 18
OP_SIGN0 = 19   # sign with sign(0) = 0; derivative 0 everywhere
OP_POWA = 20    # |a|^aux
OP_POWS = 21    # sign(a)*|a|^aux
OP_MAX2 = 22    # max(a, b); tie -> a
OP_EQSEL = 23   # 1.0 where a == b else 0.0; no gradient
OP_STMIX = 24   # value of b; straight-through gradient 1 -> a, 0 -> b

OP_NAMES = [
    "leaf", "const", "add", "sub", "mul", "div", "muladd", "scale", "addc",
    "neg", "recip", "expc", "log", "sin", "cos", "tanh", "sinhc", "coshc",
    "abs", "sign0", "powa", "pows", "max2", "eqsel", "stmix",
]

CLAMP = 30.0

Value = Union[float, np.ndarray]


def _is_finite(v) -> bool:
    if isinstance(v, np.ndarray):
        return bool(np.isfinite(v).all())
    return math.isfinite(v)


def _eval_op(op: int, va, vb, vc, aux):
    if op == OP_ADD:
        return va + vb
    if op == OP_SUB:
        return va - vb
    if op == OP_MUL:
        return va * vb
    if op == OP_DIV:
        return va / vb
    if op == OP_MULADD:
        return va * vb + vc
    if op == OP_SCALE:
        return aux * va
    if op == OP_ADDC:
        return va + aux
    if op == OP_NEG:
        return -va
    if op == OP_RECIP:
        return 1.0 / va
    if op == OP_EXPC:
        return np.exp(np.clip(va, -CLAMP, CLAMP))
    if op == OP_LOG:
        return np.log(va)
    if op == OP_SIN:
        return np.sin(va)
    if op == OP_COS:
        return np.cos(va)
    if op == OP_TANH:
        return np.tanh(va)
    if op == OP_SINHC:
        return np.sinh(np.clip(va, -CLAMP, CLAMP))
    if op == OP_COSHC:
        return np.cosh(np.clip(va, -CLAMP, CLAMP))
    if op == OP_ABS:
        return np.abs(va)
    if op == OP_SIGN0:
        return np.sign(va)
    if op == OP_POWA:
        return np.abs(va) ** aux
    if op == OP_POWS:
        return np.sign(va) * np.abs(va) ** aux
    if op == OP_MAX2:
        return np.where(va >= vb, va, vb) if isinstance(va, np.ndarray) or isinstance(vb, np.ndarray) else (va if va >= vb else vb)
    if op == OP_EQSEL:
        return (np.asarray(va == vb)).astype(float) if isinstance(va, np.ndarray) or isinstance(vb, np.ndarray) else (1.0 if va == vb else 0.0)
    if op == OP_STMIX:
        return vb
    raise AssertionError(f"bad opcode {op}")


def _accumulate(op: int, i: int, pa, pb, pc, aux, vals, adj, st_on: bool):
    """Scatter node i's adjoint to its parents. Reference implementation."""
    ai = adj[i]
    a, b, c = pa[i], pb[i], pc[i]
    if op == OP_ADD:
        adj[a] = adj[a] + ai
        adj[b] = adj[b] + ai
    elif op == OP_SUB:
        adj[a] = adj[a] + ai
        adj[b] = adj[b] - ai
    elif op == OP_MUL:
        adj[a] = adj[a] + ai * vals[b]
        adj[b] = adj[b] + ai * vals[a]
    elif op == OP_DIV:
        adj[a] = adj[a] + ai / vals[b]
        adj[b] = adj[b] - ai * vals[i] / vals[b]
    elif op == OP_MULADD:
        adj[a] = adj[a] + ai * vals[b]
        adj[b] = adj[b] + ai * vals[a]
        adj[c] = adj[c] + ai
    elif op == OP_SCALE:
        adj[a] = adj[a] + ai * aux[i]
    elif op == OP_ADDC:
        adj[a] = adj[a] + ai
    elif op == OP_NEG:
        adj[a] = adj[a] - ai
    elif op == OP_RECIP:
        adj[a] = adj[a] - ai * vals[i] * vals[i]
    elif op == OP_EXPC:
        adj[a] = adj[a] + ai * vals[i] * (np.abs(vals[a]) < CLAMP)
    elif op == OP_LOG:
        adj[a] = adj[a] + ai / vals[a]
    elif op == OP_SIN:
        adj[a] = adj[a] + ai * np.cos(vals[a])
    elif op == OP_COS:
        adj[a] = adj[a] - ai * np.sin(vals[a])
    elif op == OP_TANH:
        adj[a] = adj[a] + ai * (1.0 - vals[i] * vals[i])
    elif op == OP_SINHC:
        adj[a] = adj[a] + ai * np.cosh(np.clip(vals[a], -CLAMP, CLAMP)) * (np.abs(vals[a]) < CLAMP)
    elif op == OP_COSHC:
        adj[a] = adj[a] + ai * np.sinh(np.clip(vals[a], -CLAMP, CLAMP)) * (np.abs(vals[a]) < CLAMP)
    elif op == OP_ABS:
        adj[a] = adj[a] + ai * np.sign(vals[a])
    elif op == OP_POWA:
        va = vals[a]
        p = aux[i]
        adj[a] = adj[a] + ai * p * np.sign(va) * np.where(va == 0.0, 0.0, np.abs(va) ** (p - 1.0))
    elif op == OP_POWS:
        va = vals[a]
        p = aux[i]
        adj[a] = adj[a] + ai * p * np.where(va == 0.0, 0.0, np.abs(va) ** (p - 1.0))
    elif op == OP_MAX2:
        ge = vals[a] >= vals[b]
        adj[a] = adj[a] + ai * ge
        adj[b] = adj[b] + ai * (~ge if isinstance(ge, np.ndarray) else (not ge))
    elif op == OP_STMIX:
        if st_on:
            adj[a] = adj[a] + ai
    # OP_SIGN0, OP_EQSEL, OP_CONST, OP_LEAF: no gradient


class TapeVar:
    """Handle to one tape node. Supports arithmetic with numbers and TapeVars."""

    __slots__ = ("tape", "idx")

    def __init__(self, tape: "Tape", idx: int):
        self.tape = tape
        self.idx = idx

    @property
    def value(self):
        return self.tape.vals[self.idx]

    def __repr__(self):
        t = self.tape
        return f"TapeVar({OP_NAMES[t.op[self.idx]]}@{self.idx}={t.vals[self.idx]!r})"

    def _emit(self, op, other=None, aux=0.0, third=None):
        return self.tape._node(op, self.idx,
                               other.idx if other is not None else -1,
                               third.idx if third is not None else -1, aux)

    def __add__(self, o):
        if isinstance(o, TapeVar):
            return self._emit(OP_ADD, o)
        o = float(o)
        return self if o == 0.0 else self._emit(OP_ADDC, aux=o)

    __radd__ = __add__

    def __sub__(self, o):
        if isinstance(o, TapeVar):
            return self._emit(OP_SUB, o)
        o = float(o)
        return self if o == 0.0 else self._emit(OP_ADDC, aux=-o)

    def __rsub__(self, o):
        return self._emit(OP_NEG)._emit(OP_ADDC, aux=float(o)) if float(o) != 0.0 else self._emit(OP_NEG)

    def __mul__(self, o):
        if isinstance(o, TapeVar):
            return self._emit(OP_MUL, o)
        o = float(o)
        if o == 1.0:
            return self
        if o == 0.0:
            return self.tape.const(0.0)
        return self._emit(OP_SCALE, aux=o)

    __rmul__ = __mul__

    def __neg__(self):
        return self._emit(OP_NEG)

    def __truediv__(self, o):
        if isinstance(o, TapeVar):
            return self._emit(OP_DIV, o)
        return self * (1.0 / float(o))

    def __rtruediv__(self, o):
        r = self._emit(OP_RECIP)
        return r * float(o)


class Tape:
    """Append-only program of scalar operations with eagerly computed values.

    `check_finite=True` raises NumericalError naming the offending operation
    as soon as a recorded node produces a NaN or infinity.
    """

    def __init__(self, check_finite: bool = True):
        self.op: list[int] = []
        self.pa: list[int] = []
        self.pb: list[int] = []
        self.pc: list[int] = []
        self.aux: list[float] = []
        self.vals: list = []
        self.tags: dict[str, list[int]] = {}
        self.fixed: dict[int, Value] = {}   # leaves with permanent bindings
        self.check_finite = check_finite
        self.lanes: int | None = None
        self._const_cache: dict[float, int] = {}
        self.frozen = None

    def __len__(self):
        return len(self.op)

    # -- construction ------------------------------------------------------

    def _node(self, op, a=-1, b=-1, c=-1, aux=0.0) -> TapeVar:
        if self.frozen is not None:
            raise NumericalError("tape is frozen; no further recording allowed")
        va = self.vals[a] if a >= 0 else None
        vb = self.vals[b] if b >= 0 else None
        vc = self.vals[c] if c >= 0 else None
        v = _eval_op(op, va, vb, vc, aux)
        if self.check_finite and not _is_finite(v):
            raise NumericalError(f"non-finite value produced by '{OP_NAMES[op]}' at node {len(self.op)}")
        self.op.append(op)
        self.pa.append(a)
        self.pb.append(b)
        self.pc.append(c)
        self.aux.append(aux)
        self.vals.append(v)
        return TapeVar(self, len(self.op) - 1)

    def _check_lanes(self, v):
        if isinstance(v, np.ndarray):
            if v.ndim != 1:
                raise NumericalError("tape values must be scalars or 1-d arrays")
            if self.lanes is None:
                self.lanes = v.shape[0]
            elif v.shape[0] != self.lanes:
                raise NumericalError(f"lane width mismatch: {v.shape[0]} vs {self.lanes}")

    def leaf(self, value, tag: str | None = None) -> TapeVar:
        """External input. Rebindable when the tape is re-executed."""
        if isinstance(value, np.ndarray):
            value = np.asarray(value, dtype=float)
            self._check_lanes(value)
        else:
            value = float(value)
        if self.check_finite and not _is_finite(value):
            raise NumericalError("non-finite value bound to leaf")
        tv = self._new_raw(OP_LEAF, value)
        if tag is not None:
            self.tags.setdefault(tag, []).append(tv.idx)
        return tv

    def const_row(self, value: np.ndarray) -> TapeVar:
        """Array constant: a leaf with a permanent binding."""
        tv = self.leaf(value)
        self.fixed[tv.idx] = self.vals[tv.idx]
        return tv

    def _new_raw(self, op, value) -> TapeVar:
        self.op.append(op)
        self.pa.append(-1)
        self.pb.append(-1)
        self.pc.append(-1)
        self.aux.append(value if isinstance(value, float) and op == OP_CONST else 0.0)
        self.vals.append(value)
        return TapeVar(self, len(self.op) - 1)

    def const(self, value: float) -> TapeVar:
        value = float(value)
        hit = self._const_cache.get(value)
        if hit is not None:
            return TapeVar(self, hit)
        tv = self._new_raw(OP_CONST, value)
        self.aux[tv.idx] = value
        self._const_cache[value] = tv.idx
        return tv

    def lift(self, x) -> TapeVar:
        """Coerce a number or array into a tape node."""
        if isinstance(x, TapeVar):
            if x.tape is not self:
                raise NumericalError("tape variables from different tapes cannot mix")
            return x
        if isinstance(x, np.ndarray):
            return self.const_row(x)
        return self.const(float(x))

    def muladd(self, a, b, c) -> TapeVar:
        """a*b + c in one node."""
        if isinstance(a, TapeVar) and isinstance(b, TapeVar) and isinstance(c, TapeVar):
            return self._node(OP_MULADD, a.idx, b.idx, c.idx)
        return a * b + c  # degenerate mixes fall back to two nodes

    # -- re-execution over recorded values ---------------------------------

    def set_leaf(self, tv: TapeVar, value):
        if self.op[tv.idx] != OP_LEAF:
            raise NumericalError("set_leaf on a non-leaf node")
        if isinstance(value, np.ndarray):
            value = np.asarray(value, dtype=float)
            self._check_lanes(value)
        else:
            value = float(value)
        self.vals[tv.idx] = value

    def replay(self):
        """Recompute all node values from current leaf values (reference path)."""
        op, pa, pb, pc, aux, vals = self.op, self.pa, self.pb, self.pc, self.aux, self.vals
        for i in range(len(op)):
            o = op[i]
            if o == OP_LEAF or o == OP_CONST:
                continue
            a, b, c = pa[i], pb[i], pc[i]
            vals[i] = _eval_op(o, vals[a] if a >= 0 else None,
                               vals[b] if b >= 0 else None,
                               vals[c] if c >= 0 else None, aux[i])


GradientMap = dict


def backward(tape: Tape, root: TapeVar | None = None, st_through_mask: bool = True,
             seeds: dict | None = None) -> GradientMap:
    """Adjoints w.r.t. every leaf of the tape.

    Either `root` (seeded with adjoint 1) or `seeds` ({node id: adjoint value})
    starts the sweep; both may be given. Returns {leaf id: gradient}, with 0.0
    for leaves no seeded node reaches. Lane-valued intermediates contribute
    lane sums to scalar leaves. The tape itself is not modified; repeated
    calls give identical results.
    """
    n = len(tape.op)
    adj: list = [0.0] * n
    start = -1
    if root is not None:
        rv = tape.vals[root.idx]
        adj[root.idx] = np.ones_like(rv) if isinstance(rv, np.ndarray) else 1.0
        start = root.idx
    if seeds:
        for i, s in seeds.items():
            adj[i] = adj[i] + s
            start = max(start, i)
    op, pa, pb, pc, aux, vals = tape.op, tape.pa, tape.pb, tape.pc, tape.aux, tape.vals
    for i in range(start, -1, -1):
        o = op[i]
        if o == OP_LEAF or o == OP_CONST:
            continue
        ai = adj[i]
        if isinstance(ai, float) and ai == 0.0:
            continue
        _accumulate(o, i, pa, pb, pc, aux, vals, adj, st_through_mask)
    out: GradientMap = {}
    for i in range(n):
        if op[i] == OP_LEAF:
            g = adj[i]
            if isinstance(g, np.ndarray) and not isinstance(vals[i], np.ndarray):
                g = float(g.sum())
            out[i] = g
    return out


def grad_check(fn: Callable, point: np.ndarray, h: float = 1e-6) -> float:
    """Max relative error between analytic gradient and central differences.

    `fn(theta) -> (value, gradient)`; only the value is used for the finite
    difference stencil. Relative error uses an absolute floor of 1e-12 so a
    constant function reports ~0.
    """
    point = np.asarray(point, dtype=float)
    _, g = fn(point)
    g = np.asarray(g, dtype=float)
    worst = 0.0
    for i in range(point.size):
        e = np.zeros_like(point)
        e[i] = h
        fp, _ = fn(point + e)
        fm, _ = fn(point - e)
        fd = (fp - fm) / (2.0 * h)
        err = abs(g[i] - fd) / max(abs(g[i]), abs(fd), 1e-12)
        worst = max(worst, err)
    return worst


# -- generic value ops (dispatch on TapeVar vs number/array) ----------------

def _tv(*xs):
    for x in xs:
        if isinstance(x, TapeVar):
            return x.tape
    return None


def vmuladd(a, b, c):
    a_tv = isinstance(a, TapeVar)
    b_tv = isinstance(b, TapeVar)
    if a_tv and b_tv and isinstance(c, TapeVar):
        return a.tape.muladd(a, b, c)
    if not (a_tv or b_tv):
        return c + a * b
    return a * b + c


def _unary(x, op, np_fn, aux=0.0):
    if isinstance(x, TapeVar):
        return x._emit(op, aux=aux)
    return np_fn(x)


def vrecip(x):
    return _unary(x, OP_RECIP, lambda v: 1.0 / v)


def vexp(x):
    return _unary(x, OP_EXPC, lambda v: np.exp(np.clip(v, -CLAMP, CLAMP)))


def vlog(x):
    return _unary(x, OP_LOG, np.log)


def vsin(x):
    return _unary(x, OP_SIN, np.sin)


def vcos(x):
    return _unary(x, OP_COS, np.cos)


def vtanh(x):
    return _unary(x, OP_TANH, np.tanh)


def vsinh(x):
    return _unary(x, OP_SINHC, lambda v: np.sinh(np.clip(v, -CLAMP, CLAMP)))


def vcosh(x):
    return _unary(x, OP_COSHC, lambda v: np.cosh(np.clip(v, -CLAMP, CLAMP)))


def vabs(x):
    return _unary(x, OP_ABS, np.abs)


def vsign0(x):
    return _unary(x, OP_SIGN0, np.sign)


def vpow_abs(x, p: float):
    return _unary(x, OP_POWA, lambda v: np.abs(v) ** p, aux=float(p))


def vpow_signed(x, p: float):
    return _unary(x, OP_POWS, lambda v: np.sign(v) * np.abs(v) ** p, aux=float(p))


def vmax2(a, b):
    if isinstance(a, TapeVar) or isinstance(b, TapeVar):
        t = _tv(a, b)
        return t._node(OP_MAX2, t.lift(a).idx, t.lift(b).idx)
    return np.where(a >= b, a, b) if isinstance(a, np.ndarray) or isinstance(b, np.ndarray) else (a if a >= b else b)


def veqsel(a, b):
    if isinstance(a, TapeVar) or isinstance(b, TapeVar):
        t = _tv(a, b)
        return t._node(OP_EQSEL, t.lift(a).idx, t.lift(b).idx)
    if isinstance(a, np.ndarray) or isinstance(b, np.ndarray):
        return np.where(a == b, 1.0, 0.0)
    return 1.0 if a == b else 0.0


def vstmix(soft, hard):
    """Forward value of `hard`; gradient flows to `soft` (straight-through)."""
    if isinstance(soft, TapeVar) or isinstance(hard, TapeVar):
        t = _tv(soft, hard)
        return t._node(OP_STMIX, t.lift(soft).idx, t.lift(hard).idx)
    return hard


def vsigmoid(x):
    return vrecip(vexp(-x) + 1.0)


def vsum(xs):
    it = iter(xs)
    acc = next(it)
    for x in it:
        acc = acc + x
    return acc


# -- truncated Taylor jets ---------------------------------------------------

_FACT_INV = (1.0, 1.0, 0.5, 1.0 / 6.0)


class Jet:
    """Taylor coefficients (c_0..c_m), m <= 3, with c_k = u^(k)/k!.

    Coefficients may be numbers, arrays, or TapeVars. None marks a structural
    zero so downstream arithmetic can skip work.
    """

    __slots__ = ("c",)

    def __init__(self, coeffs):
        self.c = tuple(coeffs)
        if not 1 <= len(self.c) <= 4:
            raise ValueError("jet order must be 0..3")

    @property
    def order(self) -> int:
        return len(self.c) - 1

    @staticmethod
    def seed(value, slope=1.0, order: int = 3) -> "Jet":
        c = [value, slope] + [None] * (order - 1)
        return Jet(c[: order + 1])

    @staticmethod
    def const(value, order: int = 3) -> "Jet":
        return Jet([value] + [None] * order)

    def coeff(self, k: int):
        v = self.c[k] if k < len(self.c) else None
        return 0.0 if v is None else v

    def derivative(self, k: int):
        """u^(k) recovered from the coefficient: k! * c_k."""
        return self.coeff(k) * math.factorial(k)

    def dense(self) -> tuple:
        return tuple(self.coeff(k) for k in range(len(self.c)))

    def __repr__(self):
        return f"Jet{self.dense()!r}"


def _zadd(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return a + b


def _zmul(a, b):
    if a is None or b is None:
        return None
    return a * b


def jet_add(x: Jet, y: Jet) -> Jet:
    m = max(x.order, y.order)
    return Jet([_zadd(x.c[k] if k <= x.order else None,
                      y.c[k] if k <= y.order else None) for k in range(m + 1)])


def jet_scale(s, x: Jet) -> Jet:
    return Jet([None if ck is None else s * ck for ck in x.c])


def jet_mul(x: Jet, y: Jet) -> Jet:
    """Truncated Cauchy product."""
    m = max(x.order, y.order)
    out = []
    for k in range(m + 1):
        acc = None
        for i in range(k + 1):
            xi = x.c[i] if i <= x.order else None
            yj = y.c[k - i] if k - i <= y.order else None
            acc = _zadd(acc, _zmul(xi, yj))
        out.append(acc)
    return Jet(out)


def jet_apply_primitive(prim, x: Jet) -> Jet:
    """Compose a library primitive with a jet via Faa di Bruno (order <= 3).

    `prim` supplies derivs(x0, m) -> [f(x0), f'(x0), ..., f^(m)(x0)].
    """
    m = x.order
    x0 = x.c[0]
    x1 = x.c[1] if m >= 1 else None
    x2 = x.c[2] if m >= 2 else None
    x3 = x.c[3] if m >= 3 else None
    need = 0
    if m >= 1 and x1 is not None:
        need = m
    elif m >= 2 and x2 is not None:
        need = m - 1
    elif m >= 3 and x3 is not None:
        need = 1
    f = prim.derivs(x0, need)
    out = [f[0]]
    if m >= 1:
        out.append(_zmul(f[1] if need >= 1 else None, x1))
    if m >= 2:
        t = _zmul(f[1] if need >= 1 else None, x2)
        if x1 is not None and need >= 2:
            sq = _zmul(x1, x1)
            t = _zadd(t, 0.5 * (f[2] * sq))
        out.append(t)
    if m >= 3:
        t = _zmul(f[1] if need >= 1 else None, x3)
        if x1 is not None and x2 is not None and need >= 2:
            t = _zadd(t, f[2] * _zmul(x1, x2))
        if x1 is not None and need >= 3:
            cube = _zmul(_zmul(x1, x1), x1)
            t = _zadd(t, _FACT_INV[3] * (f[3] * cube))
        out.append(t)
    return Jet(out)


def jet_seed(x, order: int = 3) -> Jet:
    """Jet of the identity at x: (x, 1, 0, ...)."""
    return Jet.seed(x, 1.0, order)
