"""Re-execution of frozen tapes over lane batches.

A recorded tape freezes into flat numpy arrays. The runner evaluates it on a
matrix of node values (nodes x lanes), processing lanes in chunks so the
working set stays cache-sized, and accumulates leaf adjoints across chunks in
lane order. Two interchangeable kernels exist: numba-compiled loops (default
when numba imports) and a numpy row loop with identical semantics.
"""

from __future__ import annotations

import os

import numpy as np

from . import autodiff as ad
from .errors import NumericalError

try:
    from numba import njit

    _HAVE_NUMBA = True
except Exception:  # pragma: no cover - sandbox always has numba
    njit = None
    _HAVE_NUMBA = False

_CLAMP = ad.CLAMP


def _fwd_py(op, pa, pb, pc, aux, V):
    for i in range(op.shape[0]):
        o = op[i]
        if o == ad.OP_LEAF or o == ad.OP_CONST:
            continue
        a, b, c = pa[i], pb[i], pc[i]
        V[i] = ad._eval_op(o, V[a] if a >= 0 else None,
                           V[b] if b >= 0 else None,
                           V[c] if c >= 0 else None, aux[i])


def _bwd_py(op, pa, pb, pc, aux, V, A, st_on):
    for i in range(op.shape[0] - 1, -1, -1):
        o = op[i]
        if o == ad.OP_LEAF:
            continue
        if o != ad.OP_CONST:
            ad._accumulate(o, i, pa, pb, pc, aux, V, A, st_on > 0.5)
        A[i] = 0.0


if _HAVE_NUMBA:

    @njit(cache=True)
    def _fwd_nb(op, pa, pb, pc, aux, V):  # pragma: no cover - compiled
        n, lanes = V.shape
        for i in range(n):
            o = op[i]
            if o <= 1:  # leaf, const
                continue
            a = V[pa[i]]
            r = V[i]
            if o == 2:  # add
                b = V[pb[i]]
                for j in range(lanes):
                    r[j] = a[j] + b[j]
            elif o == 3:  # sub
                b = V[pb[i]]
                for j in range(lanes):
                    r[j] = a[j] - b[j]
            elif o == 4:  # mul
                b = V[pb[i]]
                for j in range(lanes):
                    r[j] = a[j] * b[j]
            elif o == 5:  # div
                b = V[pb[i]]
                for j in range(lanes):
                    r[j] = a[j] / b[j]
            elif o == 6:  # muladd
                b = V[pb[i]]
                c = V[pc[i]]
                for j in range(lanes):
                    r[j] = a[j] * b[j] + c[j]
            elif o == 7:  # scale
                s = aux[i]
                for j in range(lanes):
                    r[j] = s * a[j]
            elif o == 8:  # addc
                s = aux[i]
                for j in range(lanes):
                    r[j] = a[j] + s
            elif o == 9:  # neg
                for j in range(lanes):
                    r[j] = -a[j]
            elif o == 10:  # recip
                for j in range(lanes):
                    r[j] = 1.0 / a[j]
            elif o == 11:  # expc
                for j in range(lanes):
                    x = a[j]
                    if x > 30.0:
                        x = 30.0
                    elif x < -30.0:
                        x = -30.0
                    r[j] = np.exp(x)
            elif o == 12:  # log
                for j in range(lanes):
                    r[j] = np.log(a[j])
            elif o == 13:  # sin
                for j in range(lanes):
                    r[j] = np.sin(a[j])
            elif o == 14:  # cos
                for j in range(lanes):
                    r[j] = np.cos(a[j])
            elif o == 15:  # tanh
                for j in range(lanes):
                    r[j] = np.tanh(a[j])
            elif o == 16:  # sinhc
                for j in range(lanes):
                    x = a[j]
                    if x > 30.0:
                        x = 30.0
                    elif x < -30.0:
                        x = -30.0
                    r[j] = np.sinh(x)
            elif o == 17:  # coshc
                for j in range(lanes):
                    x = a[j]
                    if x > 30.0:
                        x = 30.0
                    elif x < -30.0:
                        x = -30.0
                    r[j] = np.cosh(x)
            elif o == 18:  # abs
                for j in range(lanes):
                    r[j] = abs(a[j])
            elif o == 19:  # sign0
                for j in range(lanes):
                    x = a[j]
                    r[j] = 1.0 if x > 0.0 else (-1.0 if x < 0.0 else 0.0)
            elif o == 20:  # powa
                p = aux[i]
                for j in range(lanes):
                    r[j] = abs(a[j]) ** p
            elif o == 21:  # pows
                p = aux[i]
                for j in range(lanes):
                    x = a[j]
                    s = 1.0 if x > 0.0 else (-1.0 if x < 0.0 else 0.0)
                    r[j] = s * abs(x) ** p
            elif o == 22:  # max2, tie -> a
                b = V[pb[i]]
                for j in range(lanes):
                    r[j] = a[j] if a[j] >= b[j] else b[j]
            elif o == 23:  # eqsel
                b = V[pb[i]]
                for j in range(lanes):
                    r[j] = 1.0 if a[j] == b[j] else 0.0
            elif o == 24:  # stmix: forward value of b
                b = V[pb[i]]
                for j in range(lanes):
                    r[j] = b[j]

    @njit(cache=True)
    def _bwd_nb(op, pa, pb, pc, aux, V, A, st_on):  # pragma: no cover - compiled
        n, lanes = V.shape
        for i in range(n - 1, -1, -1):
            o = op[i]
            if o == 0:  # leaf rows persist for extraction
                continue
            ai = A[i]
            if o == 2:  # add
                x = A[pa[i]]
                y = A[pb[i]]
                for j in range(lanes):
                    x[j] += ai[j]
                    y[j] += ai[j]
            elif o == 3:  # sub
                x = A[pa[i]]
                y = A[pb[i]]
                for j in range(lanes):
                    x[j] += ai[j]
                    y[j] -= ai[j]
            elif o == 4:  # mul
                x = A[pa[i]]
                y = A[pb[i]]
                va = V[pa[i]]
                vb = V[pb[i]]
                for j in range(lanes):
                    x[j] += ai[j] * vb[j]
                    y[j] += ai[j] * va[j]
            elif o == 5:  # div
                x = A[pa[i]]
                y = A[pb[i]]
                vb = V[pb[i]]
                vi = V[i]
                for j in range(lanes):
                    x[j] += ai[j] / vb[j]
                    y[j] -= ai[j] * vi[j] / vb[j]
            elif o == 6:  # muladd
                x = A[pa[i]]
                y = A[pb[i]]
                z = A[pc[i]]
                va = V[pa[i]]
                vb = V[pb[i]]
                for j in range(lanes):
                    x[j] += ai[j] * vb[j]
                    y[j] += ai[j] * va[j]
                    z[j] += ai[j]
            elif o == 7:  # scale
                x = A[pa[i]]
                s = aux[i]
                for j in range(lanes):
                    x[j] += ai[j] * s
            elif o == 8:  # addc
                x = A[pa[i]]
                for j in range(lanes):
                    x[j] += ai[j]
            elif o == 9:  # neg
                x = A[pa[i]]
                for j in range(lanes):
                    x[j] -= ai[j]
            elif o == 10:  # recip
                x = A[pa[i]]
                vi = V[i]
                for j in range(lanes):
                    x[j] -= ai[j] * vi[j] * vi[j]
            elif o == 11:  # expc
                x = A[pa[i]]
                vi = V[i]
                va = V[pa[i]]
                for j in range(lanes):
                    if -30.0 < va[j] < 30.0:
                        x[j] += ai[j] * vi[j]
            elif o == 12:  # log
                x = A[pa[i]]
                va = V[pa[i]]
                for j in range(lanes):
                    x[j] += ai[j] / va[j]
            elif o == 13:  # sin
                x = A[pa[i]]
                va = V[pa[i]]
                for j in range(lanes):
                    x[j] += ai[j] * np.cos(va[j])
            elif o == 14:  # cos
                x = A[pa[i]]
                va = V[pa[i]]
                for j in range(lanes):
                    x[j] -= ai[j] * np.sin(va[j])
            elif o == 15:  # tanh
                x = A[pa[i]]
                vi = V[i]
                for j in range(lanes):
                    x[j] += ai[j] * (1.0 - vi[j] * vi[j])
            elif o == 16:  # sinhc
                x = A[pa[i]]
                va = V[pa[i]]
                for j in range(lanes):
                    if -30.0 < va[j] < 30.0:
                        x[j] += ai[j] * np.cosh(va[j])
            elif o == 17:  # coshc
                x = A[pa[i]]
                va = V[pa[i]]
                for j in range(lanes):
                    if -30.0 < va[j] < 30.0:
                        x[j] += ai[j] * np.sinh(va[j])
            elif o == 18:  # abs
                x = A[pa[i]]
                va = V[pa[i]]
                for j in range(lanes):
                    v = va[j]
                    s = 1.0 if v > 0.0 else (-1.0 if v < 0.0 else 0.0)
                    x[j] += ai[j] * s
            elif o == 20:  # powa
                x = A[pa[i]]
                va = V[pa[i]]
                p = aux[i]
                for j in range(lanes):
                    v = va[j]
                    if v != 0.0:
                        s = 1.0 if v > 0.0 else -1.0
                        x[j] += ai[j] * p * s * abs(v) ** (p - 1.0)
            elif o == 21:  # pows
                x = A[pa[i]]
                va = V[pa[i]]
                p = aux[i]
                for j in range(lanes):
                    v = va[j]
                    if v != 0.0:
                        x[j] += ai[j] * p * abs(v) ** (p - 1.0)
            elif o == 22:  # max2
                x = A[pa[i]]
                y = A[pb[i]]
                va = V[pa[i]]
                vb = V[pb[i]]
                for j in range(lanes):
                    if va[j] >= vb[j]:
                        x[j] += ai[j]
                    else:
                        y[j] += ai[j]
            elif o == 24:  # stmix
                if st_on > 0.5:
                    x = A[pa[i]]
                    for j in range(lanes):
                        x[j] += ai[j]
            # const, sign0, eqsel: nothing to scatter
            for j in range(lanes):
                ai[j] = 0.0


class Runner:
    """Executes a recorded tape over new bindings, one lane chunk at a time."""

    def __init__(self, tape: ad.Tape, max_lanes: int = 1024, backend: str = "auto"):
        if backend == "auto":
            backend = os.environ.get("SYMKAN_BACKEND", "")
            if backend not in ("numba", "numpy"):
                backend = "numba" if _HAVE_NUMBA else "numpy"
        if backend == "numba" and not _HAVE_NUMBA:
            backend = "numpy"
        self.backend = backend
        self.tape = tape
        n = len(tape)
        self.op = np.asarray(tape.op, dtype=np.int32)
        self.pa = np.asarray(tape.pa, dtype=np.int32)
        self.pb = np.asarray(tape.pb, dtype=np.int32)
        self.pc = np.asarray(tape.pc, dtype=np.int32)
        self.aux = np.asarray(tape.aux, dtype=np.float64)
        self.leaf_ids = np.asarray([i for i in range(n) if tape.op[i] == ad.OP_LEAF], dtype=np.int32)
        self._leaf_pos = {int(i): k for k, i in enumerate(self.leaf_ids)}
        self.lanes = tape.lanes if tape.lanes is not None else 1
        self.chunk = min(max_lanes, self.lanes)
        self.V = np.zeros((n, self.chunk), dtype=np.float64)
        self.A = np.zeros((n, self.chunk), dtype=np.float64)
        for i in range(n):
            if tape.op[i] == ad.OP_CONST:
                self.V[i, :] = tape.aux[i]
        self._static_rows: list[tuple[int, np.ndarray]] = []
        self._static_scalars_set = False
        for i, v in tape.fixed.items():
            if isinstance(v, np.ndarray):
                self._static_rows.append((i, np.asarray(v, dtype=np.float64)))
            else:
                self.V[i, :] = v
        if backend == "numba":
            self._fwd, self._bwd = _fwd_nb, _bwd_nb
        else:
            self._fwd, self._bwd = _fwd_py, _bwd_py

    def execute(self, bindings: dict, outputs: list[int], seeds: dict | None = None,
                st_on: bool = True):
        """Run forward (and backward when seeds are given).

        bindings: {leaf id: scalar or full-width array}.
        outputs:  node ids whose full-width value rows are returned.
        seeds:    {node id: scalar weight or full-width array of adjoint seeds}.

        Returns (out, grad): out maps id -> array of length `lanes`; grad maps
        every leaf id -> scalar adjoint (lane-summed), or None without seeds.
        """
        lanes, chunk = self.lanes, self.chunk
        n_chunks = (lanes + chunk - 1) // chunk
        out = {i: np.empty(lanes) for i in outputs}
        grad = np.zeros(self.leaf_ids.shape[0]) if seeds is not None else None
        scalar_binds = []
        row_binds = list(self._static_rows)
        for i, v in bindings.items():
            if isinstance(v, np.ndarray):
                row_binds.append((i, v))
            else:
                scalar_binds.append((i, float(v)))
        for i, v in scalar_binds:
            self.V[i, :] = v
        V, A = self.V, self.A
        for ci in range(n_chunks):
            lo = ci * chunk
            hi = min(lo + chunk, lanes)
            w = hi - lo
            for i, arr in row_binds:
                V[i, :w] = arr[lo:hi]
                if w < chunk:
                    V[i, w:] = arr[hi - 1]
            self._fwd(self.op, self.pa, self.pb, self.pc, self.aux, V)
            for i in outputs:
                out[i][lo:hi] = V[i, :w]
            if seeds is not None:
                for i, sv in seeds.items():
                    if isinstance(sv, np.ndarray):
                        A[i, :w] = sv[lo:hi]
                        if w < chunk:
                            A[i, w:] = 0.0
                    else:
                        A[i, :w] = sv
                        if w < chunk:
                            A[i, w:] = 0.0
                self._bwd(self.op, self.pa, self.pb, self.pc, self.aux, V, A,
                          1.0 if st_on else 0.0)
                grad += A[self.leaf_ids, :].sum(axis=1)
                A[self.leaf_ids, :] = 0.0
        if seeds is None:
            return out, None
        return out, grad

    def grad_of(self, grad: np.ndarray, leaf_id: int) -> float:
        return float(grad[self._leaf_pos[int(leaf_id)]])

    def grads_for(self, grad: np.ndarray, leaf_ids) -> np.ndarray:
        idx = np.fromiter((self._leaf_pos[int(i)] for i in leaf_ids), dtype=np.int64,
                          count=len(leaf_ids))
        return grad[idx]


def check_finite_rows(out: dict, what: str):
    for i, row in out.items():
        if not np.isfinite(row).all():
            raise NumericalError(f"non-finite value in {what} (node {i})")
