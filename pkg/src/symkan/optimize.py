"""Optimizers: Adam for the gated stage, L-BFGS for continuous refinement.

Adam accepts a per-element learning-rate vector so gate logits can move on a
smaller rate than continuous parameters within one flat vector. The L-BFGS
implementation is the standard two-loop recursion with a strong-Wolfe line
search; it filters curvature pairs and never returns a point worse than the
starting one.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(n: int, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    return AdamState(np.zeros(n), np.zeros(n), 0, beta1, beta2, eps)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState, lr) -> np.ndarray:
    """One bias-corrected update. `lr` is a scalar or a per-element vector.

    Raises NumericalError on non-finite gradients (the step is rejected and
    state is left untouched).
    """
    grads = np.asarray(grads, dtype=float)
    if not np.isfinite(grads).all():
        bad = int(np.flatnonzero(~np.isfinite(grads))[0])
        raise NumericalError(f"non-finite gradient at parameter index {bad}; step rejected")
    state.t += 1
    state.m = state.beta1 * state.m + (1 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1 - state.beta2) * grads * grads
    mhat = state.m / (1 - state.beta1 ** state.t)
    vhat = state.v / (1 - state.beta2 ** state.t)
    return params - lr * mhat / (np.sqrt(vhat) + state.eps)


# -- L-BFGS ---------------------------------------------------------------------

@dataclass
class LbfgsResult:
    x: np.ndarray
    f: float
    g: np.ndarray
    iterations: int
    evaluations: int
    reason: str


def _wolfe_line_search(objective, x, f0, g0, d, c1, c2, max_evals=60):
    """Strong Wolfe line search (bracket + zoom). Returns (alpha, f, g, evals)
    with alpha=None on failure."""
    phi0 = f0
    dphi0 = float(np.dot(g0, d))
    if dphi0 >= 0:
        return None, f0, g0, 0
    amax = 1e10
    a_prev, phi_prev, dphi_prev = 0.0, phi0, dphi0
    a = 1.0
    evals = 0
    f_a, g_a = f0, g0

    def phi(alpha):
        nonlocal evals
        fa, ga = objective(x + alpha * d)
        evals += 1
        return fa, ga

    def zoom(lo, hi, phi_lo, phi_hi, dphi_lo):
        nonlocal evals
        for _ in range(40):
            # quadratic interpolation, bisection fallback
            denom = 2.0 * (phi_hi - phi_lo - dphi_lo * (hi - lo))
            if denom != 0 and np.isfinite(denom):
                aq = lo - dphi_lo * (hi - lo) ** 2 / denom
            else:
                aq = 0.5 * (lo + hi)
            lo_, hi_ = (lo, hi) if lo < hi else (hi, lo)
            span = hi_ - lo_
            if not (lo_ + 0.1 * span <= aq <= hi_ - 0.1 * span):
                aq = 0.5 * (lo + hi)
            fa, ga = phi(aq)
            dpa = float(np.dot(ga, d))
            if fa > phi0 + c1 * aq * dphi0 or fa >= phi_lo:
                hi, phi_hi = aq, fa
            else:
                if abs(dpa) <= -c2 * dphi0:
                    return aq, fa, ga
                if dpa * (hi - lo) >= 0:
                    hi, phi_hi = lo, phi_lo
                lo, phi_lo, dphi_lo = aq, fa, dpa
            if abs(hi - lo) < 1e-16 * max(1.0, abs(lo)):
                return (lo, phi_lo, None)
        return None, None, None

    for _ in range(20):
        f_a, g_a = phi(a)
        dphi_a = float(np.dot(g_a, d))
        if f_a > phi0 + c1 * a * dphi0 or (evals > 1 and f_a >= phi_prev):
            za, zf, zg = zoom(a_prev, a, phi_prev, f_a, dphi_prev)
            if za is None:
                return None, f0, g0, evals
            if zg is None:
                zf, zg = phi(za)
            return za, zf, zg, evals
        if abs(dphi_a) <= -c2 * dphi0:
            return a, f_a, g_a, evals
        if dphi_a >= 0:
            za, zf, zg = zoom(a, a_prev, f_a, phi_prev, dphi_a)
            if za is None:
                return None, f0, g0, evals
            if zg is None:
                zf, zg = phi(za)
            return za, zf, zg, evals
        a_prev, phi_prev, dphi_prev = a, f_a, dphi_a
        a = min(2.0 * a, amax)
        if evals >= max_evals:
            break
    return None, f0, g0, evals


def lbfgs_minimize(objective, x0: np.ndarray, memory: int = 10, max_iter: int = 500,
                   c1: float = 1e-4, c2: float = 0.9, gtol: float = 1e-9,
                   steptol: float = 1e-12) -> LbfgsResult:
    """Minimize objective(x) -> (value, gradient).

    Terminates on gradient max-norm <= gtol ("gradient_tolerance"), step
    length <= steptol ("step_tolerance"), iteration budget ("max_iter"), or a
    failed line search ("line_search_failed"). The returned point is never
    worse than x0. Stored curvature pairs satisfy s.y > 1e-12 ||s|| ||y||.
    """
    x = np.asarray(x0, dtype=float).copy()
    f, g = objective(x)
    evals = 1
    if not np.isfinite(f):
        raise NumericalError("objective non-finite at the starting point")
    best_x, best_f, best_g = x.copy(), f, g.copy()
    S, Y, RHO = [], [], []
    reason = "max_iter"
    it = 0
    for it in range(1, max_iter + 1):
        if np.max(np.abs(g)) <= gtol:
            reason = "gradient_tolerance"
            break
        # two-loop recursion
        q = g.copy()
        alphas = []
        for s, y, rho in zip(reversed(S), reversed(Y), reversed(RHO)):
            a = rho * np.dot(s, q)
            alphas.append(a)
            q -= a * y
        if S:
            gamma = np.dot(S[-1], Y[-1]) / np.dot(Y[-1], Y[-1])
            q *= gamma
        for (s, y, rho), a in zip(zip(S, Y, RHO), reversed(alphas)):
            b = rho * np.dot(y, q)
            q += (a - b) * s
        d = -q
        if np.dot(g, d) >= 0:
            d = -g   # safeguard: fall back to steepest descent
        a, f_new, g_new, ev = _wolfe_line_search(objective, x, f, g, d, c1, c2)
        evals += ev
        if a is None:
            reason = "line_search_failed"
            break
        step = a * d
        x_new = x + step
        s = x_new - x
        y = g_new - g
        sy = float(np.dot(s, y))
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            S.append(s)
            Y.append(y)
            RHO.append(1.0 / sy)
            if len(S) > memory:
                S.pop(0); Y.pop(0); RHO.pop(0)
        x, f, g = x_new, f_new, g_new
        if f < best_f:
            best_x, best_f, best_g = x.copy(), f, g.copy()
        if np.linalg.norm(step) <= steptol * max(1.0, np.linalg.norm(x)):
            reason = "step_tolerance"
            break
    if f > best_f:
        x, f, g = best_x, best_f, best_g
    return LbfgsResult(x, f, g, it, evals, reason)
