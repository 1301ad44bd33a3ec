"""Loss terms, annealing schedules, and the total objective.

Term functions are generic over plain numbers and tape variables, so the same
formulas serve recorded training graphs and direct evaluation in tests. The
selection regularizers (entropy, non-maximum suppression) are computed on
noise-free mixture weights; sampling noise only enters the forward mixing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import network as nw
from .autodiff import TapeVar, vlog, vmuladd
from .errors import ConfigError


@dataclass
class LossWeights:
    lambda_data: float = 1.0
    lambda_r: float = 1.0
    lambda_b: float = 1.0
    lambda_0: float = 1.0
    lambda_ent: float = 1e-2
    lambda_nms: float = 1e-2
    lambda_unit: float = 1e-2
    lambda_bias: float = 1e-4
    rho: float = 0.5
    unit_penalty: str = "additive"   # or "budgeted"

    def __post_init__(self):
        for name in ("lambda_data", "lambda_r", "lambda_b", "lambda_0",
                     "lambda_ent", "lambda_nms", "lambda_unit", "lambda_bias"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.unit_penalty not in ("additive", "budgeted"):
            raise ConfigError("unit_penalty must be 'additive' or 'budgeted'")
        if self.unit_penalty == "budgeted" and not 0 < self.rho < 1:
            raise ConfigError("rho must be in (0,1) for budgeted unit penalty")


@dataclass
class Schedules:
    tau_start: float = 5.0
    tau_end: float = 0.1
    lambda_sel_max: float = 1.0
    ramp_fraction: float = 0.5
    lr0: float = 1e-2
    lr_decay: float = 0.1
    gate_lr_mult: float = 0.1

    def __post_init__(self):
        if not self.tau_start >= self.tau_end > 0:
            raise ConfigError("need tau_start >= tau_end > 0")
        if not 0 < self.ramp_fraction <= 1:
            raise ConfigError("ramp_fraction must be in (0,1]")


def schedule_eval(sched: Schedules, t: int, t1: int):
    """(tau, lambda_sel, lr, lr_gate) at step t of a t1-step stage."""
    frac = t / t1 if t1 > 0 else 1.0
    tau = sched.tau_start * (sched.tau_end / sched.tau_start) ** frac
    lam = sched.lambda_sel_max * min(1.0, t / (sched.ramp_fraction * t1)) if t1 > 0 else sched.lambda_sel_max
    lr = sched.lr0 * sched.lr_decay ** frac
    return tau, lam, lr, sched.gate_lr_mult * lr


@dataclass
class LossReport:
    total: float = 0.0
    data: float = 0.0
    pde: float = 0.0
    bc: float = 0.0
    ic: float = 0.0
    ent: float = 0.0
    nms: float = 0.0
    unit: float = 0.0
    bias: float = 0.0
    active: dict = field(default_factory=dict)


# -- selection regularizers (generic over value kinds) -------------------------

def _ent_one(alpha):
    """-sum_p a log a for one simplex vector, with 0 log 0 := 0."""
    acc = None
    for a in alpha:
        if not isinstance(a, TapeVar) and a == 0.0:
            continue
        term = a * vlog(a)
        acc = term if acc is None else acc + term
    return 0.0 if acc is None else -acc


def entropy_loss(alphas):
    """Sum of Shannon entropies over every edge's simplex vector.

    `alphas` is any nesting of lists whose leaves are simplex vectors
    (a vector = list of scalars)."""
    acc = None
    for a in _iter_simplexes(alphas):
        h = _ent_one(a)
        acc = h if acc is None else acc + h
    return 0.0 if acc is None else acc


def _iter_simplexes(tree):
    if isinstance(tree, (list, tuple)) and tree and not isinstance(tree[0], (list, tuple)):
        yield tree
        return
    for sub in tree:
        yield from _iter_simplexes(sub)


def nms_loss(units_alphas):
    """Pairwise same-primitive overlap within each unit.

    `units_alphas`: iterable of units, each a list of per-edge simplex
    vectors; nested layer lists are accepted."""
    acc = None
    for unit in _iter_units(units_alphas):
        for i in range(len(unit)):
            for j in range(i + 1, len(unit)):
                dot = None
                for a, b in zip(unit[i], unit[j]):
                    dot = a * b if dot is None else vmuladd(a, b, dot)
                if dot is not None:
                    acc = dot if acc is None else acc + dot
    return 0.0 if acc is None else acc


def _iter_units(tree):
    # a unit is a list of simplex vectors: list of lists of scalars
    if (isinstance(tree, (list, tuple)) and tree
            and isinstance(tree[0], (list, tuple)) and tree[0]
            and not isinstance(tree[0][0], (list, tuple))):
        yield tree
        return
    for sub in tree:
        yield from _iter_units(sub)


def unit_loss(zetas_by_layer, kind: str = "additive", rho: float = 0.5):
    """Unit-gate sparsity penalty: additive sum of gates, or budgeted
    per-layer (mean - rho)^2."""
    if kind == "budgeted" and not (isinstance(rho, TapeVar) or 0 < rho < 1):
        raise ConfigError("rho must be in (0,1) for budgeted unit penalty")
    acc = None
    for layer in zetas_by_layer:
        zs = [z for z in layer if z is not None]
        if not zs:
            continue
        if kind == "additive":
            for z in zs:
                acc = z if acc is None else acc + z
        else:
            m = zs[0]
            for z in zs[1:]:
                m = m + z
            m = m * (1.0 / len(zs))
            dev = m - rho
            term = dev * dev
            acc = term if acc is None else acc + term
    return 0.0 if acc is None else acc


def bias_loss_terms(offs):
    """Sum of squared affine-out offsets; `offs` is an iterable of scalars."""
    acc = None
    for b in offs:
        t = b * b
        acc = t if acc is None else acc + t
    return 0.0 if acc is None else acc


def iter_offs(view):
    for units in view:
        for uv in units:
            for ev in uv.edges:
                yield from ev.off


def bias_loss(net: nw.Network) -> float:
    return float(bias_loss_terms(float(b) for _, e in _edges(net) for b in e.off))


def _edges(net):
    for layer in net.layers:
        for unit in layer:
            for e in unit.edges:
                yield unit, e


# -- squared-error rows ---------------------------------------------------------

def sq_err_row(preds, targets):
    """Row of summed squared errors across output coordinates.

    preds: list of per-output values (rows); targets: list of matching rows.
    """
    acc = None
    for p, y in zip(preds, targets):
        d = p - y
        t = d * d
        acc = t if acc is None else acc + t
    return acc


def mean_of_row(row) -> float:
    v = row.value if isinstance(row, TapeVar) else row
    return float(np.mean(v))


# -- direct (non-tape) evaluation wrappers -------------------------------------

def data_loss(net: nw.Network, X, Y, tau: float = 1.0, noise=None, mode: str = "soft") -> float:
    """(1/N) sum over samples of squared error summed over outputs."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if X.size == 0:
        raise ConfigError("data_loss requires a nonempty dataset")
    pred = nw.forward(net, X, tau=tau, noise=noise, mode=mode)
    return float(np.mean(np.sum((np.atleast_2d(pred) - Y) ** 2, axis=0)))


def physics_losses(net: nw.Network, problem, tau: float = 1.0, mode: str = "soft") -> dict:
    """Mean squared residual / boundary / initial losses, with active flags.

    Uses the problem's collocation sets and current learnable values; noise-free.
    """
    out = {"pde": 0.0, "bc": 0.0, "ic": 0.0,
           "active": {"pde": False, "bc": False, "ic": False}}
    if problem.S_r is not None and problem.S_r.size:
        jets = {}
        for coord, order in sorted(problem.residual_orders.items()):
            jets[coord] = nw.forward_jet(net, problem.S_r, coord, mode=mode,
                                         order=order, tau=tau)
        aux = {k: np.asarray(v) for k, v in problem.aux_rows.items()}
        rows = problem.residual(jets, dict(problem.values), aux)
        total = None
        for r in rows:
            rv = np.asarray(r, dtype=float)
            total = rv * rv if total is None else total + rv * rv
        out["pde"] = float(np.mean(total))
        out["active"]["pde"] = True
    if problem.S_b is not None and problem.S_b.size:
        pred = np.atleast_2d(nw.forward(net, problem.S_b, tau=tau, mode=mode))
        out["bc"] = float(np.mean(np.sum((pred - np.atleast_2d(problem.G_b)) ** 2, axis=0)))
        out["active"]["bc"] = True
    if problem.S_0 is not None and problem.S_0.size:
        pred = np.atleast_2d(nw.forward(net, problem.S_0, tau=tau, mode=mode))
        out["ic"] = float(np.mean(np.sum((pred - np.atleast_2d(problem.G_0)) ** 2, axis=0)))
        out["active"]["ic"] = True
    return out


def total_loss(net: nw.Network, problem, weights: LossWeights, sched: Schedules,
               t: int, t1: int, noise=None) -> LossReport:
    """Direct evaluation of the full objective at step t (reference path).

    Forward mixing uses `noise` (a callable yielding per-edge Gumbel samples,
    or None); the selection regularizers always use noise-free alphas.
    """
    tau, lam_sel, _, _ = schedule_eval(sched, t, t1)
    rep = LossReport()
    rep.active = {"data": False, "pde": False, "bc": False, "ic": False,
                  "unit": net.config.unit_gates}
    if problem.X is not None and problem.X.size and weights.lambda_data > 0:
        rep.data = data_loss(net, problem.X, problem.Y, tau=tau, noise=noise)
        rep.active["data"] = True
    phys = physics_losses(net, problem, tau=tau)
    rep.pde, rep.bc, rep.ic = phys["pde"], phys["bc"], phys["ic"]
    rep.active.update({k: phys["active"][k] for k in ("pde", "bc", "ic")})

    view = nw.make_view(net)
    gating = nw.build_gating(view, tau)   # noise-free
    rep.ent = float(entropy_loss(gating.alphas))
    rep.nms = float(nms_loss(gating.alphas))
    if net.config.unit_gates:
        rep.unit = float(unit_loss(gating.zeta, weights.unit_penalty, weights.rho))
    rep.bias = bias_loss(net)
    rep.total = (weights.lambda_data * rep.data
                 + weights.lambda_r * rep.pde
                 + weights.lambda_b * rep.bc
                 + weights.lambda_0 * rep.ic
                 + lam_sel * (weights.lambda_ent * rep.ent + weights.lambda_nms * rep.nms)
                 + (weights.lambda_unit * rep.unit if net.config.unit_gates else 0.0)
                 + weights.lambda_bias * rep.bias)
    return rep
