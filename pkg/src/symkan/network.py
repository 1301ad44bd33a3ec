"""The gated symbolic network.

Units are arranged in layers. Each unit owns E edges; an edge projects the
full previous layer through a learned affine map and feeds the result to a
gated mixture of library primitives (per-primitive affine maps on both sides).
A straight-through top-1 mask over the unit's edges picks one edge forward
while letting gradients flow through the soft scores. Readout is a fixed sum
of last-layer units in contiguous groups, one group per output.

All computation routes through `forward_core`, which is generic over plain
numbers, arrays, and tape variables, and over Taylor-jet order. Hardening
commits every unit to a single (edge, primitive) pair and optionally prunes
weak units; hardened evaluation uses only the committed path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Jet, jet_apply_primitive, vexp, vmax2, vmuladd, veqsel, vstmix, vsigmoid
from .errors import ConfigError, StateError
from .primitives import PrimitiveLibrary, make_library


@dataclass
class NetworkConfig:
    n_in: int
    widths: list            # units per layer, length L
    edges: int              # E, edges per unit
    n_out: int
    library: list           # primitive names, order = selection index
    unit_gates: bool = False
    rho: float = 0.5
    input_affine: list = None   # per input coordinate (scale, shift); identity if None
    init_w_scale: float = 1.0   # widens first-layer projection init (frequency reach)
    seed: int = 0

    def __post_init__(self):
        if self.n_in < 1 or self.n_out < 1:
            raise ConfigError("n_in and n_out must be >= 1")
        if not self.widths or any(k < 1 for k in self.widths):
            raise ConfigError("every layer needs at least one unit")
        if self.edges < 1:
            raise ConfigError("edges must be >= 1")
        if self.init_w_scale <= 0:
            raise ConfigError("init_w_scale must be positive")
        if self.widths[-1] % self.n_out != 0:
            raise ConfigError(
                f"last layer width {self.widths[-1]} not divisible by n_out {self.n_out}")
        if self.input_affine is None:
            self.input_affine = [(1.0, 0.0)] * self.n_in
        if len(self.input_affine) != self.n_in:
            raise ConfigError("input_affine length must equal n_in")
        self.input_affine = [(float(a), float(b)) for a, b in self.input_affine]


class EdgeState:
    __slots__ = ("w", "b", "gamma", "beta", "amp", "off", "logits")

    def __init__(self, fan_in: int, p: int):
        self.w = np.zeros(fan_in)
        self.b = 0.0
        self.gamma = np.ones(p)
        self.beta = np.zeros(p)
        self.amp = np.zeros(p)   # affine-out scale
        self.off = np.zeros(p)   # affine-out offset; the "bias collapse" penalty target
        self.logits = np.zeros(p)


class UnitState:
    __slots__ = ("edges", "d", "hard", "pruned")

    def __init__(self, edges, d):
        self.edges = edges
        self.d = d               # unit-gate logit, None when gates disabled
        self.hard = None         # committed (edge index, primitive index)
        self.pruned = False


class Network:
    def __init__(self, config: NetworkConfig, library: PrimitiveLibrary, layers):
        self.config = config
        self.library = library
        self.layers = layers
        self.hardened = False
        self.step = 0            # training-step counter carried by checkpoints

    @property
    def n_layers(self):
        return len(self.layers)

    def fan_in(self, layer: int) -> int:
        return self.config.n_in if layer == 0 else self.config.widths[layer - 1]


def init_network(config: NetworkConfig) -> Network:
    """Deterministic initialization from config.seed.

    Draw order is fixed (layer, unit, edge; w then amp then logits) so equal
    (config, seed) gives bit-identical networks.
    """
    lib = make_library(config.library)
    p = len(lib)
    rng = np.random.default_rng(config.seed)
    layers = []
    for l, width in enumerate(config.widths):
        fan = config.n_in if l == 0 else config.widths[l - 1]
        s = math.sqrt(6.0 / (fan + 1))
        if l == 0:
            s *= config.init_w_scale
        units = []
        for _ in range(width):
            edges = []
            for _ in range(config.edges):
                e = EdgeState(fan, p)
                e.w = rng.uniform(-s, s, fan)
                e.amp = rng.uniform(-0.5, 0.5, p)
                e.logits = rng.uniform(-0.01, 0.01, p)
                edges.append(e)
            units.append(UnitState(edges, 2.0 if config.unit_gates else None))
        layers.append(units)
    return Network(config, lib, layers)


# -- canonical parameter order -----------------------------------------------
#
# For each layer, unit, edge: w[0..fan), b, gamma[0..P), beta, amp, off,
# logits; then the unit's d when unit gates are enabled. Flattening, leaf
# creation, checkpointing, and gradient packing all walk this order.

def _walk_edges(net: Network):
    for layer in net.layers:
        for unit in layer:
            for edge in unit.edges:
                yield unit, edge


def param_count(net: Network) -> int:
    n = 0
    for l, width in enumerate(net.config.widths):
        fan = net.fan_in(l)
        n += width * net.config.edges * (fan + 1 + 5 * len(net.library))
        if net.config.unit_gates:
            n += width
    return n


def get_params(net: Network) -> np.ndarray:
    out = []
    for layer in net.layers:
        for unit in layer:
            for e in unit.edges:
                out.extend(e.w)
                out.append(e.b)
                out.extend(e.gamma)
                out.extend(e.beta)
                out.extend(e.amp)
                out.extend(e.off)
                out.extend(e.logits)
            if unit.d is not None:
                out.append(unit.d)
    return np.asarray(out, dtype=float)


def set_params(net: Network, vec: np.ndarray):
    vec = np.asarray(vec, dtype=float)
    if vec.shape != (param_count(net),):
        raise ConfigError(f"parameter vector length {vec.shape} != {param_count(net)}")
    i = 0
    p = len(net.library)
    for layer in net.layers:
        for unit in layer:
            for e in unit.edges:
                f = e.w.shape[0]
                e.w = vec[i:i + f].copy(); i += f
                e.b = float(vec[i]); i += 1
                e.gamma = vec[i:i + p].copy(); i += p
                e.beta = vec[i:i + p].copy(); i += p
                e.amp = vec[i:i + p].copy(); i += p
                e.off = vec[i:i + p].copy(); i += p
                e.logits = vec[i:i + p].copy(); i += p
            if unit.d is not None:
                unit.d = float(vec[i]); i += 1


def gate_mask(net: Network) -> np.ndarray:
    """True at selection parameters (primitive logits g and unit-gate d)."""
    m = []
    p = len(net.library)
    for layer in net.layers:
        for unit in layer:
            for e in unit.edges:
                m.extend([False] * (e.w.shape[0] + 1 + 4 * p))
                m.extend([True] * p)
            if unit.d is not None:
                m.append(True)
    return np.asarray(m, dtype=bool)


def param_groups(net: Network):
    """(gate indices, continuous indices) partitioning the flat vector."""
    g = gate_mask(net)
    idx = np.arange(g.shape[0])
    return idx[g], idx[~g]


# -- parameter views ----------------------------------------------------------

class EdgeView:
    __slots__ = ("w", "b", "gamma", "beta", "amp", "off", "logits")


class UnitView:
    __slots__ = ("edges", "d")


def make_view(net: Network, lift=None):
    """Parameter tree with each scalar passed through `lift` in canonical
    order (identity by default). A tape-leaf lift yields the recording view;
    the resulting leaf order matches get_params/set_params."""
    if lift is None:
        lift = lambda v: v
    layers = []
    for layer in net.layers:
        units = []
        for unit in layer:
            uv = UnitView()
            uv.edges = []
            for e in unit.edges:
                ev = EdgeView()
                ev.w = [lift(float(v)) for v in e.w]
                ev.b = lift(float(e.b))
                ev.gamma = [lift(float(v)) for v in e.gamma]
                ev.beta = [lift(float(v)) for v in e.beta]
                ev.amp = [lift(float(v)) for v in e.amp]
                ev.off = [lift(float(v)) for v in e.off]
                ev.logits = [lift(float(v)) for v in e.logits]
                uv.edges.append(ev)
            uv.d = lift(float(unit.d)) if unit.d is not None else None
            units.append(uv)
        layers.append(units)
    return layers


# -- gating --------------------------------------------------------------------

def gumbel_softmax(logits, tau, noise=None):
    """Simplex weights exp((g+n)/tau) / sum, computed max-shifted.

    `logits` is a sequence of scalars (numbers or tape variables); `noise` an
    optional same-length sequence of Gumbel(0,1) samples. Generic over value
    kinds. tau may itself be a tape variable; when it is a number it must be
    positive.
    """
    if not isinstance(tau, ad.TapeVar) and tau <= 0:
        raise ConfigError("gumbel_softmax requires tau > 0")
    z = list(logits) if noise is None else [g + n for g, n in zip(logits, noise)]
    m = z[0]
    for v in z[1:]:
        m = vmax2(m, v)
    e = [vexp((v - m) / tau) for v in z]
    total = e[0]
    for v in e[1:]:
        total = total + v
    return [v / total for v in e]


def softmax_plain(vals):
    m = vals[0]
    for v in vals[1:]:
        m = vmax2(m, v)
    e = [vexp(v - m) for v in vals]
    total = e[0]
    for v in e[1:]:
        total = total + v
    return [v / total for v in e]


def edge_mask(alphas):
    """Straight-through top-1 over a unit's edges.

    alphas: per-edge simplex vectors. Returns (S, eta_hat, st) where
    c_e = max_p alpha[e][p], S = softmax(c), eta_hat is one-hot at argmax S
    (ties to the lowest index), and st_e carries eta_hat forward while
    routing gradients to S_e.
    """
    c = []
    for a in alphas:
        m = a[0]
        for v in a[1:]:
            m = vmax2(m, v)
        c.append(m)
    s = softmax_plain(c)
    if len(s) == 1:
        one = 1.0
        return s, [one], [vstmix(s[0], one) if isinstance(s[0], ad.TapeVar) else one]
    m = s[0]
    for v in s[1:]:
        m = vmax2(m, v)
    eta = []
    taken = None
    for v in s:
        hit = veqsel(v, m)
        if taken is None:
            pick = hit
            taken = hit
        else:
            pick = hit * (1.0 - taken)   # ties: only the first argmax stays hot
            taken = taken + pick
        eta.append(pick)
    st = [vstmix(sv, ev) for sv, ev in zip(s, eta)]
    return s, eta, st


class Gating:
    """Per-edge mixture weights and per-unit masks for one soft evaluation.

    alphas[l][k][e][p], st[l][k][e], zeta[l][k] (None rows when gates are
    off). Values may be numbers or tape variables; `forward_core` consumes
    them as-is.
    """

    __slots__ = ("alphas", "st", "zeta", "scores")

    def __init__(self, alphas, st, zeta, scores=None):
        self.alphas = alphas
        self.st = st
        self.zeta = zeta
        self.scores = scores


def build_gating(view, tau, noise=None) -> Gating:
    """Compute gating values from a parameter view.

    `noise` is either None (noise-free) or a callable returning a length-P
    Gumbel sample array for each edge, invoked in canonical edge order.
    """
    alphas, sts, zetas, scores = [], [], [], []
    for units in view:
        la, ls, lz, lc = [], [], [], []
        for uv in units:
            ua = []
            for ev in uv.edges:
                n = noise() if noise is not None else None
                ua.append(gumbel_softmax(ev.logits, tau, n))
            s, _, st = edge_mask(ua)
            la.append(ua)
            ls.append(st)
            lc.append(s)
            lz.append(vsigmoid(uv.d) if uv.d is not None else None)
        alphas.append(la)
        sts.append(ls)
        zetas.append(lz)
        scores.append(lc)
    return Gating(alphas, sts, zetas, scores)


# -- forward dataflow ----------------------------------------------------------

def _project(ev, h, order):
    """Edge projection w.h + b over previous-layer jets. None entries of h
    (pruned units) contribute exactly nothing."""
    coeffs = []
    for k in range(order + 1):
        acc = ev.b if k == 0 else None
        for wj, hj in zip(ev.w, h):
            if hj is None:
                continue
            ck = hj.c[k] if k <= hj.order else None
            if ck is None:
                continue
            acc = ck * wj if acc is None else vmuladd(wj, ck, acc)
        coeffs.append(0.0 if acc is None and k == 0 else acc)
    return Jet(coeffs)


def _affine_jet(scale, shift, jet):
    coeffs = [vmuladd(scale, jet.c[0], shift) if shift is not None else scale * jet.c[0]]
    for ck in jet.c[1:]:
        coeffs.append(None if ck is None else scale * ck)
    return Jet(coeffs)


def edge_transform(ev, s_jet: Jet, alpha, lib) -> Jet:
    """Gated mixture of primitives on one edge: sum_p alpha_p (A_p f_p(gamma_p s + beta_p) + B_p)."""
    acc = [None] * (s_jet.order + 1)
    for p, prim in enumerate(lib):
        u = _affine_jet(ev.gamma[p], ev.beta[p], s_jet)
        y = jet_apply_primitive(prim, u)
        z0 = vmuladd(ev.amp[p], y.c[0], ev.off[p])
        acc[0] = z0 * alpha[p] if acc[0] is None else vmuladd(alpha[p], z0, acc[0])
        for k in range(1, s_jet.order + 1):
            yk = y.c[k]
            if yk is None:
                continue
            zk = ev.amp[p] * yk
            acc[k] = zk * alpha[p] if acc[k] is None else vmuladd(alpha[p], zk, acc[k])
    return Jet(acc)


def hard_unit_transform(ev, s_jet: Jet, p_star: int, lib) -> Jet:
    u = _affine_jet(ev.gamma[p_star], ev.beta[p_star], s_jet)
    y = jet_apply_primitive(lib[p_star], u)
    coeffs = [vmuladd(ev.amp[p_star], y.c[0], ev.off[p_star])]
    for ck in y.c[1:]:
        coeffs.append(None if ck is None else ev.amp[p_star] * ck)
    return Jet(coeffs)


def forward_core(net: Network, view, xjets, gating: Gating | None, mode: str):
    """Layer-by-layer evaluation over jets; returns one Jet per output.

    Soft mode consumes `gating`; hard mode uses the committed selections and
    needs no gating. Input affine must already be composed into xjets.
    """
    order = xjets[0].order
    lib = net.library
    h = list(xjets)
    for l, units in enumerate(view):
        nh = []
        for k, uv in enumerate(units):
            unit = net.layers[l][k]
            if mode == "hard":
                if unit.hard is None:
                    raise StateError("hard-mode evaluation of an unhardened unit; run harden first")
                if unit.pruned:
                    nh.append(None)
                    continue
                e_star, p_star = unit.hard
                s_jet = _project(uv.edges[e_star], h, order)
                nh.append(hard_unit_transform(uv.edges[e_star], s_jet, p_star, lib))
                continue
            acc = [None] * (order + 1)
            for e, ev in enumerate(uv.edges):
                s_jet = _project(ev, h, order)
                y = edge_transform(ev, s_jet, gating.alphas[l][k][e], lib)
                w = gating.st[l][k][e]
                for kk in range(order + 1):
                    yk = y.c[kk]
                    if yk is None:
                        continue
                    acc[kk] = yk * w if acc[kk] is None else vmuladd(w, yk, acc[kk])
            z = gating.zeta[l][k]
            if z is not None:
                acc = [None if ck is None else ck * z for ck in acc]
            if acc[0] is None:
                acc[0] = 0.0
            nh.append(Jet(acc))
        h = nh
    gs = net.config.widths[-1] // net.config.n_out
    outs = []
    for j in range(net.config.n_out):
        group = [u for u in h[j * gs:(j + 1) * gs] if u is not None]
        if not group:
            outs.append(Jet.const(0.0, order))
            continue
        acc = group[0]
        for u in group[1:]:
            acc = ad.jet_add(acc, u)
        outs.append(acc)
    return outs


def _input_jets(net: Network, x, seed_coord=None, order=0):
    """Normalized input jets; the seeded coordinate gets physical slope 1
    before normalization so jet derivatives are in original units."""
    jets = []
    for j in range(net.config.n_in):
        a, b = net.config.input_affine[j]
        if seed_coord == j:
            jets.append(Jet([a * x[j] + b, a] + [None] * (order - 1)))
        else:
            jets.append(Jet.const(a * x[j] + b, order))
    return jets


def forward(net: Network, x, tau=1.0, noise=None, mode="soft", diagnostics=False):
    """Plain evaluation. x: array (n_in,) or (n_in, N). Returns (n_out,) or
    (n_out, N); with diagnostics=True also the Gating used (soft mode)."""
    x = np.asarray(x, dtype=float)
    squeeze = x.ndim == 1 and net.config.n_in != 1
    if x.ndim == 0:
        x = x.reshape(1)
    if x.ndim == 1 and net.config.n_in == 1:
        x = x.reshape(1, -1)
    if x.shape[0] != net.config.n_in:
        raise ConfigError(f"input has {x.shape[0]} coordinates, expected {net.config.n_in}")
    view = make_view(net)
    gating = None
    if mode == "soft":
        gating = build_gating(view, tau, noise)
    elif mode != "hard":
        raise ConfigError(f"unknown mode '{mode}'")
    xjets = _input_jets(net, [x[j] for j in range(x.shape[0])], None, 0)
    outs = forward_core(net, view, xjets, gating, mode)
    vals = [np.broadcast_to(np.asarray(o.c[0], dtype=float), x.shape[1:]).copy()
            if x.ndim > 1 else float(o.c[0]) for o in outs]
    result = np.asarray(vals)
    if squeeze:
        result = result.reshape(net.config.n_out)
    if diagnostics:
        return result, gating
    return result


def forward_jet(net: Network, x, seed_coord: int, mode="hard", order=2, tau=1.0, noise=None):
    """Forward with the given input coordinate seeded; returns output jets
    whose derivative(k) are physical-coordinate derivatives."""
    if not 0 <= seed_coord < net.config.n_in:
        raise ConfigError("seed_coord out of range")
    if not 1 <= order <= 3:
        raise ConfigError("jet order must be 1..3")
    x = np.asarray(x, dtype=float)
    if x.ndim == 1 and net.config.n_in == 1:
        x = x.reshape(1, -1)
    view = make_view(net)
    gating = build_gating(view, tau, noise) if mode == "soft" else None
    xjets = _input_jets(net, [x[j] for j in range(x.shape[0])], seed_coord, order)
    return forward_core(net, view, xjets, gating, mode)


# -- hardening -----------------------------------------------------------------

def harden(net: Network, eps_kill: float = 0.5, tau: float = 0.1) -> Network:
    """Commit every unit to (e*, p*) and prune weak units.

    p* per edge is the argmax logit; e* is the argmax of the edge scores S
    computed from noise-free alphas at `tau`. Ties take the lowest index.
    Units with sigma(d) <= eps_kill are pruned (unit gates only). Continuous
    parameters are untouched; calling twice changes nothing.
    """
    for layer in net.layers:
        for unit in layer:
            alphas = [gumbel_softmax(list(e.logits), tau) for e in unit.edges]
            c = [max(a) for a in alphas]
            s = softmax_plain(c)
            e_star = int(np.argmax(s))
            p_star = int(np.argmax(unit.edges[e_star].logits))
            unit.hard = (e_star, p_star)
            if unit.d is not None:
                unit.pruned = bool(1.0 / (1.0 + math.exp(-unit.d)) <= eps_kill)
    net.hardened = True
    return net


def structure_hash(net: Network) -> str:
    """Stable digest of the committed discrete structure."""
    parts = []
    for layer in net.layers:
        for unit in layer:
            parts.append("x" if unit.hard is None else f"{unit.hard[0]}.{unit.hard[1]}.{int(unit.pruned)}")
    return "|".join(parts)


# -- checkpoint state ----------------------------------------------------------

def to_state(net: Network) -> dict:
    return {
        "config": {
            "n_in": net.config.n_in,
            "widths": list(net.config.widths),
            "edges": net.config.edges,
            "n_out": net.config.n_out,
            "library": list(net.config.library),
            "unit_gates": net.config.unit_gates,
            "rho": net.config.rho,
            "input_affine": [list(ab) for ab in net.config.input_affine],
            "init_w_scale": net.config.init_w_scale,
            "seed": net.config.seed,
        },
        "params": [v.hex() for v in get_params(net)],
        "hardened": net.hardened,
        "selections": [[list(u.hard) if u.hard else None, u.pruned]
                       for layer in net.layers for u in layer],
        "step": net.step,
    }


def from_state(state: dict) -> Network:
    cfg = state["config"]
    config = NetworkConfig(
        n_in=cfg["n_in"], widths=list(cfg["widths"]), edges=cfg["edges"],
        n_out=cfg["n_out"], library=list(cfg["library"]),
        unit_gates=cfg["unit_gates"], rho=cfg["rho"],
        input_affine=[tuple(ab) for ab in cfg["input_affine"]],
        init_w_scale=cfg.get("init_w_scale", 1.0), seed=cfg["seed"])
    net = init_network(config)
    set_params(net, np.asarray([float.fromhex(h) for h in state["params"]]))
    net.hardened = bool(state["hardened"])
    flat = [u for layer in net.layers for u in layer]
    for u, (hard, pruned) in zip(flat, state["selections"]):
        u.hard = tuple(hard) if hard else None
        u.pruned = bool(pruned)
    net.step = int(state.get("step", 0))
    return net
