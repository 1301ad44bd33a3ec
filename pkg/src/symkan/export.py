"""Closed-form extraction from a hardened network.

A hardened network is a finite composition of affine maps and library
primitives, so each output is representable exactly as a small expression
tree. This module extracts that tree, simplifies it by local algebraic
rewrites, evaluates it (with DAG sharing), renders it as text, and
round-trips it through a structured JSON form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, StateError
from .primitives import get_primitive

# -- expression nodes -----------------------------------------------------------


@dataclass(frozen=True)
class Const:
    value: float


@dataclass(frozen=True)
class Var:
    index: int


@dataclass(frozen=True)
class Affine:
    """scale * child + shift."""
    scale: float
    shift: float
    child: object


@dataclass(frozen=True)
class PrimApply:
    name: str
    child: object


@dataclass(frozen=True)
class WeightedSum:
    """sum_i coef_i * node_i; terms is a tuple of (coef, node)."""
    terms: tuple


NODE_KINDS = (Const, Var, Affine, PrimApply, WeightedSum)


# -- extraction ------------------------------------------------------------------

def extract(net) -> list:
    """One raw expression tree per output coordinate, in physical input
    units. Requires a hardened network; pruned units contribute nothing."""
    if not net.hardened:
        raise StateError("extract requires a hardened network; run harden first")
    cfg = net.config
    h = [Affine(a, b, Var(j)) for j, (a, b) in enumerate(cfg.input_affine)]
    for layer in net.layers:
        nh = []
        for unit in layer:
            if unit.hard is None:
                raise StateError("unit lacks a committed selection")
            if unit.pruned:
                nh.append(None)
                continue
            e_star, p_star = unit.hard
            e = unit.edges[e_star]
            terms = tuple((float(wj), hj) for wj, hj in zip(e.w, h) if hj is not None)
            s = Affine(1.0, float(e.b), WeightedSum(terms))
            u = Affine(float(e.gamma[p_star]), float(e.beta[p_star]), s)
            y = PrimApply(net.library[p_star].name, u)
            nh.append(Affine(float(e.amp[p_star]), float(e.off[p_star]), y))
        h = nh
    gs = cfg.widths[-1] // cfg.n_out
    outs = []
    for j in range(cfg.n_out):
        group = [u for u in h[j * gs:(j + 1) * gs] if u is not None]
        outs.append(WeightedSum(tuple((1.0, g) for g in group)) if group else Const(0.0))
    return outs


# -- simplification ---------------------------------------------------------------

def simplify(node, eps: float = 0.0):
    """Fixpoint of local rewrites: affine merging and elimination, constant
    folding through primitives, sum flattening, and dropping sum terms whose
    coefficient magnitude is <= eps. Preserves values exactly except for the
    dropped terms."""
    if eps < 0:
        raise ConfigError("eps must be >= 0")
    memo = {}

    def rec(n):
        r = memo.get(id(n))
        if r is not None:
            return r
        if isinstance(n, Affine):
            n2 = Affine(n.scale, n.shift, rec(n.child))
        elif isinstance(n, PrimApply):
            n2 = PrimApply(n.name, rec(n.child))
        elif isinstance(n, WeightedSum):
            n2 = WeightedSum(tuple((c, rec(t)) for c, t in n.terms))
        else:
            n2 = n
        out = _rewrite(n2, eps)
        memo[id(n)] = out
        return out

    return rec(node)


def _rewrite(n, eps):
    # children are already simplified; loop local rules to a fixpoint
    while True:
        if isinstance(n, Affine):
            a, b, c = n.scale, n.shift, n.child
            if a == 0.0:
                n = Const(b)
                continue
            if isinstance(c, Const):
                n = Const(a * c.value + b)
                continue
            if isinstance(c, Affine):
                n = Affine(a * c.scale, a * c.shift + b, c.child)
                continue
            if a == 1.0 and b == 0.0:
                n = c
                continue
            return n
        if isinstance(n, PrimApply):
            prim = get_primitive(n.name)
            if prim.name == "zero":
                return Const(0.0)
            if prim.name == "one":
                return Const(1.0)
            if prim.name == "identity":
                n = n.child
                continue
            if isinstance(n.child, Const):
                return Const(float(prim.eval(0, n.child.value)))
            return n
        if isinstance(n, WeightedSum):
            terms = []
            const = 0.0
            changed = False
            for w, t in n.terms:
                if isinstance(t, WeightedSum):
                    terms.extend((w * wi, ti) for wi, ti in t.terms)
                    changed = True
                elif isinstance(t, Affine):
                    terms.append((w * t.scale, t.child))
                    const += w * t.shift
                    changed = True
                elif isinstance(t, Const):
                    const += w * t.value
                    changed = True
                else:
                    terms.append((w, t))
            merged = []
            seen = {}
            for w, t in terms:
                k = id(t)
                if k in seen:
                    i = seen[k]
                    merged[i] = (merged[i][0] + w, t)
                    changed = True
                else:
                    seen[k] = len(merged)
                    merged.append((w, t))
            kept = [(w, t) for w, t in merged if abs(w) > eps]
            changed = changed or len(kept) != len(merged)
            if not kept:
                return Const(const)
            if const != 0.0:
                n = Affine(1.0, const, _rewrite(WeightedSum(tuple(kept)), eps))
                continue
            if len(kept) == 1:
                w, t = kept[0]
                if w == 1.0:
                    return t
                n = Affine(w, 0.0, t)
                continue
            if not changed:
                return n
            n = WeightedSum(tuple(kept))
            continue
        return n


# -- evaluation --------------------------------------------------------------------

def eval_expr(node, X):
    """Evaluate a tree on X of shape (n_in, N) (or (N,) for one input
    coordinate); returns a row (N,). Shared subtrees are computed once."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(1, -1)
    memo = {}

    def rec(n):
        r = memo.get(id(n))
        if r is not None:
            return r
        if isinstance(n, Const):
            v = np.full(X.shape[1], n.value)
        elif isinstance(n, Var):
            if not 0 <= n.index < X.shape[0]:
                raise ConfigError(f"expression references x{n.index} but input has "
                                  f"{X.shape[0]} coordinates")
            v = X[n.index]
        elif isinstance(n, Affine):
            v = n.scale * rec(n.child) + n.shift
        elif isinstance(n, PrimApply):
            v = np.asarray(get_primitive(n.name).eval(0, rec(n.child)), dtype=float)
            v = np.broadcast_to(v, (X.shape[1],))
        elif isinstance(n, WeightedSum):
            v = np.zeros(X.shape[1])
            for w, t in n.terms:
                v = v + w * rec(t)
        else:
            raise ConfigError(f"unknown expression node {type(n).__name__}")
        memo[id(n)] = v
        return v

    return rec(node)


# -- text rendering -----------------------------------------------------------------

def _fmt(v: float) -> str:
    s = f"{float(v):.6g}"
    return "0" if s == "-0" else s


def _render(n):
    """(text, is_sum): is_sum means the text needs parentheses inside a
    product."""
    if isinstance(n, Const):
        return _fmt(n.value), n.value < 0
    if isinstance(n, Var):
        return f"x{n.index}", False
    if isinstance(n, PrimApply):
        s, _ = _render(n.child)
        return get_primitive(n.name).render(s), False
    if isinstance(n, Affine):
        cs, csum = _render(n.child)
        if n.scale == 1.0 and n.shift != 0.0:
            # pure offset appends to a sum without wrapping it
            head = cs
        else:
            if csum:
                cs = f"({cs})"
            if n.scale == 1.0:
                head = cs
            elif n.scale == -1.0:
                head = f"-{cs}"
            else:
                head = f"{_fmt(n.scale)}*{cs}"
        if n.shift == 0.0:
            return head, False
        if n.shift < 0:
            return f"{head} - {_fmt(-n.shift)}", True
        return f"{head} + {_fmt(n.shift)}", True
    if isinstance(n, WeightedSum):
        if not n.terms:
            return "0", False
        parts = []
        for i, (w, t) in enumerate(n.terms):
            ts, tsum = _render(t)
            if tsum:
                ts = f"({ts})"
            if w == 1.0:
                piece, neg = ts, False
            elif w == -1.0:
                piece, neg = ts, True
            elif w < 0:
                piece, neg = f"{_fmt(-w)}*{ts}", True
            else:
                piece, neg = f"{_fmt(w)}*{ts}", False
            if i == 0:
                parts.append(f"-{piece}" if neg else piece)
            else:
                parts.append(f"- {piece}" if neg else f"+ {piece}")
        return " ".join(parts), len(n.terms) > 1
    raise ConfigError(f"unknown expression node {type(n).__name__}")


def render_text(node) -> str:
    return _render(node)[0]


# -- structured form ------------------------------------------------------------------

def render_structured(node) -> dict:
    if isinstance(node, Const):
        return {"kind": "const", "value": node.value}
    if isinstance(node, Var):
        return {"kind": "var", "index": node.index}
    if isinstance(node, Affine):
        return {"kind": "affine", "scale": node.scale, "shift": node.shift,
                "child": render_structured(node.child)}
    if isinstance(node, PrimApply):
        return {"kind": "prim", "name": node.name,
                "child": render_structured(node.child)}
    if isinstance(node, WeightedSum):
        return {"kind": "sum",
                "terms": [[w, render_structured(t)] for w, t in node.terms]}
    raise ConfigError(f"unknown expression node {type(node).__name__}")


def parse_structured(d: dict):
    if not isinstance(d, dict) or "kind" not in d:
        raise ConfigError("structured expression must be a dict with a 'kind'")
    k = d["kind"]
    try:
        if k == "const":
            return Const(float(d["value"]))
        if k == "var":
            return Var(int(d["index"]))
        if k == "affine":
            return Affine(float(d["scale"]), float(d["shift"]),
                          parse_structured(d["child"]))
        if k == "prim":
            get_primitive(d["name"])
            return PrimApply(d["name"], parse_structured(d["child"]))
        if k == "sum":
            return WeightedSum(tuple((float(w), parse_structured(t))
                                     for w, t in d["terms"]))
    except (KeyError, TypeError, ValueError) as ex:
        raise ConfigError(f"malformed structured expression: {ex}") from ex
    raise ConfigError(f"unknown expression kind '{k}'")


# -- structure report -----------------------------------------------------------------

def primitive_report(net) -> list:
    """Per-unit rows of the committed structure: selected edge, primitive,
    and the unit gate value when gates are enabled."""
    if not net.hardened:
        raise StateError("primitive_report requires a hardened network")
    rows = []
    for l, layer in enumerate(net.layers):
        for k, unit in enumerate(layer):
            e_star, p_star = unit.hard
            row = {"layer": l, "unit": k, "edge": e_star,
                   "primitive": net.library[p_star].name,
                   "pruned": unit.pruned}
            if unit.d is not None:
                row["gate"] = 1.0 / (1.0 + math.exp(-unit.d))
            rows.append(row)
    return rows


def report_markdown(rows) -> str:
    has_gate = any("gate" in r for r in rows)
    head = "| layer | unit | edge | primitive | pruned |"
    sep = "|---|---|---|---|---|"
    if has_gate:
        head += " gate |"
        sep += "---|"
    lines = [head, sep]
    for r in rows:
        line = (f"| {r['layer']} | {r['unit']} | {r['edge']} | "
                f"{r['primitive']} | {'yes' if r['pruned'] else 'no'} |")
        if has_gate:
            line += f" {r.get('gate', float('nan')):.4f} |"
        lines.append(line)
    return "\n".join(lines) + "\n"
