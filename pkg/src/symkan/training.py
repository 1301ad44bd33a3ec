"""Two-stage training loop and run artifacts.

Stage I anneals the gate relaxation with Adam on a pair of recorded tapes: a
small scalar tape carrying the gating subgraph and its regularizers, and one
lane-batched tape per loss family (data, residual, boundary, initial) that
consumes the gating values through feed leaves. Gradients flow batch tape ->
feed adjoints -> scalar tape, so each step costs two compiled sweeps and no
re-recording. Stage II commits the structure and refines the continuous
parameters with L-BFGS on hardened tapes.
"""

from __future__ import annotations

import dataclasses
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import network as nw
from .engine import Runner
from .errors import ConfigError, NumericalError
from .export import extract, primitive_report, render_structured, render_text, report_markdown, simplify
from .losses import (LossWeights, Schedules, bias_loss_terms, entropy_loss,
                     iter_offs, nms_loss, schedule_eval, sq_err_row, unit_loss)
from .optimize import adam_init, adam_step, lbfgs_minimize
from .problems import relative_error

CHECKPOINT_VERSION = 1

METRIC_COLUMNS = ("step", "loss_total", "loss_data", "loss_pde", "loss_bc",
                  "loss_ic", "loss_ent", "loss_nms", "loss_unit", "loss_bias",
                  "tau", "lambda_sel", "val_err")


@dataclass
class TrainParams:
    t1: int = 2000
    log_every: int = 50
    seed: int = 0
    eps_kill: float = 0.5
    noise: bool = True
    early_harden: bool = False
    entropy_stop_frac: float = 0.05
    restarts: int = 1
    stage2: bool = True
    stage2_max_iter: int = 500
    export_eps: float = 1e-6
    max_lanes: int = 1024

    def __post_init__(self):
        if self.t1 < 1:
            raise ConfigError("t1 must be >= 1")
        if self.log_every < 1:
            raise ConfigError("log_every must be >= 1")
        if not 0 <= self.eps_kill < 1:
            raise ConfigError("eps_kill must be in [0, 1)")
        if self.restarts < 1:
            raise ConfigError("restarts must be >= 1")


# -- recorded programs -----------------------------------------------------------

def _flatten_view_ids(view) -> list:
    """Leaf ids of a recorded parameter view in canonical flat order."""
    ids = []
    for units in view:
        for uv in units:
            for ev in uv.edges:
                ids.extend(t.idx for t in ev.w)
                ids.append(ev.b.idx)
                for grp in (ev.gamma, ev.beta, ev.amp, ev.off, ev.logits):
                    ids.extend(t.idx for t in grp)
            if uv.d is not None:
                ids.append(uv.d.idx)
    return ids


def _flatten_gating(g: nw.Gating):
    a = [x.idx for la in g.alphas for ua in la for ea in ua for x in ea]
    s = [x.idx for ls in g.st for us in ls for x in us]
    z = [x.idx for lz in g.zeta for x in lz if x is not None]
    return a, s, z


@dataclass
class RegProgram:
    tape: ad.Tape
    runner: Runner
    param_ids: list
    tau_id: int
    lam_id: int
    noise_ids: list
    alpha_ids: list
    st_ids: list
    zeta_ids: list
    loss_id: int
    ent_id: int
    nms_id: int
    unit_id: int | None
    bias_id: int


def record_reg_program(net: nw.Network, weights: LossWeights, max_lanes: int) -> RegProgram:
    """Scalar tape: gating under sampled noise (feeds the batch tapes),
    noise-free gating for the selection regularizers, and the regularizer
    total ready to be seeded together with the batch feed adjoints."""
    tape = ad.Tape()
    view = nw.make_view(net, lift=tape.leaf)
    param_ids = _flatten_view_ids(view)
    tau = tape.leaf(1.0, tag="tau")
    lam = tape.leaf(0.0, tag="lambda_sel")
    p = len(net.library)
    noise_ids: list[int] = []

    def noise_fn():
        tvs = [tape.leaf(0.0) for _ in range(p)]
        noise_ids.extend(t.idx for t in tvs)
        return tvs

    noisy = nw.build_gating(view, tau, noise_fn)
    clean = nw.build_gating(view, tau, None)
    a_ids, s_ids, z_ids = _flatten_gating(noisy)

    ent = tape.lift(entropy_loss(clean.alphas))
    nms = tape.lift(nms_loss(clean.alphas))
    unit = None
    if net.config.unit_gates:
        unit = tape.lift(unit_loss(clean.zeta, weights.unit_penalty, weights.rho))
    bias = tape.lift(bias_loss_terms(iter_offs(view)))

    loss = lam * (weights.lambda_ent * ent + weights.lambda_nms * nms)
    if unit is not None:
        loss = loss + weights.lambda_unit * unit
    loss = tape.lift(loss + weights.lambda_bias * bias)
    return RegProgram(tape, Runner(tape, max_lanes=max_lanes), param_ids,
                      tau.idx, lam.idx, noise_ids, a_ids, s_ids, z_ids,
                      loss.idx, ent.idx, nms.idx,
                      unit.idx if unit is not None else None, bias.idx)


@dataclass
class BatchProgram:
    part: str                  # data | pde | bc | ic
    tape: ad.Tape
    runner: Runner
    lanes: int
    lam: float
    row_id: int
    param_ids: list
    alpha_ids: list = field(default_factory=list)
    st_ids: list = field(default_factory=list)
    zeta_ids: list = field(default_factory=list)
    learn_ids: dict = field(default_factory=dict)


def _make_feed_gating(net: nw.Network, tape: ad.Tape) -> nw.Gating:
    p = len(net.library)
    alphas, sts, zetas = [], [], []
    for layer in net.layers:
        la, ls, lz = [], [], []
        for unit in layer:
            la.append([[tape.leaf(1.0 / p) for _ in range(p)] for _ in unit.edges])
            ls.append([tape.leaf(1.0 / len(unit.edges)) for _ in unit.edges])
            lz.append(tape.leaf(1.0) if unit.d is not None else None)
        alphas.append(la)
        sts.append(ls)
        zetas.append(lz)
    return nw.Gating(alphas, sts, zetas)


def _record_forward(net, tape, view, gating, X, mode, seed_coord=None, order=0):
    xs = [tape.const_row(np.asarray(X[j], dtype=float)) for j in range(X.shape[0])]
    xjets = nw._input_jets(net, xs, seed_coord, order)
    return nw.forward_core(net, view, xjets, gating, mode)


def record_batch_program(net: nw.Network, part: str, problem, lam: float,
                         mode: str, max_lanes: int) -> BatchProgram:
    """One lane-batched tape for a loss family. Soft mode consumes gating
    feed leaves; hard mode records the committed structure directly."""
    tape = ad.Tape()
    view = nw.make_view(net, lift=tape.leaf)
    param_ids = _flatten_view_ids(view)
    gating = _make_feed_gating(net, tape) if mode == "soft" else None
    prog = BatchProgram(part, tape, None, 0, lam, 0, param_ids)
    if gating is not None:
        prog.alpha_ids, prog.st_ids, prog.zeta_ids = _flatten_gating(gating)

    if part == "data":
        X, targets = problem.X, problem.Y
    elif part == "bc":
        X, targets = problem.S_b, problem.G_b
    elif part == "ic":
        X, targets = problem.S_0, problem.G_0
    elif part == "pde":
        X, targets = problem.S_r, None
    else:
        raise ConfigError(f"unknown loss part '{part}'")

    if part == "pde":
        jets_by_coord = {}
        xs = [tape.const_row(np.asarray(X[j], dtype=float)) for j in range(X.shape[0])]
        for coord, order in sorted(problem.residual_orders.items()):
            xjets = nw._input_jets(net, xs, coord, order)
            jets_by_coord[coord] = nw.forward_core(net, view, xjets, gating, mode)
        par = {l.name: tape.leaf(l.value, tag=f"learn:{l.name}") for l in problem.learnables}
        prog.learn_ids = {name: tv.idx for name, tv in par.items()}
        par.update({k: tape.const(float(v)) for k, v in problem.fixed.items()})
        aux = {k: tape.const_row(np.asarray(v, dtype=float))
               for k, v in problem.aux_rows.items()}
        rows = problem.residual(jets_by_coord, par, aux)
        acc = None
        for r in rows:
            acc = r * r if acc is None else ad.vmuladd(r, r, acc)
        row = acc
    else:
        outs = _record_forward(net, tape, view, gating, X, mode)
        ys = [tape.const_row(np.asarray(targets[j], dtype=float))
              for j in range(targets.shape[0])]
        row = sq_err_row([o.c[0] for o in outs], ys)

    row = tape.lift(row)
    prog.row_id = row.idx
    prog.lanes = X.shape[1]
    prog.runner = Runner(tape, max_lanes=max_lanes)
    return prog


def active_parts(problem, weights: LossWeights):
    """(part, weight) pairs present on this problem."""
    parts = []
    if problem.X is not None and problem.X.size and weights.lambda_data > 0:
        parts.append(("data", weights.lambda_data))
    if problem.S_r is not None and problem.S_r.size and weights.lambda_r > 0:
        parts.append(("pde", weights.lambda_r))
    if problem.S_b is not None and problem.S_b.size and weights.lambda_b > 0:
        parts.append(("bc", weights.lambda_b))
    if problem.S_0 is not None and problem.S_0.size and weights.lambda_0 > 0:
        parts.append(("ic", weights.lambda_0))
    return parts


# -- checkpoints -------------------------------------------------------------------

def save_checkpoint(path, net: nw.Network, problem, step: int, stage: int,
                    rng_state=None, extra: dict | None = None):
    state = {
        "version": CHECKPOINT_VERSION,
        "stage": stage,
        "step": step,
        "net": nw.to_state(net),
        "learnables": [
            {"name": l.name, "init": l.init, "truth": l.truth,
             "value": float(l.value).hex()}
            for l in problem.learnables
        ],
        "problem": problem.recipe,
        "rng": rng_state,
    }
    if extra:
        state.update(extra)
    Path(path).write_text(json.dumps(state, indent=1, sort_keys=True))


def _read_checkpoint(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"checkpoint not found: {path}")
    try:
        state = json.loads(path.read_text())
    except (json.JSONDecodeError, UnicodeDecodeError, OSError) as e:
        raise ConfigError(f"unreadable checkpoint {path}: {e}") from None
    if not isinstance(state, dict) or state.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version in {path}")
    return state


def load_checkpoint(path):
    """(net, learnable values dict, step, stage, rng state)."""
    state = _read_checkpoint(path)
    try:
        net = nw.from_state(state["net"])
        learn = {l["name"]: float.fromhex(l["value"]) for l in state["learnables"]}
        return net, learn, state["step"], state["stage"], state.get("rng")
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"malformed checkpoint {path}: {e}") from None


def load_checkpoint_full(path):
    """Raw checkpoint dict plus the decoded network, for CLI consumers."""
    state = _read_checkpoint(path)
    try:
        net = nw.from_state(state["net"])
        learn = {l["name"]: float.fromhex(l["value"]) for l in state["learnables"]}
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"malformed checkpoint {path}: {e}") from None
    return state, net, learn


# -- metrics ------------------------------------------------------------------------

class MetricsWriter:
    def __init__(self, path, learn_names):
        self.path = Path(path)
        self.columns = list(METRIC_COLUMNS) + list(learn_names)
        self.path.write_text(",".join(self.columns) + "\n")

    def write(self, row: dict):
        vals = []
        for c in self.columns:
            v = row.get(c, 0.0)
            vals.append(str(v) if c == "step" else f"{float(v):.10g}")
        with self.path.open("a") as f:
            f.write(",".join(vals) + "\n")


def _validation_error(net, problem, tau, mode):
    if problem.validation_X is None:
        return float("nan")
    pred = np.atleast_2d(nw.forward(net, problem.validation_X, tau=tau, mode=mode))
    if problem.exact is not None:
        truth = np.atleast_2d(problem.exact(problem.validation_X))
    elif problem.exact_traj is not None:
        truth = problem.exact_traj.states
    else:
        return float("nan")
    return relative_error(pred, truth)


# -- stage I ------------------------------------------------------------------------

@dataclass
class StageResult:
    steps: int
    losses: dict
    val_err: float
    aborted: bool = False


class SoftStepper:
    """Recorded soft-mode objective: one scalar gating tape plus one batched
    tape per loss family, wired through feed leaves.

    `evaluate` runs one forward/backward sweep at given parameters, schedule
    values, and noise sample, returning the loss parts and the gradient over
    [network params; learnables]."""

    def __init__(self, net: nw.Network, problem, weights: LossWeights,
                 max_lanes: int = 1024):
        self.net = net
        self.problem = problem
        self.weights = weights
        self.reg = record_reg_program(net, weights, max_lanes)
        self.progs = [record_batch_program(net, part, problem, lam, "soft", max_lanes)
                      for part, lam in active_parts(problem, weights)]
        if not self.progs:
            raise ConfigError("problem defines no active loss part")
        self.learn_names = [l.name for l in problem.learnables]
        self.n_par = nw.param_count(net)
        self.n_noise = len(self.reg.noise_ids)
        reg = self.reg
        self.reg_out_ids = [reg.loss_id, reg.ent_id, reg.nms_id, reg.bias_id]
        if reg.unit_id is not None:
            self.reg_out_ids.append(reg.unit_id)
        self.reg_out_ids += reg.alpha_ids + reg.st_ids + reg.zeta_ids
        self._feed_pairs = [
            (prog, list(zip(prog.alpha_ids + prog.st_ids + prog.zeta_ids,
                            reg.alpha_ids + reg.st_ids + reg.zeta_ids)))
            for prog in self.progs
        ]

    def pack(self) -> np.ndarray:
        return np.concatenate([nw.get_params(self.net),
                               [l.value for l in self.problem.learnables]])

    def unpack(self, x: np.ndarray):
        nw.set_params(self.net, x[:self.n_par])
        for i, l in enumerate(self.problem.learnables):
            l.value = float(x[self.n_par + i])

    def evaluate(self, x: np.ndarray, tau: float, lam_sel: float,
                 noise: np.ndarray | None = None, st_on: bool = True):
        """(losses dict, gradient) of the full soft objective at x.

        st_on=False turns off the straight-through routing at the edge masks,
        making the gradient the exact derivative of the evaluated function
        (the mask held fixed), which is what finite differences measure."""
        reg, w = self.reg, self.weights
        reg_bind = dict(zip(reg.param_ids, x[:self.n_par]))
        reg_bind[reg.tau_id] = tau
        reg_bind[reg.lam_id] = lam_sel
        nz = noise if noise is not None else np.zeros(self.n_noise)
        reg_bind.update(zip(reg.noise_ids, nz))
        out, _ = reg.runner.execute(reg_bind, self.reg_out_ids)

        g = np.zeros(x.size)
        feed_adj: dict[int, float] = {}
        losses = {"data": 0.0, "pde": 0.0, "bc": 0.0, "ic": 0.0}
        for prog, pairs in self._feed_pairs:
            bind = dict(zip(prog.param_ids, x[:self.n_par]))
            for name, lid in prog.learn_ids.items():
                bind[lid] = x[self.n_par + self.learn_names.index(name)]
            for fid, rid in pairs:
                bind[fid] = out[rid][0]
            rows, grad = prog.runner.execute(
                bind, [prog.row_id], seeds={prog.row_id: prog.lam / prog.lanes})
            row = rows[prog.row_id]
            if not np.isfinite(row).all():
                raise NumericalError(f"non-finite {prog.part} loss")
            losses[prog.part] = float(row.mean())
            g[:self.n_par] += prog.runner.grads_for(grad, prog.param_ids)
            for name, lid in prog.learn_ids.items():
                g[self.n_par + self.learn_names.index(name)] += prog.runner.grad_of(grad, lid)
            for fid, rid in pairs:
                feed_adj[rid] = feed_adj.get(rid, 0.0) + prog.runner.grad_of(grad, fid)

        seeds: dict = {reg.loss_id: 1.0}
        for rid, a in feed_adj.items():
            seeds[rid] = seeds.get(rid, 0.0) + a
        _, rgrad = reg.runner.execute(reg_bind, [reg.loss_id], seeds=seeds,
                                      st_on=st_on)
        if not np.isfinite(rgrad).all():
            raise NumericalError("non-finite gating gradient")
        g[:self.n_par] += reg.runner.grads_for(rgrad, reg.param_ids)

        losses["ent"] = float(out[reg.ent_id][0])
        losses["nms"] = float(out[reg.nms_id][0])
        losses["unit"] = float(out[reg.unit_id][0]) if reg.unit_id is not None else 0.0
        losses["bias"] = float(out[reg.bias_id][0])
        losses["total"] = (losses["data"] * w.lambda_data
                           + losses["pde"] * w.lambda_r
                           + losses["bc"] * w.lambda_b
                           + losses["ic"] * w.lambda_0
                           + float(out[reg.loss_id][0]))
        return losses, g


def run_stage1(net: nw.Network, problem, weights: LossWeights, sched: Schedules,
               params: TrainParams, metrics: MetricsWriter | None = None,
               checkpoint_path=None) -> StageResult:
    """Annealed soft training. On a non-finite failure the last good
    parameters are restored (and checkpointed when a path is given) before
    the NumericalError propagates."""
    stepper = SoftStepper(net, problem, weights, params.max_lanes)
    n_par = stepper.n_par
    x = stepper.pack()
    mult = np.ones(x.size)
    mult[:n_par][nw.gate_mask(net)] = sched.gate_lr_mult
    opt = adam_init(x.size)
    rng = np.random.default_rng([params.seed, 17])
    p = len(net.library)
    logp = math.log(p) if p > 1 else 1.0
    n_edges_total = sum(len(u.edges) for layer in net.layers for u in layer)

    last_good = x.copy()
    last_step = 0
    losses: dict = {}
    val = float("nan")

    try:
        for t in range(params.t1):
            tau, lam_sel, lr, _ = schedule_eval(sched, t, params.t1)
            noise = (rng.gumbel(0.0, 1.0, stepper.n_noise) if params.noise
                     else None)
            losses, g = stepper.evaluate(x, tau, lam_sel, noise)

            if metrics is not None and (t % params.log_every == 0 or t == params.t1 - 1):
                stepper.unpack(x)
                val = _validation_error(net, problem, tau, "soft")
                row = {"step": t, "loss_total": losses["total"],
                       "loss_data": losses["data"], "loss_pde": losses["pde"],
                       "loss_bc": losses["bc"], "loss_ic": losses["ic"],
                       "loss_ent": losses["ent"], "loss_nms": losses["nms"],
                       "loss_unit": losses["unit"], "loss_bias": losses["bias"],
                       "tau": tau, "lambda_sel": lam_sel, "val_err": val}
                for i, name in enumerate(stepper.learn_names):
                    row[name] = x[n_par + i]
                metrics.write(row)

            last_good = x.copy()
            last_step = t
            x = adam_step(x, g, opt, lr * mult)
            net.step = t + 1

            if (params.early_harden and p > 1
                    and losses["ent"] / n_edges_total <= params.entropy_stop_frac * logp):
                break
    except NumericalError:
        stepper.unpack(last_good)
        net.step = last_step
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, net, problem, last_step, 1,
                            rng_state=rng.bit_generator.state)
        raise

    stepper.unpack(x)
    return StageResult(net.step, losses, val)


# -- stage II -----------------------------------------------------------------------

def run_stage2(net: nw.Network, problem, weights: LossWeights,
               params: TrainParams):
    """L-BFGS refinement of continuous parameters and learnables on the
    hardened structure. Gate parameters stay frozen."""
    if not net.hardened:
        raise ConfigError("stage II requires a hardened network; run harden first")
    progs = [record_batch_program(net, part, problem, lam, "hard", params.max_lanes)
             for part, lam in active_parts(problem, weights)]
    learn_names = [l.name for l in problem.learnables]
    theta = nw.get_params(net)
    _, cont_idx = nw.param_groups(net)
    n_cont, n_learn = cont_idx.size, len(learn_names)
    x0 = np.concatenate([theta[cont_idx], [l.value for l in problem.learnables]])

    def objective(xv):
        full = theta.copy()
        full[cont_idx] = xv[:n_cont]
        f = 0.0
        g = np.zeros(xv.size)
        for prog in progs:
            bind = {i: v for i, v in zip(prog.param_ids, full)}
            for name, lid in prog.learn_ids.items():
                bind[lid] = xv[n_cont + learn_names.index(name)]
            rows, grad = prog.runner.execute(
                bind, [prog.row_id], seeds={prog.row_id: prog.lam / prog.lanes})
            row = rows[prog.row_id]
            if not np.isfinite(row).all() or not np.isfinite(grad).all():
                return float("inf"), np.zeros(xv.size)
            f += prog.lam * float(row.mean())
            g[:n_cont] += prog.runner.grads_for(grad, prog.param_ids)[cont_idx]
            for name, lid in prog.learn_ids.items():
                g[n_cont + learn_names.index(name)] += prog.runner.grad_of(grad, lid)
        return f, g

    res = lbfgs_minimize(objective, x0, max_iter=params.stage2_max_iter)
    theta[cont_idx] = res.x[:n_cont]
    nw.set_params(net, theta)
    for i, l in enumerate(problem.learnables):
        l.value = float(res.x[n_cont + i])
    return res


# -- artifacts and the full pipeline --------------------------------------------------

def write_predictions(path, net: nw.Network, problem, mode="hard"):
    X = problem.validation_X
    if X is None:
        return
    pred = np.atleast_2d(nw.forward(net, X, mode=mode))
    cols = [f"x{j}" for j in range(X.shape[0])]
    cols += [f"y{j}_pred" for j in range(pred.shape[0])]
    truth = None
    if problem.exact is not None:
        truth = np.atleast_2d(problem.exact(X))
    elif problem.exact_traj is not None:
        truth = problem.exact_traj.states
    abs_err = None
    if truth is not None:
        cols += [f"y{j}_true" for j in range(truth.shape[0])]
        cols.append("abs_err")
        abs_err = np.sqrt(np.sum((pred - truth) ** 2, axis=0))
    with Path(path).open("w") as f:
        f.write(",".join(cols) + "\n")
        for i in range(X.shape[1]):
            vals = [f"{X[j, i]:.10g}" for j in range(X.shape[0])]
            vals += [f"{pred[j, i]:.10g}" for j in range(pred.shape[0])]
            if truth is not None:
                vals += [f"{truth[j, i]:.10g}" for j in range(truth.shape[0])]
                vals.append(f"{abs_err[i]:.10g}")
            f.write(",".join(vals) + "\n")


def write_expression_files(run_dir: Path, net: nw.Network, eps: float):
    exprs = [simplify(e, eps=eps) for e in extract(net)]
    text = "\n".join(f"y{j} = {render_text(e)}" for j, e in enumerate(exprs)) + "\n"
    (run_dir / "expression.txt").write_text(text)
    (run_dir / "expression.json").write_text(json.dumps(
        {"library": list(net.config.library),
         "input_affine": [list(ab) for ab in net.config.input_affine],
         "outputs": [render_structured(e) for e in exprs]}, indent=1))
    (run_dir / "primitives.md").write_text(report_markdown(primitive_report(net)))
    return exprs


def _adopt(dst: nw.Network, src: nw.Network):
    """Copy parameters and committed structure between same-config networks."""
    nw.set_params(dst, nw.get_params(src))
    dst.hardened = src.hardened
    for dl, sl in zip(dst.layers, src.layers):
        for du, su in zip(dl, sl):
            du.hard, du.pruned = su.hard, su.pruned
    dst.step = src.step


def train_pipeline(net: nw.Network, problem, weights: LossWeights, sched: Schedules,
                   params: TrainParams, run_dir=None, config_text: str | None = None):
    """Stage I, harden, Stage II, artifacts. Returns a result dict.

    With params.restarts > 1, both stages run from that many independent
    initializations (restart r shifts the network-init and sampling-noise
    seeds together) and the candidate with the lowest refined training loss
    wins; validation data never enters the selection. Metrics rows from every
    restart are logged in order, step numbers restarting at 0.
    """
    t_start = time.time()
    metrics = None
    ckpt = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        if config_text is not None:
            (run_dir / "config.toml").write_text(config_text)
        metrics = MetricsWriter(run_dir / "metrics.csv",
                                [l.name for l in problem.learnables])
        ckpt = run_dir / "checkpoint.bin"

    learn_inits = {l.name: l.init for l in problem.learnables}
    best = None
    failure = None
    for r in range(params.restarts):
        if r == 0:
            cand, cand_params = net, params
        else:
            shift = 1_000_003 * r   # restarts draw decorrelated init and noise
            cand = nw.init_network(dataclasses.replace(
                net.config, seed=net.config.seed + shift))
            cand_params = dataclasses.replace(params, seed=params.seed + shift)
            for l in problem.learnables:
                l.value = learn_inits[l.name]
        try:
            s1 = run_stage1(cand, problem, weights, sched, cand_params, metrics, ckpt)
            nw.harden(cand, eps_kill=cand_params.eps_kill, tau=sched.tau_end)
            s2 = run_stage2(cand, problem, weights, cand_params) if params.stage2 else None
        except NumericalError as e:
            failure = e
            continue
        score = s2.f if s2 is not None else s1.losses.get("total", math.inf)
        if best is None or score < best["score"]:
            best = {"score": score, "net": cand, "s1": s1, "s2": s2,
                    "learn": {l.name: l.value for l in problem.learnables}}
    if best is None:
        raise failure
    s1, s2 = best["s1"], best["s2"]
    if best["net"] is not net:
        _adopt(net, best["net"])
    problem.set_values(best["learn"])

    val = _validation_error(net, problem, sched.tau_end, "hard")
    if metrics is not None:
        final = {"step": s1.steps + (s2.iterations if s2 else 0),
                 "loss_total": s2.f if s2 else s1.losses.get("total", 0.0),
                 "tau": sched.tau_end, "lambda_sel": sched.lambda_sel_max,
                 "val_err": val}
        for l in problem.learnables:
            final[l.name] = l.value
        metrics.write(final)

    if run_dir is not None:
        save_checkpoint(ckpt, net, problem, s1.steps, 2 if s2 else 1)
        exprs = write_expression_files(run_dir, net, params.export_eps)
        write_predictions(run_dir / "predictions.csv", net, problem)
    else:
        exprs = [simplify(e, eps=params.export_eps) for e in extract(net)]

    return {
        "val_err": val,
        "steps": s1.steps,
        "stage2": None if s2 is None else
            {"f": s2.f, "iterations": s2.iterations, "reason": s2.reason},
        "learnables": {l.name: l.value for l in problem.learnables},
        "structure": nw.structure_hash(net),
        "seconds": time.time() - t_start,
        "expressions": [render_text(e) for e in exprs],
    }
