"""Command-line surface.

Subcommands: datagen, train, evaluate, export, report, sweep. Every command
is deterministic given its config and seed, writes only inside its declared
output paths, and uses the stable exit-code contract:

  0 success, 1 runtime error, 2 configuration error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import network as nw
from .config import RunConfig, build_problem, load_config
from .errors import ConfigError, NumericalError
from .export import (extract, primitive_report, render_structured, render_text,
                     report_markdown, simplify)
from .problems import relative_error, rk45_integrate, vdp_rhs, VDP_TRUTH, VDP_Y0
from .training import load_checkpoint_full, train_pipeline, write_predictions

SWEEP_AXES = ("N_tr", "S_r", "L", "K")


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except NumericalError as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        return 3
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="symkan",
                                description="Symbolic network training and export.")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("datagen", help="write a problem's dataset CSV")
    d.add_argument("problem", help="problem name from the config's [problem] kind")
    d.add_argument("--config", help="TOML config (defaults used when omitted)")
    d.add_argument("--out", required=True, help="output CSV path")
    d.add_argument("--seed", type=int, default=None)
    d.set_defaults(fn=cmd_datagen)

    t = sub.add_parser("train", help="run the full two-stage pipeline")
    t.add_argument("--config", required=True)
    t.add_argument("--run-dir", required=True, help="output run directory")
    t.add_argument("--seed", type=int, default=None,
                   help="override every seed in the config")
    t.add_argument("--force", action="store_true",
                   help="overwrite an existing run directory")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("evaluate", help="evaluate a checkpoint on a grid")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--grid", default=None,
                   help="per-coordinate lo:hi:n specs, comma-separated; "
                        "defaults to the problem's validation grid")
    e.add_argument("--out", default=None, help="predictions CSV path "
                   "(default: evaluate.csv beside the checkpoint)")
    e.set_defaults(fn=cmd_evaluate)

    x = sub.add_parser("export", help="write closed-form expression files")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--out-dir", default=None,
                   help="default: the checkpoint's directory")
    x.add_argument("--eps", type=float, default=1e-6,
                   help="drop summed terms with |coefficient| below this")
    x.set_defaults(fn=cmd_export)

    r = sub.add_parser("report", help="write the selected-primitives table")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--out", default=None,
                   help="default: primitives.md beside the checkpoint")
    r.set_defaults(fn=cmd_report)

    s = sub.add_parser("sweep", help="train once per axis value, emit CSV")
    s.add_argument("--config", required=True, help="base TOML config")
    s.add_argument("--axis", required=True, choices=SWEEP_AXES)
    s.add_argument("--values", required=True,
                   help="comma-separated integer axis values")
    s.add_argument("--out", required=True, help="sweep CSV path")
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--parallel", type=int, default=1, metavar="N",
                   help="run up to N pipelines concurrently (default 1)")
    s.set_defaults(fn=cmd_sweep)
    return p


# -- datagen --------------------------------------------------------------------------

def cmd_datagen(args) -> int:
    if args.config:
        rc = load_config(args.config, seed_override=args.seed)
        if rc.problem["kind"] != args.problem:
            raise ConfigError(f"config problem kind '{rc.problem['kind']}' "
                              f"does not match requested '{args.problem}'")
        spec = dict(rc.problem)
    else:
        rc = None
        spec = {"kind": args.problem}
        if args.seed is not None:
            spec["seed"] = args.seed
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)

    if args.problem == "vdp":
        t_end = spec.get("t_end", 20.0)
        dt = spec.get("dt", 0.01)
        traj = rk45_integrate(
            lambda t, y: np.asarray(vdp_rhs(y, (VDP_TRUTH["a"], VDP_TRUTH["mu"],
                                                VDP_TRUTH["c"]),
                                            spec.get("signed_power", False))),
            np.asarray(VDP_Y0), (0.0, t_end), dt)
        lines = ["t,x,y"]
        for i in range(traj.times.size):
            lines.append(f"{traj.times[i]:.10g},{traj.states[0, i]:.10g},"
                         f"{traj.states[1, i]:.10g}")
        out.write_text("\n".join(lines) + "\n")
    elif args.problem in ("regression", "rd", "laplace"):
        prob = build_problem(spec)
        if prob.X is not None:
            X, Y = prob.X, prob.Y
            head = [f"x{j}" for j in range(X.shape[0])] + \
                   [f"y{j}" for j in range(Y.shape[0])]
        else:
            X, Y = prob.S_b, prob.G_b   # forward problems: boundary data
            head = [f"x{j}" for j in range(X.shape[0])] + \
                   [f"g{j}" for j in range(Y.shape[0])]
        lines = [",".join(head)]
        for i in range(X.shape[1]):
            row = [f"{X[j, i]:.10g}" for j in range(X.shape[0])]
            row += [f"{Y[j, i]:.10g}" for j in range(Y.shape[0])]
            lines.append(",".join(row))
        out.write_text("\n".join(lines) + "\n")
    else:
        raise ConfigError(f"unknown problem '{args.problem}'; "
                          f"choose from laplace, rd, regression, vdp")
    print(f"wrote {out}")
    return 0


# -- train ----------------------------------------------------------------------------

def cmd_train(args) -> int:
    rc = load_config(args.config, seed_override=args.seed)
    net, problem, weights, sched, params = rc.build()
    run_dir = Path(args.run_dir)
    if run_dir.exists() and (run_dir / "checkpoint.bin").exists() and not args.force:
        raise ConfigError(f"run directory {run_dir} already holds a run; "
                          f"pass --force to overwrite")
    res = train_pipeline(net, problem, weights, sched, params,
                         run_dir=run_dir, config_text=rc.effective_toml())
    learn = " ".join(f"{k}={v:.6g}" for k, v in res["learnables"].items())
    expr_path = run_dir / "expression.txt"
    print(f"val_err={res['val_err']:.6e}"
          + (f" {learn}" if learn else "")
          + f" expression={expr_path}")
    return 0


# -- evaluate -------------------------------------------------------------------------

def _parse_grid(text: str, n_in: int) -> np.ndarray:
    specs = text.split(",")
    if len(specs) != n_in:
        raise ConfigError(f"--grid needs {n_in} lo:hi:n spec(s), got {len(specs)}")
    axes = []
    for s in specs:
        parts = s.split(":")
        if len(parts) != 3:
            raise ConfigError(f"bad grid spec '{s}'; expected lo:hi:n")
        try:
            lo, hi, n = float(parts[0]), float(parts[1]), int(parts[2])
        except ValueError:
            raise ConfigError(f"bad grid spec '{s}'; expected lo:hi:n") from None
        if n < 2 or hi <= lo:
            raise ConfigError(f"bad grid spec '{s}'; need hi > lo and n >= 2")
        axes.append(np.linspace(lo, hi, n))
    if n_in == 1:
        return axes[0].reshape(1, -1)
    return np.stack(np.meshgrid(*axes, indexing="ij")).reshape(n_in, -1)


def _vdp_truth_on(times: np.ndarray, recipe: dict) -> np.ndarray:
    t_end = float(max(times.max(), 1e-6))
    traj = rk45_integrate(
        lambda t, y: np.asarray(vdp_rhs(y, (VDP_TRUTH["a"], VDP_TRUTH["mu"],
                                            VDP_TRUTH["c"]),
                                        recipe.get("signed_power", False))),
        np.asarray(VDP_Y0), (0.0, t_end), recipe.get("dt", 0.01))
    return np.stack([np.interp(times, traj.times, traj.states[i])
                     for i in range(traj.states.shape[0])])


def cmd_evaluate(args) -> int:
    state, net, _learn = load_checkpoint_full(args.checkpoint)
    recipe = state.get("problem") or {}
    if not recipe:
        raise ConfigError("checkpoint does not record its problem; cannot evaluate")
    problem = build_problem(recipe)
    X = (_parse_grid(args.grid, net.config.n_in) if args.grid
         else problem.validation_X)
    mode = "hard" if net.hardened else "soft"
    pred = np.atleast_2d(nw.forward(net, X, mode=mode, tau=0.1))
    if recipe["kind"] == "vdp":
        truth = _vdp_truth_on(X[0], recipe)
    else:
        truth = np.atleast_2d(problem.exact(X))
    err = relative_error(pred, truth)

    out = Path(args.out) if args.out else Path(args.checkpoint).parent / "evaluate.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    cols = [f"x{j}" for j in range(X.shape[0])]
    cols += [f"y{j}_pred" for j in range(pred.shape[0])]
    cols += [f"y{j}_true" for j in range(truth.shape[0])]
    cols.append("abs_err")
    abs_err = np.sqrt(np.sum((pred - truth) ** 2, axis=0))
    with out.open("w") as f:
        f.write(",".join(cols) + "\n")
        for i in range(X.shape[1]):
            vals = [f"{X[j, i]:.10g}" for j in range(X.shape[0])]
            vals += [f"{pred[j, i]:.10g}" for j in range(pred.shape[0])]
            vals += [f"{truth[j, i]:.10g}" for j in range(truth.shape[0])]
            vals.append(f"{abs_err[i]:.10g}")
            f.write(",".join(vals) + "\n")
    print(f"rows={X.shape[1]} relative_error={err:.6e} out={out}")
    return 0


# -- export / report ------------------------------------------------------------------

def _load_hardened(path, command: str):
    state, net, learn = load_checkpoint_full(path)
    if not net.hardened:
        raise ConfigError(
            f"checkpoint at {path} is from stage {state.get('stage', 1)} (soft "
            f"gates); {command} requires a hardened stage 2 checkpoint")
    return state, net, learn


def cmd_export(args) -> int:
    _state, net, _learn = _load_hardened(args.checkpoint, "export")
    out_dir = Path(args.out_dir) if args.out_dir else Path(args.checkpoint).parent
    out_dir.mkdir(parents=True, exist_ok=True)
    exprs = [simplify(e, eps=args.eps) for e in extract(net)]
    text = "\n".join(f"y{j} = {render_text(e)}" for j, e in enumerate(exprs)) + "\n"
    (out_dir / "expression.txt").write_text(text)
    (out_dir / "expression.json").write_text(json.dumps(
        {"library": list(net.config.library),
         "input_affine": [list(ab) for ab in net.config.input_affine],
         "outputs": [render_structured(e) for e in exprs]}, indent=1))
    print(f"wrote {out_dir / 'expression.txt'} and {out_dir / 'expression.json'}")
    return 0


def cmd_report(args) -> int:
    _state, net, _learn = _load_hardened(args.checkpoint, "report")
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / "primitives.md"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report_markdown(primitive_report(net)))
    print(f"wrote {out}")
    return 0


# -- sweep ----------------------------------------------------------------------------

def _sweep_variant(rc: RunConfig, axis: str, value: int) -> RunConfig:
    network = dict(rc.network)
    problem = dict(rc.problem)
    if axis == "N_tr":
        if "n_train" not in problem:
            raise ConfigError(f"problem kind '{problem['kind']}' has no n_train axis")
        problem["n_train"] = value
    elif axis == "S_r":
        if "n_interior" not in problem:
            raise ConfigError(f"problem kind '{problem['kind']}' has no n_interior axis")
        problem["n_interior"] = value
    elif axis == "L":
        network["widths"] = [network["widths"][0]] * value
    elif axis == "K":
        network["widths"] = [value] * len(network["widths"])
    return RunConfig(network=network, library=list(rc.library), problem=problem,
                     losses=dict(rc.losses), schedules=dict(rc.schedules),
                     train=dict(rc.train), stage2=dict(rc.stage2))


def _sweep_run(rc: RunConfig, axis: str, value: int, seed: int) -> dict:
    variant = _sweep_variant(rc, axis, value)
    variant.network["seed"] = seed
    variant.problem["seed"] = seed
    variant.train["seed"] = seed
    net, problem, weights, sched, params = variant.build()
    res = train_pipeline(net, problem, weights, sched, params)
    row = {"value": value, "err_traj": res["val_err"]}
    for l in problem.learnables:
        truth = l.truth
        est = res["learnables"][l.name]
        row[f"err_{l.name}"] = abs(est - truth) / abs(truth) if truth else float("nan")
    return row


def cmd_sweep(args) -> int:
    rc = load_config(args.config, seed_override=args.seed)
    try:
        values = [int(v) for v in args.values.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"--values must be comma-separated integers, "
                          f"got '{args.values}'") from None
    if not values:
        raise ConfigError("--values is empty")
    if any(v < 1 for v in values):
        raise ConfigError("axis values must be positive integers")

    base_seed = rc.train["seed"]
    jobs = [(value, base_seed + i) for i, value in enumerate(values)]

    # learnable column names come from the base problem
    base_prob = build_problem(rc.problem)
    learn_cols = [f"err_{l.name}" for l in base_prob.learnables]
    header = ["value", "err_traj"] + learn_cols

    rows = []
    if args.parallel > 1:
        with ProcessPoolExecutor(max_workers=args.parallel) as pool:
            futs = [pool.submit(_sweep_run, rc, args.axis, v, s) for v, s in jobs]
            for (value, _s), fut in zip(jobs, futs):
                try:
                    rows.append(fut.result())
                except Exception as e:
                    print(f"value {value} failed: {e}", file=sys.stderr)
                    rows.append({"value": value})
    else:
        for value, seed in jobs:
            try:
                rows.append(_sweep_run(rc, args.axis, value, seed))
            except Exception as e:
                print(f"value {value} failed: {e}", file=sys.stderr)
                rows.append({"value": value})

    rows.sort(key=lambda r: r["value"])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            vals = [str(row["value"])]
            for col in header[1:]:
                vals.append(f"{row[col]:.10g}" if col in row else "nan")
            f.write(",".join(vals) + "\n")
    print(f"wrote {out} ({len(rows)} rows)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
