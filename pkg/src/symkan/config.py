"""TOML run configuration: parse, validate against known keys, fill defaults,
and echo the effective config back out.

A config file has sections [network], [library], [problem], [losses],
[schedules], [train], and [stage2]. Every tunable constant in the pipeline is
settable here; unknown sections or keys are rejected rather than ignored so
typos fail loudly. `load_config` returns a `RunConfig` whose `build()`
produces the (network, problem, weights, schedules, params) quintuple that
`train_pipeline` consumes, and whose `effective_toml()` renders the
defaults-filled config for the run-directory echo.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

try:
    import tomllib as tomli
except ModuleNotFoundError:
    import tomli

from . import network as nw
from .errors import ConfigError
from .losses import LossWeights, Schedules
from .primitives import default_library, get_primitive
from .problems import (Trajectory, make_laplace_problem, make_rd_problem,
                       make_regression_problem, make_vdp_problem)
from .training import TrainParams

DEFAULT_LIBRARY = tuple(default_library().names)

# per-kind problem keys and their defaults (None marks a required key)
_PROBLEM_KEYS = {
    "regression": {"target": None, "domain": [0.0, 5.0], "n_train": 250,
                   "seed": 0},
    "vdp": {"t_end": 20.0, "n_train": 100, "n_interior": 10000,
            "signed_power": False, "dt": 0.01, "dataset": "", "seed": 0},
    "rd": {"m_half": 2.0, "n_train": 100, "n_interior": 5000, "seed": 0},
    "laplace": {"n_interior": 10000, "n_boundary": 400, "seed": 0},
}

_NETWORK_KEYS = {"widths": None, "edges": None, "n_out": 0, "unit_gates": False,
                 "rho": 0.5, "init_w_scale": 1.0, "seed": 0}


def _dataclass_defaults(cls) -> dict:
    out = {}
    for f in dataclasses.fields(cls):
        if f.default is not dataclasses.MISSING:
            out[f.name] = f.default
        elif f.default_factory is not dataclasses.MISSING:  # pragma: no cover
            out[f.name] = f.default_factory()
    return out


def _merge_section(name: str, given: dict, known: dict) -> dict:
    bad = sorted(set(given) - set(known))
    if bad:
        raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(bad)}")
    out = dict(known)
    out.update(given)
    missing = sorted(k for k, v in out.items() if v is None)
    if missing:
        raise ConfigError(f"[{name}] missing required key(s): {', '.join(missing)}")
    return out


@dataclass
class RunConfig:
    network: dict
    library: list
    problem: dict
    losses: dict
    schedules: dict
    train: dict
    stage2: dict

    def build(self):
        """(net, problem, weights, schedules, params); problem data is
        generated here, so building is deterministic in the config."""
        problem = build_problem(self.problem)
        weights = LossWeights(**self.losses)
        sched = Schedules(**self.schedules)
        params = TrainParams(
            stage2=self.stage2["enabled"],
            stage2_max_iter=self.stage2["max_iter"],
            export_eps=self.stage2["export_eps"],
            **self.train)
        n_out = self.network["n_out"] or problem.n_out
        if n_out != problem.n_out:
            raise ConfigError(
                f"n_out={n_out} but problem '{problem.name}' has {problem.n_out} outputs")
        cfg = nw.NetworkConfig(
            n_in=problem.n_in, widths=list(self.network["widths"]),
            edges=self.network["edges"], n_out=n_out, library=list(self.library),
            unit_gates=self.network["unit_gates"], rho=self.network["rho"],
            input_affine=problem.input_affine(),
            init_w_scale=self.network["init_w_scale"], seed=self.network["seed"])
        net = nw.init_network(cfg)
        return net, problem, weights, sched, params

    def effective_toml(self) -> str:
        sections = {
            "network": self.network,
            "library": {"names": self.library},
            "problem": self.problem,
            "losses": self.losses,
            "schedules": self.schedules,
            "train": self.train,
            "stage2": self.stage2,
        }
        lines = []
        for sec, vals in sections.items():
            lines.append(f"[{sec}]")
            for k, v in vals.items():
                lines.append(f"{k} = {_toml_value(v)}")
            lines.append("")
        return "\n".join(lines)


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise ConfigError(f"cannot serialize config value {v!r}")


def _coerce(section: str, key: str, value, want):
    """Nudge TOML ints into float slots and reject type mismatches."""
    if isinstance(want, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"[{section}] {key} must be a boolean")
        return value
    if isinstance(want, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"[{section}] {key} must be a number")
        return float(value)
    if isinstance(want, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"[{section}] {key} must be an integer")
        return value
    return value


def load_config(path, seed_override: int | None = None) -> RunConfig:
    """Parse and validate a TOML config file.

    Seed precedence: `--seed` flag (seed_override) > SYMKAN_SEED env var >
    config file values. An override replaces the seed everywhere it appears
    (network init, data generation, training noise).
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = tomli.loads(path.read_text())
    except tomli.TOMLDecodeError as e:
        raise ConfigError(f"malformed TOML in {path}: {e}") from None

    known_sections = ("network", "library", "problem", "losses", "schedules",
                      "train", "stage2")
    bad = sorted(set(raw) - set(known_sections))
    if bad:
        raise ConfigError(f"unknown section(s): {', '.join(bad)}")
    for sec in ("network", "problem"):
        if sec not in raw:
            raise ConfigError(f"missing required section [{sec}]")

    network = _merge_section("network", raw["network"], _NETWORK_KEYS)
    if (not isinstance(network["widths"], list) or not network["widths"]
            or not all(isinstance(w, int) and w >= 1 for w in network["widths"])):
        raise ConfigError("[network] widths must be a non-empty list of positive integers")
    for key in ("edges", "n_out", "seed"):
        network[key] = _coerce("network", key, network[key], 0)
    network["unit_gates"] = _coerce("network", "unit_gates", network["unit_gates"], False)
    network["rho"] = _coerce("network", "rho", network["rho"], 0.0)
    network["init_w_scale"] = _coerce("network", "init_w_scale",
                                      network["init_w_scale"], 0.0)

    lib_sec = _merge_section("library", raw.get("library", {}),
                             {"names": list(DEFAULT_LIBRARY)})
    library = lib_sec["names"]
    if not isinstance(library, list) or not library:
        raise ConfigError("[library] names must be a non-empty list")
    for name in library:
        get_primitive(name)   # raises ConfigError for unknown names

    prob_raw = dict(raw["problem"])
    kind = prob_raw.pop("kind", None)
    if kind is None:
        raise ConfigError("[problem] missing required key: kind")
    if kind not in _PROBLEM_KEYS:
        raise ConfigError(f"unknown problem kind '{kind}'; "
                          f"choose from {sorted(_PROBLEM_KEYS)}")
    merged = _merge_section("problem", prob_raw, _PROBLEM_KEYS[kind])
    for key, default in _PROBLEM_KEYS[kind].items():
        if default is not None:
            merged[key] = _coerce("problem", key, merged[key], default)
    problem = {"kind": kind, **merged}

    losses = _merge_section("losses", raw.get("losses", {}),
                            _dataclass_defaults(LossWeights))
    schedules = _merge_section("schedules", raw.get("schedules", {}),
                               _dataclass_defaults(Schedules))
    train_defaults = _dataclass_defaults(TrainParams)
    for k in ("stage2", "stage2_max_iter", "export_eps"):
        train_defaults.pop(k)
    train = _merge_section("train", raw.get("train", {}), train_defaults)
    stage2 = _merge_section("stage2", raw.get("stage2", {}),
                            {"enabled": True, "max_iter": 500, "export_eps": 1e-6})

    for sec_name, sec, ref in (("losses", losses, _dataclass_defaults(LossWeights)),
                               ("schedules", schedules, _dataclass_defaults(Schedules)),
                               ("train", train, train_defaults),
                               ("stage2", stage2,
                                {"enabled": True, "max_iter": 500, "export_eps": 1e-6})):
        for k, want in ref.items():
            sec[k] = _coerce(sec_name, k, sec[k], want)

    seed = seed_override
    if seed is None and os.environ.get("SYMKAN_SEED"):
        try:
            seed = int(os.environ["SYMKAN_SEED"])
        except ValueError:
            raise ConfigError("SYMKAN_SEED must be an integer") from None
    if seed is not None:
        network["seed"] = seed
        problem["seed"] = seed
        train["seed"] = seed

    return RunConfig(network=network, library=library, problem=problem,
                     losses=losses, schedules=schedules, train=train,
                     stage2=stage2)


def build_problem(spec: dict):
    """Instantiate a ProblemSpec from a validated [problem] section or a
    checkpoint recipe dict."""
    spec = dict(spec)
    kind = spec.pop("kind")
    dataset = spec.pop("dataset", "")
    if kind == "regression":
        target = spec.get("target")
        if not target:
            raise ConfigError("regression problem needs a target "
                              "(set it in [problem] or use a config file)")
        prob = make_regression_problem(
            target, domain=tuple(spec.get("domain", (0.0, 5.0))),
            n_train=spec.get("n_train", 250), seed=spec.get("seed", 0))
    elif kind == "vdp":
        prob = make_vdp_problem(
            t_end=spec.get("t_end", 20.0), n_train=spec.get("n_train", 100),
            n_interior=spec.get("n_interior", 10000), seed=spec.get("seed", 0),
            signed_power=spec.get("signed_power", False),
            dt=spec.get("dt", 0.01))
        if dataset:
            _apply_vdp_dataset(prob, dataset, spec.get("n_train", 100))
    elif kind == "rd":
        prob = make_rd_problem(
            m_half=spec.get("m_half", 2.0), n_train=spec.get("n_train", 100),
            n_interior=spec.get("n_interior", 5000), seed=spec.get("seed", 0))
    elif kind == "laplace":
        prob = make_laplace_problem(
            n_interior=spec.get("n_interior", 10000),
            n_boundary=spec.get("n_boundary", 400), seed=spec.get("seed", 0))
    else:
        raise ConfigError(f"unknown problem kind '{kind}'")
    return prob


def _apply_vdp_dataset(prob, dataset: str, n_train: int):
    """Replace the generated trajectory observations with rows from a
    `t,x,y` CSV (as written by datagen)."""
    path = Path(dataset)
    if not path.exists():
        raise ConfigError(f"dataset file not found: {path}")
    rows = path.read_text().strip().splitlines()
    if not rows or rows[0].strip() != "t,x,y":
        raise ConfigError(f"dataset {path} must start with header 't,x,y'")
    data = np.array([[float(v) for v in r.split(",")] for r in rows[1:]])
    if data.ndim != 2 or data.shape[1] != 3 or data.shape[0] < 2:
        raise ConfigError(f"dataset {path} must have rows of t,x,y values")
    times, states = data[:, 0], data[:, 1:].T
    idx = np.linspace(0, times.size - 1, n_train).round().astype(int)
    prob.X = times[idx].reshape(1, -1)
    prob.Y = states[:, idx]
    prob.exact_traj = Trajectory(times, states)
    prob.validation_X = times.reshape(1, -1)
