"""Problem definitions, data generation, and the validation metric.

Holds the adaptive Dormand-Prince integrator used for ground-truth ODE
trajectories, the four experiment families (toy regression, Van der Pol
inverse, reaction-diffusion inverse, Laplace forward), their residual
operators written against the generic value ops, and relative error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import vpow_abs, vpow_signed, vtanh
from .errors import ConfigError, StiffnessError

# Dormand-Prince 5(4) tableau
_C = (0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0)
_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
_B5 = (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0)
_B4 = (5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40)
# dense-output weights for the 4th-order continuous extension
_D = (-12715105075 / 11282082432, 0.0, 87487479700 / 32700410799,
      -10690763975 / 1880347072, 701980252875 / 199316789632,
      -1453857185 / 822651844, 69997945 / 29380423)


@dataclass
class Trajectory:
    times: np.ndarray          # uniform grid
    states: np.ndarray         # (n_state, len(times))

    def __post_init__(self):
        dt = np.diff(self.times)
        if dt.size and (dt.min() <= 0 or not np.allclose(dt, dt[0], rtol=1e-9, atol=1e-12)):
            raise ConfigError("trajectory times must be strictly increasing and uniform")


def rk45_integrate(rhs, y0, t_span, dt_out, rtol: float = 1e-10, atol: float = 1e-10) -> Trajectory:
    """Adaptive Dormand-Prince 5(4) with PI step control and dense output
    sampled on the uniform dt_out grid.

    Local error per step is held to atol + rtol*|y|; a step underflow below
    1e-14 of the span raises StiffnessError.
    """
    if rtol <= 0 or atol <= 0 or dt_out <= 0:
        raise ConfigError("rtol, atol, dt_out must be positive")
    t0, tf = float(t_span[0]), float(t_span[1])
    if tf <= t0:
        raise ConfigError("t_span must be increasing")
    y = np.asarray(y0, dtype=float).copy()
    n_out = int(round((tf - t0) / dt_out)) + 1
    times = t0 + dt_out * np.arange(n_out)
    states = np.empty((y.size, n_out))
    states[:, 0] = y
    next_i = 1

    span = tf - t0
    h = min(1e-4 * span, dt_out)
    t = t0
    k1 = np.asarray(rhs(t, y), dtype=float)
    # PI controller constants
    beta = 0.04
    alpha = 0.2 - beta * 0.75
    safe, minscale, maxscale = 0.9, 0.2, 10.0
    errold = 1e-4
    k = [None] * 7
    while t < tf - 1e-14 * span:
        h = min(h, tf - t)
        if h < 1e-14 * span:
            raise StiffnessError(f"step size underflow at t={t:.6g}")
        k[0] = k1
        failed = False
        for stage in range(1, 7):
            ys = y + h * sum(a * k[j] for j, a in enumerate(_A[stage]) if a != 0.0)
            k[stage] = np.asarray(rhs(t + _C[stage] * h, ys), dtype=float)
        y5 = y + h * sum(b * k[j] for j, b in enumerate(_B5) if b != 0.0)
        err_vec = h * sum((b5 - b4) * k[j] for j, (b5, b4) in enumerate(zip(_B5, _B4))
                          if b5 != b4)
        sc = atol + rtol * np.maximum(np.abs(y), np.abs(y5))
        err = float(np.sqrt(np.mean((err_vec / sc) ** 2)))
        if err <= 1.0:
            # accept; fill dense outputs inside [t, t+h]
            k7 = k[6]
            while next_i < n_out and times[next_i] <= t + h + 1e-14 * span:
                theta = (times[next_i] - t) / h
                th1 = 1.0 - theta
                ydiff = y5 - y
                bspl = h * k[0] - ydiff
                r5 = h * sum(d * k[j] for j, d in enumerate(_D) if d != 0.0)
                r4 = ydiff - h * k7 - bspl
                states[:, next_i] = y + theta * (ydiff + th1 * (bspl + theta * (r4 + th1 * r5)))
                next_i += 1
            t += h
            y = y5
            k1 = k7   # first-same-as-last
            scale = maxscale if err == 0.0 else min(
                maxscale, max(minscale, safe * err ** (-alpha) * errold ** beta))
            errold = max(err, 1e-4)
            h *= scale
        else:
            h *= max(safe * err ** (-alpha), minscale)
    if next_i < n_out:   # end-of-span outputs within rounding of tf
        states[:, next_i:] = y[:, None]
    return Trajectory(times, states)


# -- Van der Pol -----------------------------------------------------------------

VDP_TRUTH = {"a": 1.0, "mu": 0.01, "c": 1.0}
VDP_Y0 = (-2.0, 0.0)
VDP_POWER = 2.15


def rpow(x, p: float, signed: bool = False):
    """The non-integer power extended to negative arguments: |x|^p, or
    sign(x)|x|^p behind the switch. Generic over value kinds."""
    return vpow_signed(x, p) if signed else vpow_abs(x, p)


def vdp_rhs(state, params, signed_power: bool = False):
    """(dx, dy) = (a y, mu (1 - x^2.15) y - c x)."""
    x, y = state
    a, mu, c = params
    return (a * y, mu * (1.0 - rpow(x, VDP_POWER, signed_power)) * y - c * x)


@dataclass
class Learnable:
    name: str
    init: float
    truth: float | None = None
    value: float = None

    def __post_init__(self):
        if self.value is None:
            self.value = float(self.init)


@dataclass
class ProblemSpec:
    name: str
    kind: str                        # regression | ode_inverse | pde_inverse | pde_forward
    n_in: int
    n_out: int
    domain: list                     # per input coordinate [lo, hi]
    X: np.ndarray | None = None      # (n_in, N_tr)
    Y: np.ndarray | None = None      # (n_out, N_tr)
    S_r: np.ndarray | None = None    # (n_in, R)
    S_b: np.ndarray | None = None
    G_b: np.ndarray | None = None
    S_0: np.ndarray | None = None
    G_0: np.ndarray | None = None
    learnables: list = field(default_factory=list)
    fixed: dict = field(default_factory=dict)
    residual: object = None          # residual(jets, par, aux) -> list of rows
    residual_orders: dict = field(default_factory=dict)   # coord -> jet order
    aux_rows: dict = field(default_factory=dict)          # name -> row over S_r
    exact: object = None             # exact(X) -> (n_out, N), if known
    exact_traj: Trajectory | None = None
    validation_X: np.ndarray | None = None
    recipe: dict = field(default_factory=dict)   # factory kwargs, for checkpoints

    @property
    def values(self) -> dict:
        out = dict(self.fixed)
        for l in self.learnables:
            out[l.name] = l.value
        return out

    def set_values(self, d: dict):
        for l in self.learnables:
            if l.name in d:
                l.value = float(d[l.name])

    def input_affine(self):
        """Per-coordinate (scale, shift) mapping the domain onto [-1, 1]."""
        out = []
        for lo, hi in self.domain:
            out.append((2.0 / (hi - lo), -(hi + lo) / (hi - lo)))
        return out


def _rng(seed, stream: int):
    return np.random.default_rng([int(seed), stream])


def make_vdp_problem(t_end: float = 20.0, n_train: int = 100, n_interior: int = 10000,
                     seed: int = 0, signed_power: bool = False, dt: float = 0.01) -> ProblemSpec:
    """Inverse Van der Pol: identify (a, mu, c) from a trajectory and the
    residual of the governing system."""
    if t_end <= 0:
        raise ConfigError("t_end must be positive")
    truth = (VDP_TRUTH["a"], VDP_TRUTH["mu"], VDP_TRUTH["c"])
    traj = rk45_integrate(lambda t, y: np.asarray(vdp_rhs(y, truth, signed_power)),
                          np.asarray(VDP_Y0), (0.0, t_end), dt)
    n_grid = traj.times.size
    idx = np.linspace(0, n_grid - 1, n_train).round().astype(int)
    X = traj.times[idx].reshape(1, -1)
    Y = traj.states[:, idx]
    S_r = _rng(seed, 11).uniform(0.0, t_end, n_interior).reshape(1, -1)

    def residual(jets, par, aux):
        xj, yj = jets[0]
        x, y = xj.c[0], yj.c[0]
        r1 = xj.derivative(1) - par["a"] * y
        damp = par["mu"] * ((1.0 - rpow(x, VDP_POWER, signed_power)) * y)
        r2 = yj.derivative(1) - damp + par["c"] * x
        return [r1, r2]

    return ProblemSpec(
        name=f"vdp_t{t_end:g}", kind="ode_inverse", n_in=1, n_out=2,
        domain=[[0.0, t_end]], X=X, Y=Y, S_r=S_r,
        learnables=[Learnable("a", 0.5, 1.0), Learnable("mu", 0.1, 0.01),
                    Learnable("c", 0.5, 1.0)],
        residual=residual, residual_orders={0: 1},
        exact_traj=traj, validation_X=traj.times.reshape(1, -1),
        exact=None,
        recipe={"kind": "vdp", "t_end": t_end, "n_train": n_train,
                "n_interior": n_interior, "seed": seed,
                "signed_power": signed_power, "dt": dt})


def rd_exact(x):
    """u = sin^3(6x) and its second derivative."""
    x = np.asarray(x, dtype=float)
    s, c = np.sin(6 * x), np.cos(6 * x)
    u = s ** 3
    uxx = 216 * s * c ** 2 - 108 * s ** 3
    return u, uxx


RD_KAPPA = 0.7
RD_D = 0.01


def make_rd_problem(m_half: float = 2.0, n_train: int = 100, n_interior: int = 5000,
                    seed: int = 0) -> ProblemSpec:
    """Inverse reaction-diffusion: D u_xx + kappa tanh(u) = f with f
    manufactured from the exact u; kappa is identified, D is fixed."""
    if m_half <= 0:
        raise ConfigError("m_half must be positive")
    r = _rng(seed, 12)
    X = r.uniform(-m_half, m_half, n_train).reshape(1, -1)
    Y = rd_exact(X[0])[0].reshape(1, -1)
    S_r = _rng(seed, 13).uniform(-m_half, m_half, n_interior).reshape(1, -1)
    u_r, uxx_r = rd_exact(S_r[0])
    f_row = RD_D * uxx_r + RD_KAPPA * np.tanh(u_r)
    S_b = np.array([[-m_half, m_half]])
    G_b = rd_exact(S_b[0])[0].reshape(1, -1)

    def residual(jets, par, aux):
        uj = jets[0][0]
        return [RD_D * uj.derivative(2) + par["kappa"] * vtanh(uj.c[0]) - aux["f"]]

    return ProblemSpec(
        name=f"rd_m{m_half:g}", kind="pde_inverse", n_in=1, n_out=1,
        domain=[[-m_half, m_half]], X=X, Y=Y, S_r=S_r, S_b=S_b, G_b=G_b,
        learnables=[Learnable("kappa", 0.3, RD_KAPPA)], fixed={"D": RD_D},
        residual=residual, residual_orders={0: 2}, aux_rows={"f": f_row},
        exact=lambda XX: rd_exact(np.atleast_2d(XX)[0])[0].reshape(1, -1),
        validation_X=np.linspace(-m_half, m_half, 1000).reshape(1, -1),
        recipe={"kind": "rd", "m_half": m_half, "n_train": n_train,
                "n_interior": n_interior, "seed": seed})


def laplace_exact(X):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    return (np.sin(np.pi * X[0]) * np.sinh(np.pi * X[1])).reshape(1, -1)


def make_laplace_problem(n_interior: int = 10000, n_boundary: int = 400,
                         seed: int = 0) -> ProblemSpec:
    """Forward Laplace on the unit square with Dirichlet data from
    sin(pi x) sinh(pi y)."""
    if n_boundary % 4 != 0:
        raise ConfigError("n_boundary must be divisible by 4 (points per side)")
    r = _rng(seed, 14)
    S_r = r.uniform(0.0, 1.0, (2, n_interior))
    m = n_boundary // 4
    side = np.linspace(0.0, 1.0, m)
    S_b = np.concatenate([
        np.stack([side, np.zeros(m)]),       # bottom
        np.stack([side, np.ones(m)]),        # top
        np.stack([np.zeros(m), side]),       # left
        np.stack([np.ones(m), side]),        # right
    ], axis=1)
    G_b = laplace_exact(S_b)

    def residual(jets, par, aux):
        return [jets[0][0].derivative(2) + jets[1][0].derivative(2)]

    return ProblemSpec(
        name="laplace", kind="pde_forward", n_in=2, n_out=1,
        domain=[[0.0, 1.0], [0.0, 1.0]], S_r=S_r, S_b=S_b, G_b=G_b,
        residual=residual, residual_orders={0: 2, 1: 2},
        exact=laplace_exact,
        validation_X=np.stack(np.meshgrid(np.linspace(0, 1, 101),
                                          np.linspace(0, 1, 101),
                                          indexing="ij")).reshape(2, -1),
        recipe={"kind": "laplace", "n_interior": n_interior,
                "n_boundary": n_boundary, "seed": seed})


_REGRESSION_TARGETS = {
    "square": lambda x: x ** 2,
    "trig_rational": lambda x: np.sin(3 * x) / (1 + x ** 2) + 0.4 * np.cos(5 * x),
}


def make_regression_problem(target: str, domain=(0.0, 5.0), n_train: int = 250,
                            seed: int = 0) -> ProblemSpec:
    fn = _REGRESSION_TARGETS.get(target)
    if fn is None:
        raise ConfigError(f"unknown regression target '{target}'; "
                          f"choose from {sorted(_REGRESSION_TARGETS)}")
    lo, hi = float(domain[0]), float(domain[1])
    X = np.sort(_rng(seed, 15).uniform(lo, hi, n_train)).reshape(1, -1)
    Y = fn(X[0]).reshape(1, -1)
    return ProblemSpec(
        name=target, kind="regression", n_in=1, n_out=1, domain=[[lo, hi]],
        X=X, Y=Y,
        exact=lambda XX: fn(np.atleast_2d(XX)[0]).reshape(1, -1),
        validation_X=np.linspace(lo, hi, 500).reshape(1, -1),
        recipe={"kind": "regression", "target": target, "domain": [lo, hi],
                "n_train": n_train, "seed": seed})


def relative_error(pred, truth) -> float:
    """||pred - truth|| / ||truth||; for multi-state rows (n_state, N) the
    per-state relative errors are averaged; scalars reduce to |dp|/|t|."""
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape:
        raise ConfigError(f"shape mismatch {pred.shape} vs {truth.shape}")
    if truth.ndim == 2 and truth.shape[0] > 1:
        errs = []
        for i in range(truth.shape[0]):
            n = np.linalg.norm(truth[i])
            if n == 0:
                raise ConfigError("relative_error: zero-norm truth component")
            errs.append(np.linalg.norm(pred[i] - truth[i]) / n)
        return float(np.mean(errs))
    n = np.linalg.norm(truth)
    if n == 0:
        raise ConfigError("relative_error: zero-norm truth")
    return float(np.linalg.norm(pred - truth) / n)
