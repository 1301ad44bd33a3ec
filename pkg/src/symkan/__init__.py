"""Symbolic regression with gated analytic units.

Networks of learned scalar projections feed a small library of analytic
primitives through trainable selection gates. Stage I anneals the gates with
Gumbel-Softmax sampling while fitting data and differential-equation
residuals; hardening commits each unit to its best primitive; Stage II
refines the surviving continuous parameters with L-BFGS. The hardened
network is an exact closed-form expression, exported as text and as a
structured tree.
"""

from .errors import ConfigError, NumericalError, StateError, StiffnessError
from .losses import LossWeights, Schedules
from .network import NetworkConfig, forward, forward_jet, harden, init_network
from .problems import (make_laplace_problem, make_rd_problem,
                       make_regression_problem, make_vdp_problem,
                       relative_error, rk45_integrate)
from .training import TrainParams, load_checkpoint, save_checkpoint, train_pipeline

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "NumericalError", "StateError", "StiffnessError",
    "LossWeights", "Schedules", "NetworkConfig", "TrainParams",
    "forward", "forward_jet", "harden", "init_network",
    "make_laplace_problem", "make_rd_problem", "make_regression_problem",
    "make_vdp_problem", "relative_error", "rk45_integrate",
    "load_checkpoint", "save_checkpoint", "train_pipeline",
    "__version__",
]
