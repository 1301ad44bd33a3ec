"""Exception types shared across the package."""


class SymkanError(Exception):
    """Base class for package errors."""


class ConfigError(SymkanError):
    """Invalid or unknown configuration input."""


class NumericalError(SymkanError):
    """Non-finite value or numerical abort during computation."""


class StiffnessError(NumericalError):
    """Adaptive integrator step size underflowed."""


class StateError(SymkanError):
    """Operation requires a state the object is not in (e.g. hard-mode
    evaluation of an unhardened network)."""
