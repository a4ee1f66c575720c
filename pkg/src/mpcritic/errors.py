"""Exception types shared across the package."""


class MpcriticError(Exception):
    """Base class for all package errors."""


class ConfigError(MpcriticError, ValueError):
    """Invalid configuration, parameter layout or shape."""


class NumericalError(MpcriticError, ArithmeticError):
    """A non-finite value appeared during a computation.

    ``component`` names the parameter group (or rollout step) where it was
    first detected.
    """

    def __init__(self, message, component=None, step=None):
        super().__init__(message)
        self.component = component
        self.step = step


class NotStabilizableError(MpcriticError):
    """Riccati iteration failed to converge."""


class DivergenceError(MpcriticError):
    """A training run left its sane operating range."""


class EmptyBufferError(MpcriticError, IndexError):
    """Sampling from a replay buffer that holds no transitions."""
