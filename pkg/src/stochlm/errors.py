"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: configuration/input problems exit
with 2, numeric failures (integration blow-up, singular bridge
geometry, ill-conditioned likelihoods) exit with 3.
"""


class StochlmError(Exception):
    """Base class for all package errors."""


class InputError(StochlmError, ValueError):
    """Invalid argument values (non-finite input, bad shapes, bad ranges)."""


class ConfigError(StochlmError, ValueError):
    """Configuration file failed schema validation or is inconsistent."""


class IntegrationError(StochlmError, RuntimeError):
    """Time integration produced non-finite state."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class BridgeError(StochlmError, RuntimeError):
    """Guided bridge simulation failed (rank-deficient diffusion, blow-up)."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class EstimationError(StochlmError, RuntimeError):
    """Importance-sampling estimate is degenerate (all weights vanished)."""


class NumericError(StochlmError, RuntimeError):
    """Linear-algebra failure (non-positive-definite covariance, etc.)."""
