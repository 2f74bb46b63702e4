"""Exception types shared across modules."""


class RobustFedError(Exception):
    """Base class for all package errors."""


class DimensionMismatch(RobustFedError, ValueError):
    """Two factors (or a factor and a point) disagree on dimension."""


class NotPositiveDefinite(RobustFedError, ValueError):
    """A factor was used as a distribution but its precision is not PD."""


class OptimizerError(RobustFedError, RuntimeError):
    """Iterative minimisation failed to reach the requested tolerance."""

    def __init__(self, message, grad_norm=None, iterations=None):
        super().__init__(message)
        self.grad_norm = grad_norm
        self.iterations = iterations
