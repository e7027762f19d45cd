"""Exception types shared across the package."""


class GridMismatchError(ValueError):
    """Operands live on different grids or have incompatible shapes."""


class MeanZeroViolation(ValueError):
    """Operation requires a zero spatial mean and the field has a nonzero one."""


class RangeViolation(RuntimeError):
    """A drift shift falls outside the span of the forcing directions."""


class DivergedTrajectory(RuntimeError):
    """A trajectory produced non-finite values.

    Carries the last time at which the state was still finite.
    """

    def __init__(self, message: str, last_finite_time: float):
        super().__init__(message)
        self.last_finite_time = last_finite_time


class ConfigError(ValueError):
    """Invalid experiment configuration; message carries the key path."""


class InsufficientData(ValueError):
    """A diagnostic was asked to average over too short a record."""
