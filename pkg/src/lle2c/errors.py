"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid geometry, physics or run configuration."""


class DimensionError(ValueError):
    """Operand shapes do not conform."""


class UsageError(RuntimeError):
    """An API was called outside its contract."""


class CoverageError(ValueError):
    """Stitching left cells uncovered or doubly written."""

    def __init__(self, message, cells=()):
        super().__init__(message)
        self.cells = list(cells)


class NumericError(ArithmeticError):
    """A solver failed to converge or produced non-finite values."""


class TimeStepError(NumericError):
    """Explicit transport needed more sub-steps than allowed."""


class SimulationError(RuntimeError):
    """Dataset generation failed on a particular sample."""

    def __init__(self, message, sample=None):
        super().__init__(message)
        self.sample = sample


class TrainingAbort(RuntimeError):
    """Non-finite loss during training; carries batch provenance."""

    def __init__(self, message, provenance=()):
        super().__init__(message)
        self.provenance = list(provenance)
