"""Exceptions raised across the toolkit."""


class NoisePriorError(Exception):
    """Base class for all toolkit errors."""
    pass


class PrivacyDomainError(NoisePriorError, ValueError):
    """Invalid privacy parameter (epsilon, delta, sigma, mu, q, steps)."""
    pass


class CalibrationError(NoisePriorError):
    """No noise multiplier in range meets the requested budget."""
    pass


class PldOverflowError(NoisePriorError):
    """Composed privacy loss distribution outgrew the configured grid."""
    pass


class BudgetExceededError(NoisePriorError):
    """A mechanism would push the ledger past its budget."""
    pass


class NumericalFailureError(NoisePriorError):
    """Non-finite values during training."""

    def __init__(self, message: str, step: int = -1):
        super().__init__(message)
        self.step = step


class ShapeError(NoisePriorError, ValueError):
    """Tensor or parameter shapes do not agree."""
    pass


class ConfigError(NoisePriorError):
    """Experiment configuration is invalid."""
    pass


class FormatError(NoisePriorError):
    """Binary file has the wrong magic or version."""
    pass
