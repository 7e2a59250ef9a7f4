"""Exception types shared across the package."""


class CELError(Exception):
    """Base class for all errors raised by causal_ehr_lab."""


class ValidationError(CELError, ValueError):
    """An input violates a documented invariant."""


class CohortFormatError(CELError, ValueError):
    """A cohort file could not be parsed.

    Attributes
    ----------
    line : int or None
        1-based line number of the offending record, when known.
    """

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class EstimationError(CELError, ArithmeticError):
    """An estimate is undefined for the given data (empty group, zero denominator...)."""


class FluctuationError(EstimationError):
    """The TMLE fluctuation solve failed to converge."""

    def __init__(self, message, grad_norm=None):
        super().__init__(message)
        self.grad_norm = grad_norm


class ConvergenceError(CELError, RuntimeError):
    """An iterative solver hit its iteration cap."""


class TrainingError(CELError, RuntimeError):
    """Non-finite loss during network training."""

    def __init__(self, message, epoch=None, batch=None, parts=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch
        self.parts = parts or {}


class CellTimeout(CELError, TimeoutError):
    """A benchmark cell exceeded its wall-clock budget."""
