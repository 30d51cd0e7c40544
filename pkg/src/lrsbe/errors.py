"""Exception types raised by the estimation stack."""


class LrsbeError(Exception):
    """Base class for all package errors."""


class DimensionError(LrsbeError, ValueError):
    """Array shapes or sizes are inconsistent."""


class ParameterError(LrsbeError, ValueError):
    """A configuration value is outside its valid range."""


class DegenerateInputError(LrsbeError, ValueError):
    """Input data make the requested quantity undefined (e.g. zero-norm channel)."""


class NumericalError(LrsbeError, ArithmeticError):
    """A linear-algebra step failed (singular system, non-finite values)."""

    def __init__(self, message, iteration=None):
        if iteration is not None:
            message = f"iteration {iteration}: {message}"
        super().__init__(message)
        self.iteration = iteration


class EmptyModelError(LrsbeError):
    """Every sparse block has been pruned; the sparse estimate is identically zero."""
