"""Exception hierarchy shared across the package."""


class PhalanxError(Exception):
    """Base class for all package errors."""


class DataValidationError(PhalanxError, ValueError):
    """Input data violates a structural or content invariant."""


class ParseError(DataValidationError):
    """A delimited input file could not be parsed.

    Attributes:
        line: 1-based line number of the offending row, if known.
    """

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class UndefinedMetricError(PhalanxError, ValueError):
    """A ranking metric was requested on a block without positive cases."""


class NumericalError(PhalanxError, ArithmeticError):
    """Non-finite arithmetic during model fitting or prediction."""
