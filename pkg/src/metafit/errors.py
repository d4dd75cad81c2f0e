"""Exception types shared across the package."""


class MetafitError(Exception):
    """Base class for all metafit errors."""


class DataError(MetafitError):
    """Invalid input data: bad columns, bad values, mismatched matrices."""


class FormulaError(MetafitError):
    """Model-formula syntax or semantics error.

    Carries the 1-based byte offset of the failure when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (offset {offset})"
        super().__init__(message)
        self.offset = offset


class FitError(MetafitError):
    """Raised when an operation requires a converged fit and has none."""
