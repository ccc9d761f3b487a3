"""Exception hierarchy shared across the package."""

__all__ = [
    "DataError",
    "SingularParameterError",
    "EnumerationLimitError",
    "EstimationError",
    "IdentificationError",
]


class DataError(ValueError):
    """Malformed input data.  ``line`` is the 1-based line number, if known."""

    def __init__(self, message, line=None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


class SingularParameterError(ArithmeticError):
    """Parameters at which a closed-form expression has a zero denominator."""


class EnumerationLimitError(ValueError):
    """Requested exact enumeration exceeds the configured size guard."""


class EstimationError(RuntimeError):
    """Numerical failure during estimation (singular matrices, rank loss)."""


class IdentificationError(RuntimeError):
    """A constructive identification step could not be carried out."""
