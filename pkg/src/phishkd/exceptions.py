"""Exception types shared across the package."""


class PhishKDError(Exception):
    """Base class for all package errors."""


class DimensionError(PhishKDError, ValueError):
    """Operand shapes are incompatible."""


class ParameterError(PhishKDError, ValueError):
    """A scalar or configuration argument is outside its valid range."""


class ContractError(PhishKDError, ValueError):
    """An operation was called in a way its contract forbids."""


class NumericError(PhishKDError, FloatingPointError):
    """A NaN or infinity was produced."""


class CorpusError(PhishKDError, ValueError):
    """A corpus file contains malformed or invalid records.

    ``errors`` holds ``(line_index, message)`` pairs, 1-based.
    """

    def __init__(self, message, errors=()):
        super().__init__(message)
        self.errors = list(errors)

