"""Exception types shared across the package."""


class CycregError(Exception):
    """Base class for all package errors."""


class DataError(CycregError, ValueError):
    """Invalid or inconsistent input data (bad files, mismatched dims, ...)."""


class DivergenceError(CycregError, FloatingPointError):
    """The optimizer produced a non-finite loss.

    ``trace`` holds the loss breakdowns recorded up to the last finite value.
    """

    def __init__(self, message, trace=()):
        super().__init__(message)
        self.trace = list(trace)
