"""Error types raised across the package."""


class SubconceptError(Exception):
    """Base class for every error raised by this package."""


class StructuralError(SubconceptError, ValueError):
    """Malformed input: bad shapes, non-monotone rays, dimension mismatch."""


class ValidationError(SubconceptError, ValueError):
    """A configuration or generator spec violates a declared constraint."""


class FormatError(SubconceptError, ValueError):
    """A binary file could not be decoded.

    ``offset`` is the byte position at which decoding failed.
    """

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class NumericalError(SubconceptError, ArithmeticError):
    """A non-finite value appeared in a loss, gradient or update."""

    def __init__(self, message, epoch=None, breakdown=None):
        self.epoch = epoch
        self.breakdown = breakdown or {}
        super().__init__(message)


class UsageError(SubconceptError, RuntimeError):
    """An API was called out of order, e.g. backward without a forward cache."""
