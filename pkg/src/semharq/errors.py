"""Exception types shared across the package."""


class SemHarqError(Exception):
    """Base class for all package errors."""


class ShapeError(SemHarqError, ValueError):
    """Array dimensions do not match what an operation expects."""


class StateError(SemHarqError, RuntimeError):
    """An operation was called in the wrong state (e.g. backward before forward)."""


class ConfigError(SemHarqError, ValueError):
    """Invalid configuration value or unknown key."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class DegenerateInputError(SemHarqError, ValueError):
    """Input cannot be processed, e.g. a zero-norm block."""


class InvariantError(SemHarqError, ValueError):
    """A domain invariant was violated (duplicate positions, non-normalized posterior, ...)."""


class DivergenceError(SemHarqError, RuntimeError):
    """Training produced a non-finite loss."""
