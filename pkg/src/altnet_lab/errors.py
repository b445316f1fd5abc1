"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration (bad sizes, non-divisible schedules, unknown keys)."""


class ShapeError(ValueError):
    """Array dimensions do not agree with the owning object."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class PreconditionError(ValueError):
    """An operation was called on an object that cannot honour it (e.g. empty buffer)."""
