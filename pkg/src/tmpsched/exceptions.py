"""Exception types raised across the package.

Each maps onto one CLI exit code (see :mod:`tmpsched.cli`).
"""


class TmpSchedError(Exception):
    """Base class for all package errors."""


class ParameterError(TmpSchedError, ValueError):
    """An argument is outside its valid range."""


class ShapeError(TmpSchedError, ValueError):
    """Array dimensions do not match the model or schedule."""


class ConfigError(ParameterError):
    """An experiment configuration failed validation."""


class InfeasibleTargetError(TmpSchedError, ValueError):
    """The requested speedup cannot be reached with the given per-step speedup."""


class CapacityError(TmpSchedError, RuntimeError):
    """An exhaustive enumeration would exceed the configured cap."""


class UndefinedCorrelationError(TmpSchedError, ValueError):
    """A correlation coefficient is undefined, e.g. for a constant sequence."""
