"""Exception hierarchy shared by every module.

CLI exit codes key off the two top-level families: :class:`ConfigError`
maps to exit 2 and :class:`NumericalError` to exit 3.
"""


class IntertwinerError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(IntertwinerError, ValueError):
    """Invalid input, shape, configuration or file contents."""


class DimensionError(ConfigError):
    pass


class FormatError(ConfigError):
    """Malformed or incompatible file."""


class GroupMembershipError(ConfigError):
    """An element violates the constraints of its activation's group."""


class NumericalError(IntertwinerError, ArithmeticError):
    """A computation produced non-finite values or failed to converge."""


class SingularMatrixError(NumericalError):
    pass


class ConvergenceError(NumericalError):
    pass


class DivergenceError(NumericalError):
    """Training produced a non-finite loss."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history
