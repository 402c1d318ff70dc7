"""Exception hierarchy shared by the library and the command line."""


class FormaError(Exception):
    """Base class for every error raised by :mod:`forma`."""

    exit_code = 1


class DimensionError(FormaError, ValueError):
    """Tensor shapes do not satisfy an operation's contract."""

    exit_code = 2


class DomainError(FormaError, ValueError):
    """An argument lies outside the domain an operation is defined on."""

    exit_code = 2


class UsageError(FormaError, RuntimeError):
    """The API was called in an invalid state (e.g. backward on a detached tensor)."""

    exit_code = 1


class NumericError(FormaError, FloatingPointError):
    """NaN or Inf appeared in a forward or backward pass."""

    exit_code = 3


class DataError(FormaError, OSError):
    """A file is missing, corrupt, or has unexpected content."""

    exit_code = 2
