"""Exception types shared across the package.

Every error raised by library code derives from CtjbfError and carries the
name of the module that raised it, so the CLI can report which stage failed.
"""


class CtjbfError(Exception):
    """Base class for all package errors."""

    module = "ctjbf"

    def __init__(self, message: str):
        super().__init__(f"{self.module}: {message}")


class FormatError(CtjbfError):
    """A file does not follow the expected on-disk format."""

    module = "volume"


class TruncationError(FormatError):
    """A file payload is shorter than its header promises."""


class ShapeError(CtjbfError, ValueError):
    """Array dimensions do not satisfy an operation's contract."""

    module = "ctjbf"


class DomainError(CtjbfError, ValueError):
    """A numeric argument is outside its valid domain."""

    module = "ctjbf"


class StateError(CtjbfError):
    """An operation was called before its prerequisite state exists."""

    module = "nn"


class ConfigError(CtjbfError):
    """A run configuration is incomplete or inconsistent."""

    module = "cli"


class InsufficientDataError(CtjbfError, ValueError):
    """Too few samples to run a statistical procedure."""

    module = "metrics"


def shape_error(module: str, message: str) -> ShapeError:
    err = ShapeError.__new__(ShapeError)
    Exception.__init__(err, f"{module}: {message}")
    err.module = module
    return err


def domain_error(module: str, message: str) -> DomainError:
    err = DomainError.__new__(DomainError)
    Exception.__init__(err, f"{module}: {message}")
    err.module = module
    return err
