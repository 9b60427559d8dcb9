"""Exception hierarchy shared by every module."""


class SvaeError(Exception):
    pass


class DomainError(SvaeError, ValueError):
    """Parameters outside a family's natural parameter space."""


class UsageError(SvaeError, ValueError):
    """Inputs that violate an operation's contract (shapes, families, tags)."""


class InputError(SvaeError, ValueError):
    """Non-finite or malformed data."""


class NumericalError(SvaeError, ArithmeticError):
    """Loss of definiteness or similar breakdown inside an algorithm."""


class StepError(SvaeError):
    """A parameter update could not be made proper by backtracking."""


class FormatError(SvaeError, ValueError):
    """Corrupt or unsupported on-disk file."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigError(SvaeError, ValueError):
    pass
