"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes, so each class carries one.
"""


class ClmorphError(Exception):
    exit_code = 1


class ConfigurationError(ClmorphError, ValueError):
    exit_code = 2


class DimensionError(ClmorphError, ValueError):
    exit_code = 2


class UsageError(ClmorphError, ValueError):
    exit_code = 2


class DomainError(ClmorphError, ValueError):
    exit_code = 4


class NumericalError(ClmorphError, ArithmeticError):
    exit_code = 4


class FormatError(ClmorphError, OSError):
    """Malformed file; ``offset`` is the byte position where parsing failed."""

    exit_code = 3

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class GenerationError(ClmorphError, RuntimeError):
    exit_code = 3


class UndefinedMetricError(ClmorphError, ValueError):
    exit_code = 3
