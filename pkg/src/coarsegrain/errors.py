"""Exception hierarchy shared by every module.

Each class maps to one CLI exit code (see ``coarsegrain.cli``).
"""


class CoarseGrainError(Exception):
    """Base class for all library errors."""

    exit_code = 1


class ArgumentError(CoarseGrainError, ValueError):
    exit_code = 2


class ShapeError(CoarseGrainError, ValueError):
    exit_code = 5


class NumericError(CoarseGrainError, ArithmeticError):
    exit_code = 6


class DomainError(CoarseGrainError, ValueError):
    exit_code = 7


class CapacityError(CoarseGrainError, MemoryError):
    exit_code = 8


class FormatError(CoarseGrainError, ValueError):
    """A file does not follow the expected layout."""

    exit_code = 4

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class CorruptionError(FormatError):
    """A container is truncated or fails its checksum."""
