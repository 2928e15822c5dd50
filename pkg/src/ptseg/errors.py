"""Exception types shared across the package."""


class PtsegError(Exception):
    """Base class for all package errors."""


class DimensionError(PtsegError, ValueError):
    pass


class ArgumentError(PtsegError, ValueError):
    pass


class EmptyInputError(ArgumentError):
    pass


class LabelError(PtsegError, ValueError):
    pass


class StateError(PtsegError, RuntimeError):
    pass


class FormatError(PtsegError, ValueError):
    """Malformed file. ``offset`` is the byte (or line) position of the problem."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at offset {offset})"
        super().__init__(message)
        self.offset = offset


class DataError(PtsegError, ValueError):
    pass


class SamplingExhaustedError(PtsegError, RuntimeError):
    pass


class UndefinedMetricsError(PtsegError, ValueError):
    pass
