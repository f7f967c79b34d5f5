"""Exception hierarchy shared across the package."""


class HipposurvError(Exception):
    """Base class for all package errors."""


class ShapeError(HipposurvError, ValueError):
    """Array or volume dimensions do not agree."""


class NumericError(HipposurvError, ValueError):
    """A non-finite value showed up where a finite one is required."""


class PreconditionError(HipposurvError, ValueError):
    """An operation was called with inputs outside its domain."""


class ConfigError(HipposurvError, ValueError):
    pass


class ConvergenceError(HipposurvError, RuntimeError):
    pass


class TrainingError(HipposurvError, RuntimeError):
    pass


class FormatError(HipposurvError, ValueError):
    """A file could not be parsed. ``offset`` is the byte offset, when known."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class LoadError(FormatError):
    pass


class UndefinedWeightError(HipposurvError, ValueError):
    """IPCW weight requested where the censoring survivor function is zero."""


class UndefinedCorrelationError(HipposurvError, ValueError):
    pass
