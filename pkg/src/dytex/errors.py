"""Exception hierarchy shared across the package."""


class DytexError(Exception):
    """Base class for all package errors."""


class NoFramesError(DytexError):
    """A frame directory matched no files."""


class DimensionMismatchError(DytexError):
    """Arrays that must share dimensions do not."""


class UndecodableFileError(DytexError):
    """A frame or mask file exists but cannot be decoded."""


class NoContourError(DytexError):
    """A semantic mask has no foreground, so no contour exists."""


class CoverageGapError(DytexError):
    """A patch set leaves at least one output pixel uncovered."""


class NonFiniteValueError(DytexError):
    """A forward operation produced NaN or Inf."""


class NonFiniteGradientError(DytexError):
    """A gradient buffer contains NaN or Inf."""


class NeedSubsequentFramesError(DytexError):
    """The source video has no frames beyond the initial one."""


class ConfigError(DytexError):
    """A configuration file or value is invalid."""


class StageError(DytexError):
    """A pipeline stage failed; carries the stage name and cause."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
