"""Exception types shared across the package."""


class InbetweenError(Exception):
    """Base class for all package errors."""


class DegenerateRotation(InbetweenError, ValueError):
    pass


class NotARotation(InbetweenError, ValueError):
    pass


class DimensionMismatch(InbetweenError, ValueError):
    pass


class ShapeMismatch(DimensionMismatch):
    pass


class TooShort(InbetweenError, ValueError):
    pass


class SkeletonError(InbetweenError, ValueError):
    pass


class ParseError(InbetweenError, ValueError):
    def __init__(self, message: str, line: int, column: int = 1):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


class UnsupportedChannel(InbetweenError, ValueError):
    pass


class OddDim(InbetweenError, ValueError):
    pass


class BadSchedule(InbetweenError, ValueError):
    pass


class IndexOutOfRange(InbetweenError, IndexError):
    pass


class UntrainedModel(InbetweenError, RuntimeWarning):
    """Raised or issued as a warning when sampling from a model that was never trained."""


class MappingMismatch(InbetweenError, ValueError):
    pass


class BadRatio(InbetweenError, ValueError):
    pass


class SimDiverged(InbetweenError, RuntimeError):
    def __init__(self, message: str, frame: int | None = None):
        super().__init__(message if frame is None else f"{message} (frame {frame})")
        self.frame = frame


class LengthMismatch(InbetweenError, ValueError):
    pass


class NeedTwoKeyframes(InbetweenError, ValueError):
    pass


class SingularCovariance(InbetweenError, ArithmeticError):
    pass


class ConfigError(InbetweenError, ValueError):
    pass


class IoError(InbetweenError, OSError):
    pass
