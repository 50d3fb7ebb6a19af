"""Exception types raised across the toolkit."""


class HdvocError(Exception):
    """Base class for all toolkit errors."""


class InvalidParameterError(HdvocError, ValueError):
    """A numeric argument violates an operation's precondition."""


class InvalidCutoffError(InvalidParameterError):
    pass


class NonIntegerRatioError(InvalidParameterError):
    pass


class InputTooShortError(InvalidParameterError):
    pass


class InvalidBandRangeError(InvalidParameterError):
    pass


class LengthMismatchError(InvalidParameterError):
    pass


class RateMismatchError(InvalidParameterError):
    pass


class UnsupportedFormatError(HdvocError):
    pass


class StaleCacheError(HdvocError, RuntimeError):
    """backward() was called with inputs that differ from the last forward()."""


class CheckpointError(HdvocError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


class ConfigError(HdvocError, ValueError):
    pass


class EmptyCorpusError(HdvocError):
    pass


class UntrainedLevelError(HdvocError):
    pass
