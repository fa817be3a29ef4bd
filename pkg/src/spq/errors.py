"""Exception hierarchy shared across the package."""


class SPQError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(SPQError, ValueError):
    """Array shapes do not agree."""


class ParameterError(SPQError, ValueError):
    """A scalar parameter is outside its valid range."""


class DegenerateInputError(SPQError, ValueError):
    """Input is numerically degenerate (zero norm, NaN, ...)."""


class ConfigurationError(SPQError, ValueError):
    """A model or run configuration is inconsistent."""


class UsageError(SPQError, RuntimeError):
    """An API was called in the wrong state (reused tape, empty index, ...)."""


class FormatError(SPQError, ValueError):
    """A file does not follow its binary/text format."""


class DataCorruptionError(FormatError):
    """Stored data is internally inconsistent (e.g. out-of-range code)."""


class TrainingDivergedError(SPQError, FloatingPointError):
    """The loss became non-finite during training."""
