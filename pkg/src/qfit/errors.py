"""Exception types shared across the package."""


class QfitError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(QfitError, ValueError):
    """Raised when array shapes are incompatible with an operation's contract."""


class NonFiniteError(QfitError, FloatingPointError):
    """Raised when an operation produces NaN or infinity."""


class ConfigError(QfitError, ValueError):
    """Raised when a run configuration fails validation."""


class TrainingDivergedError(QfitError):
    """Raised when an optimization loop produces a non-finite loss."""


class DataError(QfitError, ValueError):
    """Raised when input data violates a method's domain requirements."""


class ContainerFormatError(QfitError, ValueError):
    """Raised when a volume container file is malformed or truncated."""
