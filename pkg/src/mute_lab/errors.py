"""Exception types shared across the package."""


class MuteLabError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(MuteLabError):
    """Operands have incompatible shapes."""


class ContractError(MuteLabError):
    """A documented precondition or postcondition was violated."""


class ConfigError(MuteLabError):
    """Invalid or inconsistent configuration."""


class ProjectionError(MuteLabError):
    """Shuffle matrix projection cannot produce a valid matrix."""


class GradCheckError(MuteLabError):
    """Gradient checking could not be carried out."""


class CheckpointFormatError(MuteLabError):
    """Checkpoint file is malformed, truncated, or has the wrong version."""


class DataError(MuteLabError):
    """Invalid input data (for example an out-of-vocabulary token id)."""


class TrainingError(MuteLabError):
    """Optimization cannot continue (a non-finite loss or gradient)."""
