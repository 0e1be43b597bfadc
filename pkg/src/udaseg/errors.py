"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Raised when an input violates a documented precondition."""


class DimensionError(ValidationError):
    """Raised on shape/size mismatches (wrong rank, incompatible sizes)."""


class ConfigError(ValueError):
    """Raised for invalid or inconsistent configuration values."""


class VolumeFormatError(IOError):
    """Raised when a volume file is missing, truncated, or malformed."""


class CheckpointMismatchError(RuntimeError):
    """Raised when a checkpoint's stored config disagrees with the model."""


class TrainingDivergedError(RuntimeError):
    """Raised when a loss term becomes NaN during training."""

    def __init__(self, term, epoch, iteration):
        self.term = term
        self.epoch = epoch
        self.iteration = iteration
        super().__init__(
            f"loss term '{term}' is NaN at epoch {epoch}, iteration {iteration}"
        )
