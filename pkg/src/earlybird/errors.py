"""Exception hierarchy shared by every module of the package."""


class EarlyBirdError(Exception):
    """Base class for all package errors."""


class DimensionError(EarlyBirdError, ValueError):
    """Tensor shapes are inconsistent with the requested operation."""


class NumericError(EarlyBirdError, ArithmeticError):
    """A computation produced NaN or Inf."""


class DegenerateBatchError(EarlyBirdError, ValueError):
    """Batch statistics were requested over fewer than two elements."""


class InputError(EarlyBirdError, ValueError):
    """An argument is outside the domain of the operation."""


class ConfigError(EarlyBirdError, ValueError):
    """Invalid hyperparameter or experiment configuration."""


class SpecError(EarlyBirdError, ValueError):
    """A network description is not shape-consistent."""


class MaskError(EarlyBirdError, ValueError):
    """A channel mask would leave a layer without channels."""


class TrainingError(EarlyBirdError, RuntimeError):
    """Training diverged (non-finite loss)."""

    def __init__(self, message, epoch=None):
        super().__init__(message if epoch is None else f"epoch {epoch}: {message}")
        self.epoch = epoch


class DataFormatError(EarlyBirdError, ValueError):
    """A dataset file does not match its declared binary format."""

    def __init__(self, message, offset=None):
        super().__init__(message if offset is None else f"{message} (byte offset {offset})")
        self.offset = offset


class CheckpointError(EarlyBirdError, ValueError):
    """A checkpoint file is corrupt, truncated or inconsistent."""
