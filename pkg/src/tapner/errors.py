"""Exception types shared across the package."""


class TapnerError(Exception):
    """Base class for package-specific errors."""


class ConfigError(TapnerError, ValueError):
    """Invalid configuration (bad dimensions, out-of-range values, ...)."""


class ContextOverflowError(TapnerError):
    """A token sequence exceeds the model's maximum context length."""


class UnknownTokenError(TapnerError, ValueError):
    """A token id outside the model vocabulary was passed to the model."""


class ChecksumError(TapnerError, IOError):
    """A serialized artifact failed its integrity check."""


class ConfigMismatchError(TapnerError, IOError):
    """A serialized artifact does not match the expected configuration."""


class EmptyStoreError(TapnerError, ValueError):
    """A feature store with no trainable records was passed to training."""


class TrainingDivergedError(TapnerError, RuntimeError):
    """Training hit a non-finite loss. Carries the failing step index."""

    def __init__(self, step: int, message: str | None = None):
        self.step = step
        super().__init__(message or f"non-finite loss at step {step}")
