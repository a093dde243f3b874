"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ConfigError(ValueError):
    """An option or hyperparameter is outside the supported set."""


class UsageError(RuntimeError):
    """An API was called in an unsupported way (e.g. backward on a non-scalar)."""


class FormatError(ValueError):
    """A serialized file is malformed or violates a declared invariant."""


class TrainingError(RuntimeError):
    """Optimization diverged; carries the step index where it happened."""

    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = step
