"""Exception types shared across the package."""


class TaskAdaptError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(TaskAdaptError):
    """Malformed or inconsistent configuration (unknown keys, bad values)."""


class DimensionMismatch(TaskAdaptError):
    """Array arguments disagree with the shapes a layer was built for."""


class InvalidPlacement(TaskAdaptError):
    """Adapter placement names a stage/layer that does not exist."""


class InvalidLabel(TaskAdaptError):
    """Ground-truth labels outside the declared class range."""


class ZeroGradient(TaskAdaptError):
    """A task gradient vanished where a direction was required (cosine undefined)."""


class DegenerateVariance(TaskAdaptError):
    """Per-token activation variance collapsed below the numeric floor."""


class NonFiniteLoss(TaskAdaptError):
    """Training loss became NaN/Inf; carries the batch context for repro."""

    def __init__(self, message: str, step: int | None = None, batch_indices=None):
        super().__init__(message)
        self.step = step
        self.batch_indices = list(batch_indices) if batch_indices is not None else None
