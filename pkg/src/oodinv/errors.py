"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Input violates a documented precondition (bad value, bad range)."""


class ShapeError(ValidationError):
    """Input has the wrong shape, resolution or channel count."""


class CheckpointError(ValidationError):
    """Checkpoint archive is missing, corrupted, or incompatible."""


class DivergenceError(RuntimeError):
    """Training produced non-finite losses or out-of-range masks."""
