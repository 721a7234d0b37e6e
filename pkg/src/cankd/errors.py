"""Exception types shared across the package."""


class ShapeMismatch(ValueError):
    pass


class InvalidScale(ValueError):
    pass


class NotScalar(ValueError):
    pass


class GaussianChannelMismatch(ShapeMismatch):
    pass


class SpatialMismatch(ShapeMismatch):
    """Student and teacher maps disagree in H x W.

    Raised instead of interpolating, because attention-style distillation degrades
    silently when the spatial grids do not correspond.
    """


class ConfigInvalid(ValueError):
    pass


class CheckpointMissing(FileNotFoundError):
    pass


class CheckpointIOError(OSError):
    pass


class FormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class VersionMismatch(ValueError):
    pass


class NumericalError(RuntimeError):
    """Loss became NaN or infinite during training."""
