"""Exception and warning types raised across the package."""


class HsiError(ValueError):
    """Base class for all input/contract violations."""


class ConstantCube(HsiError):
    pass


class BadCenter(HsiError):
    pass


class InfeasibleSpec(HsiError):
    pass


class HeaderMismatch(HsiError):
    pass


class TruncatedPayload(HsiError):
    pass


class ImageTooSmall(HsiError):
    pass


class DimensionMismatch(HsiError):
    pass


class ZeroVector(HsiError):
    pass


class EmptyHistory(HsiError):
    pass


class EmptyBatch(HsiError):
    pass


class ShapeMismatch(HsiError):
    pass


class InsufficientClass(HsiError):
    pass


class EmptyTestSet(HsiError):
    pass


class ConfigError(HsiError):
    pass


class EmptyClass(UserWarning):
    """A pseudo-label class had no pixels to sample from."""


class PatchClamped(UserWarning):
    """Requested patch side exceeded the image and was reduced."""
