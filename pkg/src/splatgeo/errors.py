"""Exception types raised by the splatgeo package."""


class SplatgeoError(Exception):
    """Base class for all package-specific errors."""


class ZeroBaseline(SplatgeoError):
    """Epipolar geometry is undefined because the camera baseline is zero."""


class NonPositiveDepth(SplatgeoError):
    """A depth value required to be positive was zero or negative."""


class ShapeMismatch(SplatgeoError):
    """Array arguments disagree on element count or trailing dimensions."""


class StateMismatch(SplatgeoError):
    """A cached forward state does not correspond to the inputs supplied."""


class EmptyRender(SplatgeoError):
    """A generated scene renders to (almost) nothing in one of the views."""


class ManifestMissing(SplatgeoError):
    """The scene directory lacks a readable manifest file."""


class CorruptImage(SplatgeoError):
    """An image referenced by a scene manifest failed to decode."""


class DimensionMismatch(SplatgeoError):
    """Loaded images disagree with the manifest on their pixel dimensions."""


class LengthMismatch(SplatgeoError):
    """Two trajectories being compared have different lengths."""


class IoFailure(SplatgeoError):
    """A file could not be written or read back."""


class BadInit(SplatgeoError):
    """Scene parameter initialization received invalid values."""


class NonFiniteGradient(SplatgeoError):
    """A gradient passed to the optimizer contained NaN or infinity."""


class Diverged(SplatgeoError):
    """Scene optimization diverged instead of reducing the loss."""
