"""Exception types shared across the package.

Everything raised on bad input derives from :class:`OccSceneError`, which the
CLI maps to exit code 2.
"""

from __future__ import annotations


class OccSceneError(ValueError):
    """Base class for data and validation errors."""


class FormatError(OccSceneError):
    """A binary or text file does not follow its declared layout."""


class BadMagic(FormatError):
    pass


class VersionUnsupported(FormatError):
    pass


class TruncatedPayload(FormatError):
    pass


class LabelOutOfRange(OccSceneError):
    pass


class IndexOutOfBounds(OccSceneError, IndexError):
    pass


class DimMismatch(OccSceneError):
    pass


class ShapeMismatch(OccSceneError):
    pass


class LengthMismatch(OccSceneError):
    pass


class ResolutionMismatch(OccSceneError):
    pass


class RegionOutOfBounds(OccSceneError):
    pass


class CodeOutOfPalette(OccSceneError):
    pass


class NoOverlap(OccSceneError):
    """The ray does not intersect the grid's bounding box within range."""


class EmptySupport(OccSceneError):
    """The sampling density is zero everywhere."""


class BadRange(OccSceneError):
    pass


class StepRange(OccSceneError):
    pass


class AllMasked(OccSceneError):
    pass


class NotNormalized(OccSceneError):
    pass


class BinMismatch(OccSceneError):
    pass
