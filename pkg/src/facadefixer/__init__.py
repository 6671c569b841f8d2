"""Expert-ensemble facade defect inspection with a synthetic data loop."""

from .geometry import BinaryMask, BoundingBox, DefectCategory, Detection, ImageRef, RasterImage

__version__ = "0.1.0"

__all__ = [
    "BinaryMask",
    "BoundingBox",
    "DefectCategory",
    "Detection",
    "ImageRef",
    "RasterImage",
    "__version__",
]
