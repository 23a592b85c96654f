"""Post-inference tooling for road distress detection.

De-augments test-time-augmented detections, fuses model ensembles with
NMS, scores predictions with F1 over threshold grids, and maps damage
scores from geotagged images.
"""

__version__ = "0.1.0"

from .errors import (ConfidenceOutOfRange, DegenerateBox, InvalidBox, MalformedExif, MissingCountry,  # noqa: E402
                     ParseError, RoadDistressError, UnknownClass, UnknownView)
from .evaluation import grid_search, match_and_score  # noqa: E402
from .fusion import FusedPrediction, FusionConfig, fuse_batch, fuse_image, nms  # noqa: E402
from .model import BoundingBox, Country, Detection, DistressClass, GeoPoint, ImageMeta, clamp_to_image, iou  # noqa: E402
from .tta import AugmentedView, ViewManifest, deaugment, forward_box  # noqa: E402

__all__ = [
    "AugmentedView", "BoundingBox", "ConfidenceOutOfRange", "Country", "DegenerateBox", "Detection",
    "DistressClass", "FusedPrediction", "FusionConfig", "GeoPoint", "ImageMeta", "InvalidBox", "MalformedExif",
    "MissingCountry", "ParseError", "RoadDistressError", "UnknownClass", "UnknownView", "ViewManifest",
    "clamp_to_image", "deaugment", "forward_box", "fuse_batch", "fuse_image", "grid_search", "iou",
    "match_and_score", "nms",
]
