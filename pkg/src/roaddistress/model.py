"""Core domain values: distress classes, boxes, detections, image metadata.

Everything here is immutable. Coordinates are floats in base-image pixel
space; rounding to integers only happens when writing submission files.
"""

from __future__ import annotations

import enum
import math
from collections.abc import Sequence
from dataclasses import dataclass, replace

from .errors import ConfidenceOutOfRange, DegenerateBox, InvalidBox, UnknownClass


class DistressClass(str, enum.Enum):
    D00 = "D00"
    D10 = "D10"
    D20 = "D20"
    D40 = "D40"

    @property
    def index(self) -> int:
        """1-based class index used by the submission format."""
        return _CLASS_ORDER.index(self) + 1

    @property
    def description(self) -> str:
        return _CLASS_NAMES[self]

    @classmethod
    def parse(cls, code: str) -> DistressClass:
        try:
            return cls(code.strip())
        except ValueError:
            raise UnknownClass(f"unknown distress class {code!r}") from None

    @classmethod
    def from_index(cls, index: int) -> DistressClass:
        if not 1 <= index <= len(_CLASS_ORDER):
            raise UnknownClass(f"unknown class index {index}")
        return _CLASS_ORDER[index - 1]


_CLASS_ORDER = (DistressClass.D00, DistressClass.D10, DistressClass.D20, DistressClass.D40)
_CLASS_NAMES = {
    DistressClass.D00: "longitudinal crack",
    DistressClass.D10: "lateral crack",
    DistressClass.D20: "alligator crack",
    DistressClass.D40: "pothole",
}


class Country(str, enum.Enum):
    JAPAN = "Japan"
    INDIA = "India"
    CZECH = "Czech"

    @classmethod
    def parse(cls, text: str) -> Country:
        key = text.strip().lower()
        for c in cls:
            if c.value.lower() == key:
                return c
        if key in ("czech republic", "czechrepublic", "cz"):
            return cls.CZECH
        raise ValueError(f"unknown country {text!r}")

    @classmethod
    def from_image_id(cls, image_id: str) -> Country | None:
        """Infer the country from GRDC-style names such as ``India_000123.jpg``."""
        prefix = image_id.split("_", 1)[0]
        try:
            return cls.parse(prefix)
        except ValueError:
            return None


@dataclass(frozen=True, slots=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self) -> None:
        x0, y0, x1, y1 = self.x_min, self.y_min, self.x_max, self.y_max
        # chained comparisons are False for NaN; inf is caught separately
        if not (0 <= x0 < x1 and 0 <= y0 < y1) or x1 == math.inf or y1 == math.inf:
            raise InvalidBox(f"invalid box {(x0, y0, x1, y1)}: need finite 0 <= min < max on both axes")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def rounded(self) -> tuple[int, int, int, int]:
        """Integer pixel coordinates, half-up, for export."""
        return tuple(int(math.floor(c + 0.5)) for c in self.as_tuple())  # type: ignore[return-value]


@dataclass(frozen=True, slots=True)
class GeoPoint:
    latitude: float
    longitude: float

    def __post_init__(self) -> None:
        if not (-90.0 <= self.latitude <= 90.0):
            raise ValueError(f"latitude {self.latitude} outside [-90, 90]")
        if not (-180.0 <= self.longitude <= 180.0):
            raise ValueError(f"longitude {self.longitude} outside [-180, 180]")


@dataclass(frozen=True, slots=True)
class ImageMeta:
    image_id: str
    width: int
    height: int
    country: Country | None = None
    gps: GeoPoint | None = None

    def __post_init__(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"{self.image_id}: image size must be positive, got {self.width}x{self.height}")


@dataclass(frozen=True, slots=True)
class Detection:
    """One predicted box, with the model and TTA view that produced it."""

    image_id: str
    label: DistressClass
    confidence: float
    bbox: BoundingBox
    model_id: str = "model"
    view_id: str = "identity"

    def __post_init__(self) -> None:
        if not (0.0 <= self.confidence <= 1.0):
            raise ConfidenceOutOfRange(f"{self.image_id}: confidence {self.confidence} outside [0, 1]")

    def with_bbox(self, bbox: BoundingBox) -> Detection:
        return replace(self, bbox=bbox)


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union; edge-touching boxes give 0."""
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def clamp_to_image(b: BoundingBox | Sequence[float], meta: ImageMeta) -> BoundingBox:
    """Clip a box to ``[0, width] x [0, height]``.

    Accepts raw ``(x_min, y_min, x_max, y_max)`` coordinates as well, since
    boxes mapped back from flipped or upscaled views may fall partly outside
    the image (and below zero) before clipping.
    """
    coords = b.as_tuple() if isinstance(b, BoundingBox) else tuple(float(c) for c in b)
    x0, y0, x1, y1 = coords
    if not all(math.isfinite(c) for c in coords):
        raise InvalidBox(f"{meta.image_id}: non-finite coordinates {coords}")
    w, h = float(meta.width), float(meta.height)
    x_min = min(max(x0, 0.0), w)
    y_min = min(max(y0, 0.0), h)
    x_max = min(max(x1, 0.0), w)
    y_max = min(max(y1, 0.0), h)
    if x_max <= x_min or y_max <= y_min:
        raise DegenerateBox(f"{meta.image_id}: box {coords} has no area inside the {meta.width}x{meta.height} image")
    if isinstance(b, BoundingBox) and (x_min, y_min, x_max, y_max) == coords:
        return b
    return BoundingBox(x_min, y_min, x_max, y_max)
