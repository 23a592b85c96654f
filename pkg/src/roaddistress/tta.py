"""Test-time augmentation views and their coordinate maps.

Five views are used at inference: the base image, a horizontal flip, and
rescales by 1.30, 0.83 and 0.67. The external detector runs on each view;
this module maps its boxes back into base-image pixels.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Iterator

from .errors import ParseError, UnknownView
from .model import BoundingBox, Detection, ImageMeta, clamp_to_image


@dataclass(frozen=True, slots=True)
class AugmentedView:
    view_id: str
    scale: float = 1.0
    flipped: bool = False

    def __post_init__(self) -> None:
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise ValueError(f"view {self.view_id}: scale must be positive, got {self.scale}")

    def size(self, meta: ImageMeta) -> tuple[int, int]:
        """Pixel size of this view of ``meta``'s image (half-up rounding)."""
        return _round_half_up(self.scale * meta.width), _round_half_up(self.scale * meta.height)


IDENTITY = AugmentedView("identity")
HFLIP = AugmentedView("hflip", flipped=True)
SCALE_130 = AugmentedView("scale_130", scale=1.30)
SCALE_083 = AugmentedView("scale_083", scale=0.83)
SCALE_067 = AugmentedView("scale_067", scale=0.67)

CANONICAL_VIEWS: dict[str, AugmentedView] = {
    v.view_id: v for v in (IDENTITY, HFLIP, SCALE_130, SCALE_083, SCALE_067)
}


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


class ViewManifest:
    """The ordered set of views declared for a run."""

    def __init__(self, views: Iterable[AugmentedView]):
        self.views: tuple[AugmentedView, ...] = tuple(views)
        ids = [v.view_id for v in self.views]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate view ids in manifest: {ids}")
        if ids.count("identity") != 1:
            raise ValueError("manifest must contain the identity view exactly once")
        for v in self.views:
            canonical = CANONICAL_VIEWS.get(v.view_id)
            if canonical is None:
                raise ValueError(f"non-canonical view id {v.view_id!r}; expected one of {sorted(CANONICAL_VIEWS)}")
            if v != canonical:
                raise ValueError(f"view {v.view_id!r} declared as scale={v.scale} flipped={v.flipped}, "
                                 f"expected scale={canonical.scale} flipped={canonical.flipped}")
        self._by_id = {v.view_id: v for v in self.views}

    @classmethod
    def full(cls) -> ViewManifest:
        return cls(CANONICAL_VIEWS.values())

    @classmethod
    def identity_only(cls) -> ViewManifest:
        return cls([IDENTITY])

    def __getitem__(self, view_id: str) -> AugmentedView:
        try:
            return self._by_id[view_id]
        except KeyError:
            raise UnknownView(f"view {view_id!r} is not declared in the manifest {list(self._by_id)}") from None

    def __contains__(self, view_id: object) -> bool:
        return view_id in self._by_id

    def __iter__(self) -> Iterator[AugmentedView]:
        return iter(self.views)

    def __len__(self) -> int:
        return len(self.views)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, ViewManifest) and self.views == other.views

    def __repr__(self) -> str:
        return f"ViewManifest({[v.view_id for v in self.views]})"

    def view_sizes(self, meta: ImageMeta) -> dict[str, tuple[int, int]]:
        return {v.view_id: v.size(meta) for v in self.views}


def forward_box(b: BoundingBox, view: AugmentedView, meta: ImageMeta) -> BoundingBox:
    """Map a base-image box into ``view``'s pixel space (flip, then scale)."""
    x0, y0, x1, y1 = b.as_tuple()
    if view.flipped:
        x0, x1 = meta.width - x1, meta.width - x0
    s = view.scale
    if s != 1.0:
        x0, y0, x1, y1 = x0 * s, y0 * s, x1 * s, y1 * s
    return BoundingBox(x0, y0, x1, y1)


def inverse_coords(coords: tuple[float, float, float, float], view: AugmentedView,
                   meta: ImageMeta) -> tuple[float, float, float, float]:
    """Undo ``forward_box`` on raw view-space coordinates, without clamping."""
    x0, y0, x1, y1 = coords
    s = view.scale
    if s != 1.0:
        # divide by the declared factor, not the ratio of rounded view sizes
        x0, y0, x1, y1 = x0 / s, y0 / s, x1 / s, y1 / s
    if view.flipped:
        x0, x1 = meta.width - x1, meta.width - x0
    return x0, y0, x1, y1


def deaugment(d: Detection, view: AugmentedView, meta: ImageMeta) -> Detection:
    base = clamp_to_image(inverse_coords(d.bbox.as_tuple(), view, meta), meta)
    if base is d.bbox:
        return d
    return replace(d, bbox=base)


def load_manifest(path: str | Path) -> ViewManifest:
    """Read a view manifest CSV with columns ``view_id,scale,flipped``."""
    path = Path(path)
    views = []
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            missing = {"view_id", "scale", "flipped"} - set(reader.fieldnames or ())
            if missing:
                raise ParseError(f"missing columns {sorted(missing)}", str(path), "header")
            for row in reader:
                where = f"line {reader.line_num}"
                try:
                    flipped = _parse_bool(row["flipped"])
                    views.append(AugmentedView(row["view_id"].strip(), float(row["scale"]), flipped))
                except (TypeError, ValueError) as exc:
                    raise ParseError(str(exc), str(path), where) from None
        return ViewManifest(views)
    except ParseError:
        raise
    except ValueError as exc:
        raise ParseError(str(exc), str(path)) from None


def save_manifest(manifest: ViewManifest, path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["view_id", "scale", "flipped"])
        for v in manifest:
            w.writerow([v.view_id, f"{v.scale:.2f}", "true" if v.flipped else "false"])


def _parse_bool(text: str | None) -> bool:
    key = (text or "").strip().lower()
    if key in ("1", "true", "yes"):
        return True
    if key in ("0", "false", "no"):
        return False
    raise ValueError(f"expected a boolean flag, got {text!r}")
