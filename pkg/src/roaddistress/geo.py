"""GPS extraction, road-segment damage scoring and map exports."""

from __future__ import annotations

import csv
import html
import io
import json
import logging
import math
from collections.abc import Iterable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from PIL import Image, UnidentifiedImageError

from .errors import MalformedExif, ParseError
from .fusion import FusedPrediction
from .model import DistressClass, GeoPoint

log = logging.getLogger(__name__)

GPS_IFD = 0x8825
GPS_LAT_REF, GPS_LAT, GPS_LON_REF, GPS_LON = 1, 2, 3, 4

DEFAULT_CELL_SIZE = 0.00025  # degrees, roughly 25 m of latitude
DEFAULT_COLOR_THRESHOLDS = (0.25, 0.75)
IMAGE_SUFFIXES = (".jpg", ".jpeg")

TABLE_FIELDS = ("segment_id", "lat", "lon", "n_images", "d00", "d10", "d20", "d40", "severity_sum", "damage_score")


def dms_to_degrees(values: Sequence, ref: str) -> float:
    """Degrees/minutes/seconds rationals plus hemisphere ref to signed decimal degrees."""
    parts = [float(v) for v in values]
    if not 1 <= len(parts) <= 3 or not all(math.isfinite(p) and p >= 0 for p in parts):
        raise MalformedExif(f"bad GPS coordinate {tuple(values)!r}")
    parts += [0.0] * (3 - len(parts))
    deg = parts[0] + parts[1] / 60.0 + parts[2] / 3600.0
    ref = ref.strip().upper()
    if ref in ("S", "W"):
        return -deg
    if ref in ("N", "E"):
        return deg
    raise MalformedExif(f"bad GPS hemisphere reference {ref!r}")


def _ref_text(value) -> str:
    if isinstance(value, bytes):
        value = value.decode("ascii", errors="replace")
    if not isinstance(value, str):
        raise MalformedExif(f"bad GPS reference {value!r}")
    return value.strip("\x00 ")


def extract_gps(data: bytes | str | Path) -> GeoPoint | None:
    """Read the GPS position embedded in a JPEG's EXIF block.

    Returns None when the file carries no GPS latitude/longitude. Raises
    :class:`MalformedExif` when the tags exist but cannot be interpreted.
    """
    src = io.BytesIO(data) if isinstance(data, (bytes, bytearray)) else data
    try:
        with Image.open(src) as im:
            gps = im.getexif().get_ifd(GPS_IFD)
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise MalformedExif(f"unreadable image or EXIF block: {exc}") from None
    if GPS_LAT not in gps or GPS_LON not in gps:
        return None
    if GPS_LAT_REF not in gps or GPS_LON_REF not in gps:
        raise MalformedExif("GPS coordinates present without hemisphere references")
    try:
        lat = dms_to_degrees(gps[GPS_LAT], _ref_text(gps[GPS_LAT_REF]))
        lon = dms_to_degrees(gps[GPS_LON], _ref_text(gps[GPS_LON_REF]))
        if _ref_text(gps[GPS_LAT_REF]).upper() not in ("N", "S") or _ref_text(gps[GPS_LON_REF]).upper() not in ("E", "W"):
            raise MalformedExif("hemisphere references swapped between latitude and longitude")
        return GeoPoint(lat, lon)
    except (TypeError, ValueError, ZeroDivisionError) as exc:
        if isinstance(exc, MalformedExif):
            raise
        raise MalformedExif(f"unparseable GPS tags: {exc}") from None


def scan_images(directory: str | Path, jobs: int = 1) -> dict[str, GeoPoint | None]:
    """GPS position (or None) for every JPEG in ``directory``, keyed by file name."""
    directory = Path(directory)
    if not directory.is_dir():
        raise ParseError("not a directory", str(directory))
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES and p.is_file())

    def one(p: Path) -> GeoPoint | None:
        try:
            return extract_gps(p)
        except MalformedExif as exc:
            log.warning("%s: %s; treating as unmapped", p, exc)
            return None

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            points = list(pool.map(one, files))
    else:
        points = [one(p) for p in files]
    return {p.name: g for p, g in zip(files, points)}


@dataclass(frozen=True)
class RoadSegmentScore:
    segment_id: str
    centroid: GeoPoint
    image_ids: tuple[str, ...]
    distress_counts: dict[DistressClass, int]
    severity_sum: float
    damage_score: float

    @property
    def n_images(self) -> int:
        return len(self.image_ids)

    @property
    def n_detections(self) -> int:
        return sum(self.distress_counts.values())

    def row(self) -> dict:
        return {
            "segment_id": self.segment_id,
            "lat": round(self.centroid.latitude, 6),
            "lon": round(self.centroid.longitude, 6),
            "n_images": self.n_images,
            **{k.value.lower(): self.distress_counts[k] for k in DistressClass},
            "severity_sum": self.severity_sum,
            "damage_score": self.damage_score,
        }


@dataclass
class Binning:
    segments: list[RoadSegmentScore] = field(default_factory=list)
    unmapped: list[str] = field(default_factory=list)

    @property
    def mapped_detections(self) -> int:
        return sum(s.n_detections for s in self.segments)


def cell_index(point: GeoPoint, cell_size_deg: float) -> tuple[int, int]:
    return math.floor(point.latitude / cell_size_deg), math.floor(point.longitude / cell_size_deg)


def bin_segments(images: Mapping[str, GeoPoint | None], predictions: Mapping[str, Sequence[FusedPrediction]],
                 cell_size_deg: float = DEFAULT_CELL_SIZE) -> Binning:
    """Group geotagged images into a lat/lon grid and score each occupied cell.

    Images without a position, and predictions for images not listed in
    ``images``, end up in ``unmapped``.
    """
    if not cell_size_deg > 0:
        raise ValueError(f"cell_size_deg must be positive, got {cell_size_deg}")
    cells: dict[tuple[int, int], list[str]] = {}
    unmapped = []
    for image_id in sorted(set(images) | set(predictions)):
        point = images.get(image_id)
        if point is None:
            unmapped.append(image_id)
            continue
        cells.setdefault(cell_index(point, cell_size_deg), []).append(image_id)

    segments = []
    for (row, col), members in sorted(cells.items()):
        counts = {k: 0 for k in DistressClass}
        confidences = []
        for image_id in members:
            for p in predictions.get(image_id, ()):
                counts[p.label] += 1
                confidences.append(p.confidence)
        severity = math.fsum(confidences)
        lat = round(math.fsum(images[i].latitude for i in members) / len(members), 6)
        lon = round(math.fsum(images[i].longitude for i in members) / len(members), 6)
        segments.append(RoadSegmentScore(
            segment_id=f"r{row}_c{col}",
            centroid=GeoPoint(lat, lon),
            image_ids=tuple(members),
            distress_counts=counts,
            severity_sum=severity,
            damage_score=severity / max(1, len(members)),
        ))
    return Binning(segments, unmapped)


def color_bucket(score: float, thresholds: tuple[float, float] = DEFAULT_COLOR_THRESHOLDS) -> str:
    low, high = thresholds
    if score < low:
        return "green"
    if score <= high:
        return "yellow"
    return "red"


def segments_geojson(segments: Iterable[RoadSegmentScore], thresholds: tuple[float, float] = DEFAULT_COLOR_THRESHOLDS,
                     cell_size_deg: float | None = None) -> dict:
    """Build a FeatureCollection; cells become polygons when ``cell_size_deg`` is given."""
    features = []
    for s in segments:
        props = s.row()
        props["color"] = color_bucket(s.damage_score, thresholds)
        props["image_ids"] = list(s.image_ids)
        if cell_size_deg is None:
            geometry = {"type": "Point", "coordinates": [props["lon"], props["lat"]]}
        else:
            r, c = (int(v) for v in s.segment_id[1:].split("_c"))
            y0, x0 = r * cell_size_deg, c * cell_size_deg
            y1, x1 = y0 + cell_size_deg, x0 + cell_size_deg
            ring = [[x0, y0], [x1, y0], [x1, y1], [x0, y1], [x0, y0]]
            geometry = {"type": "Polygon", "coordinates": [ring]}
        features.append({"type": "Feature", "id": s.segment_id, "geometry": geometry, "properties": props})
    return {"type": "FeatureCollection", "features": features}


def export_geojson(segments: Iterable[RoadSegmentScore], path: str | Path,
                   thresholds: tuple[float, float] = DEFAULT_COLOR_THRESHOLDS,
                   cell_size_deg: float | None = None) -> dict:
    doc = segments_geojson(segments, thresholds, cell_size_deg)
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")
    return doc


def export_table(segments: Iterable[RoadSegmentScore], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TABLE_FIELDS)
        for s in segments:
            r = s.row()
            w.writerow([r["segment_id"], f"{r['lat']:.6f}", f"{r['lon']:.6f}", r["n_images"],
                        r["d00"], r["d10"], r["d20"], r["d40"], repr(r["severity_sum"]), repr(r["damage_score"])])


def read_table(path: str | Path) -> list[dict]:
    """Parse a segment CSV back into typed row dicts (same keys as ``RoadSegmentScore.row``)."""
    out = []
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != TABLE_FIELDS:
            raise ParseError(f"unexpected header {reader.fieldnames}", str(path), "header")
        for row in reader:
            out.append({
                "segment_id": row["segment_id"],
                "lat": float(row["lat"]),
                "lon": float(row["lon"]),
                "n_images": int(row["n_images"]),
                **{k: int(row[k]) for k in ("d00", "d10", "d20", "d40")},
                "severity_sum": float(row["severity_sum"]),
                "damage_score": float(row["damage_score"]),
            })
    return out


_HTML_TEMPLATE = """<!DOCTYPE html>
<html>
<head>
<meta charset="utf-8">
<title>{title}</title>
<link rel="stylesheet" href="https://unpkg.com/leaflet@1.9.4/dist/leaflet.css">
<script src="https://unpkg.com/leaflet@1.9.4/dist/leaflet.js"></script>
<style>html, body, #map {{ height: 100%; margin: 0; }}</style>
</head>
<body>
<div id="map"></div>
<script>
const segments = {geojson};
const map = L.map("map");
L.tileLayer("https://{{s}}.tile.openstreetmap.org/{{z}}/{{x}}/{{y}}.png", {{
  maxZoom: 20, attribution: "&copy; OpenStreetMap contributors"
}}).addTo(map);
const layer = L.geoJSON(segments, {{
  pointToLayer: (f, latlng) => L.circleMarker(latlng, {{radius: 8, color: f.properties.color, fillOpacity: 0.7}}),
  style: f => ({{color: f.properties.color, fillOpacity: 0.4}}),
  onEachFeature: (f, l) => l.bindPopup(
    `<b>${{f.properties.segment_id}}</b><br>damage score ${{f.properties.damage_score.toFixed(3)}}` +
    `<br>images ${{f.properties.n_images}}<br>D00 ${{f.properties.d00}} D10 ${{f.properties.d10}}` +
    ` D20 ${{f.properties.d20}} D40 ${{f.properties.d40}}`)
}}).addTo(map);
if (segments.features.length) {{ map.fitBounds(layer.getBounds().pad(0.2)); }} else {{ map.setView([0, 0], 2); }}
</script>
</body>
</html>
"""


def export_html(geojson: dict, path: str | Path, title: str = "Road distress map") -> None:
    """Write a standalone HTML page showing the segments on a slippy map."""
    payload = json.dumps(geojson).replace("</", "<\\/")
    Path(path).write_text(_HTML_TEMPLATE.format(title=html.escape(title), geojson=payload), encoding="utf-8")
