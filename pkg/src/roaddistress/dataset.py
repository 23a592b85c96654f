"""Reading and writing annotation, detection, metadata and submission files.

File formats
------------
Ground truth
    Either per-image XML in the usual object-annotation layout
    (``<annotation><filename/><size><width/><height/></size><object><name/>
    <bndbox><xmin/>...</bndbox></object>...``) or one flat CSV with columns
    ``image_id,width,height,class,x_min,y_min,x_max,y_max`` and an optional
    ``country`` column. A CSV row with an empty ``class`` declares an image
    without annotations.
Detections
    JSON Lines, one detection per line, keys in the fixed order
    ``image_id, model_id, view_id, class, confidence, bbox`` with ``bbox``
    as ``[x_min, y_min, x_max, y_max]`` in view-space pixels.
Fused predictions
    JSON Lines, one image per line: ``{"image_id": ..., "predictions": [...]}``.
Image metadata
    CSV ``image_id,width,height`` plus optional ``country,lat,lon``.
Submission
    ``image_filename,`` followed by space-separated groups
    ``class_index x_min y_min x_max y_max`` with integer pixels and class
    indices D00=1, D10=2, D20=3, D40=4.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import random
import xml.etree.ElementTree as ET
from collections import Counter
from collections.abc import Iterable, Iterator, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfidenceOutOfRange, InvalidBox, MissingCountry, ParseError, UnknownClass, UnknownView
from .fusion import FusedPrediction, rank_key
from .model import BoundingBox, Country, Detection, DistressClass, GeoPoint, ImageMeta, clamp_to_image
from .tta import ViewManifest

log = logging.getLogger(__name__)

DETECTION_FIELDS = ("image_id", "model_id", "view_id", "class", "confidence", "bbox")
GT_CSV_FIELDS = ("image_id", "width", "height", "class", "x_min", "y_min", "x_max", "y_max")


@dataclass(frozen=True)
class Annotation:
    label: DistressClass
    bbox: BoundingBox


@dataclass(frozen=True)
class GroundTruthRecord:
    meta: ImageMeta
    annotations: tuple[Annotation, ...] = ()

    @property
    def image_id(self) -> str:
        return self.meta.image_id


@dataclass
class GroundTruthSet:
    """Loaded ground truth plus the annotations dropped for out-of-scope classes."""

    records: list[GroundTruthRecord] = field(default_factory=list)
    skipped: Counter = field(default_factory=Counter)

    def __iter__(self) -> Iterator[GroundTruthRecord]:
        return iter(self.records)

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, i: int) -> GroundTruthRecord:
        return self.records[i]

    @property
    def skipped_total(self) -> int:
        return sum(self.skipped.values())

    def metas(self) -> dict[str, ImageMeta]:
        return {r.image_id: r.meta for r in self.records}


# ---------------------------------------------------------------------------
# ground truth


def _country_for(image_id: str, path: Path | None = None, explicit: str | None = None) -> Country | None:
    if explicit:
        return Country.parse(explicit)
    c = Country.from_image_id(image_id)
    if c is None and path is not None:
        for part in reversed(path.parts):
            try:
                return Country.parse(part)
            except ValueError:
                continue
    return c


def _make_annotation(code: str, coords: Sequence[str], meta: ImageMeta, strict: bool, skipped: Counter,
                     path: Path, where: str) -> Annotation | None:
    try:
        label = DistressClass.parse(code)
    except UnknownClass:
        if strict:
            raise UnknownClass(f"{path}:{where}: unknown distress class {code.strip()!r} in {meta.image_id}") from None
        skipped[code.strip()] += 1
        return None
    try:
        x0, y0, x1, y1 = (float(c) for c in coords)
    except (TypeError, ValueError):
        raise ParseError(f"non-numeric box coordinates {list(coords)} in image {meta.image_id}", str(path), where) from None
    if not (x0 < x1 and y0 < y1) or not all(map(math.isfinite, (x0, y0, x1, y1))):
        raise ParseError(f"invalid box {(x0, y0, x1, y1)} in image {meta.image_id}", str(path), where)
    try:
        return Annotation(label, clamp_to_image((x0, y0, x1, y1), meta))
    except InvalidBox as exc:
        raise ParseError(f"box outside image {meta.image_id}: {exc}", str(path), where) from None


def _xml_text(node: ET.Element, tag: str, path: Path, where: str) -> str:
    child = node.find(tag)
    if child is None or child.text is None:
        raise ParseError(f"missing <{tag}>", str(path), where)
    return child.text.strip()


def parse_xml_annotation(path: str | Path, strict: bool = True, skipped: Counter | None = None) -> GroundTruthRecord:
    path = Path(path)
    skipped = Counter() if skipped is None else skipped
    try:
        root = ET.parse(path).getroot()
    except (ET.ParseError, OSError) as exc:
        raise ParseError(str(exc), str(path)) from None
    filename = root.findtext("filename")
    image_id = filename.strip() if filename and filename.strip() else path.stem + ".jpg"
    size = root.find("size")
    if size is None:
        raise ParseError(f"missing <size> for image {image_id}", str(path), "annotation")
    try:
        width = int(float(_xml_text(size, "width", path, "size")))
        height = int(float(_xml_text(size, "height", path, "size")))
        meta = ImageMeta(image_id, width, height, _country_for(image_id, path))
    except ValueError as exc:
        raise ParseError(f"bad image size for {image_id}: {exc}", str(path), "size") from None

    annotations = []
    for k, obj in enumerate(root.iter("object")):
        where = f"object[{k}]"
        name = _xml_text(obj, "name", path, where)
        box = obj.find("bndbox")
        if box is None:
            raise ParseError(f"missing <bndbox> in image {image_id}", str(path), where)
        coords = [_xml_text(box, t, path, where) for t in ("xmin", "ymin", "xmax", "ymax")]
        ann = _make_annotation(name, coords, meta, strict, skipped, path, where)
        if ann is not None:
            annotations.append(ann)
    return GroundTruthRecord(meta, tuple(annotations))


def _load_gt_csv(path: Path, strict: bool, skipped: Counter) -> list[GroundTruthRecord]:
    metas: dict[str, ImageMeta] = {}
    anns: dict[str, list[Annotation]] = {}
    try:
        fh = path.open(newline="", encoding="utf-8")
    except OSError as exc:
        raise ParseError(str(exc), str(path)) from None
    with fh:
        reader = csv.DictReader(fh)
        missing = set(GT_CSV_FIELDS) - set(reader.fieldnames or ())
        if missing:
            raise ParseError(f"missing columns {sorted(missing)}", str(path), "header")
        for row in reader:
            where = f"line {reader.line_num}"
            image_id = (row["image_id"] or "").strip()
            if not image_id:
                raise ParseError("empty image_id", str(path), where)
            try:
                meta = ImageMeta(image_id, int(row["width"]), int(row["height"]),
                                 _country_for(image_id, None, row.get("country")))
            except (TypeError, ValueError) as exc:
                raise ParseError(f"bad image size or country for {image_id}: {exc}", str(path), where) from None
            prev = metas.setdefault(image_id, meta)
            if (prev.width, prev.height) != (meta.width, meta.height):
                raise ParseError(f"inconsistent size for image {image_id}", str(path), where)
            bucket = anns.setdefault(image_id, [])
            code = (row["class"] or "").strip()
            if not code:
                continue
            coords = [row[k] for k in ("x_min", "y_min", "x_max", "y_max")]
            ann = _make_annotation(code, coords, meta, strict, skipped, path, where)
            if ann is not None:
                bucket.append(ann)
    return [GroundTruthRecord(metas[i], tuple(anns[i])) for i in metas]


def load_ground_truth(path: str | Path, strict: bool = True) -> GroundTruthSet:
    """Load annotations from an XML file, a CSV file, or a directory of either.

    Directories are searched recursively; files are read in sorted path
    order. With ``strict=False`` annotations of classes other than the four
    distress classes are dropped and counted in ``skipped``.
    """
    path = Path(path)
    if not path.exists():
        raise ParseError("no such file or directory", str(path))
    if path.is_dir():
        files = sorted(p for p in path.rglob("*") if p.suffix.lower() in (".xml", ".csv") and p.is_file())
    else:
        files = [path]
    out = GroundTruthSet()
    seen: set[str] = set()
    for f in files:
        if f.suffix.lower() == ".csv":
            recs = _load_gt_csv(f, strict, out.skipped)
        else:
            recs = [parse_xml_annotation(f, strict, out.skipped)]
        for r in recs:
            if r.image_id in seen:
                raise ParseError(f"duplicate annotations for image {r.image_id}", str(f))
            seen.add(r.image_id)
            out.records.append(r)
    if out.skipped:
        log.info("skipped %d annotations of out-of-scope classes: %s", out.skipped_total, dict(out.skipped))
    return out


def write_ground_truth_csv(records: Iterable[GroundTruthRecord], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*GT_CSV_FIELDS, "country"])
        for r in records:
            m = r.meta
            country = m.country.value if m.country else ""
            if not r.annotations:
                w.writerow([m.image_id, m.width, m.height, "", "", "", "", "", country])
            for a in r.annotations:
                w.writerow([m.image_id, m.width, m.height, a.label.value, *map(repr, a.bbox.as_tuple()), country])


def write_xml_annotation(record: GroundTruthRecord, path: str | Path) -> None:
    root = ET.Element("annotation")
    ET.SubElement(root, "filename").text = record.image_id
    size = ET.SubElement(root, "size")
    ET.SubElement(size, "width").text = str(record.meta.width)
    ET.SubElement(size, "height").text = str(record.meta.height)
    ET.SubElement(size, "depth").text = "3"
    for a in record.annotations:
        obj = ET.SubElement(root, "object")
        ET.SubElement(obj, "name").text = a.label.value
        box = ET.SubElement(obj, "bndbox")
        for tag, v in zip(("xmin", "ymin", "xmax", "ymax"), a.bbox.as_tuple()):
            ET.SubElement(box, tag).text = repr(v)
    ET.indent(root)
    ET.ElementTree(root).write(path, encoding="utf-8", xml_declaration=False)


# ---------------------------------------------------------------------------
# detections


def detection_to_json(d: Detection) -> str:
    rec = {
        "image_id": d.image_id,
        "model_id": d.model_id,
        "view_id": d.view_id,
        "class": d.label.value,
        "confidence": d.confidence,
        "bbox": list(d.bbox.as_tuple()),
    }
    return json.dumps(rec, ensure_ascii=False, separators=(", ", ": "))


def write_detections(dets: Iterable[Detection], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for d in dets:
            fh.write(detection_to_json(d))
            fh.write("\n")


def _parse_detection(obj: object, manifest: ViewManifest | None, path: Path, where: str) -> Detection:
    if not isinstance(obj, dict):
        raise ParseError("record is not a JSON object", str(path), where)
    missing = [k for k in DETECTION_FIELDS if k not in obj]
    if missing:
        raise ParseError(f"missing fields {missing}", str(path), where)
    view_id = obj["view_id"]
    if manifest is not None and view_id not in manifest:
        raise UnknownView(f"{path}:{where}: view {view_id!r} not declared in manifest")
    try:
        label = DistressClass.parse(str(obj["class"]))
    except UnknownClass as exc:
        raise ParseError(str(exc), str(path), where) from None
    conf = obj["confidence"]
    if isinstance(conf, bool) or not isinstance(conf, (int, float)):
        raise ParseError(f"confidence must be a number, got {conf!r}", str(path), where)
    if not (0.0 <= conf <= 1.0):
        raise ConfidenceOutOfRange(f"{path}:{where}: confidence {conf} outside [0, 1]")
    bbox = obj["bbox"]
    if not (isinstance(bbox, list) and len(bbox) == 4) or any(
            isinstance(c, bool) or not isinstance(c, (int, float)) for c in bbox):
        raise ParseError(f"bbox must be four numbers, got {bbox!r}", str(path), where)
    try:
        box = BoundingBox(*(float(c) for c in bbox))
    except InvalidBox as exc:
        raise ParseError(str(exc), str(path), where) from None
    return Detection(str(obj["image_id"]), label, float(conf), box, str(obj["model_id"]), str(view_id))


def iter_detections(path: str | Path, manifest: ViewManifest | None = None) -> Iterator[Detection]:
    path = Path(path)
    try:
        fh = path.open(encoding="utf-8")
    except OSError as exc:
        raise ParseError(str(exc), str(path)) from None
    with fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            where = f"line {lineno}"
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON: {exc.msg}", str(path), where) from None
            yield _parse_detection(obj, manifest, path, where)


def load_detections(path: str | Path, manifest: ViewManifest | None = None) -> dict[str, list[Detection]]:
    """Read a detection interchange file, grouped by image_id (sorted)."""
    groups: dict[str, list[Detection]] = {}
    for d in iter_detections(path, manifest):
        groups.setdefault(d.image_id, []).append(d)
    return dict(sorted(groups.items()))


# ---------------------------------------------------------------------------
# fused predictions


def write_predictions(predictions: Mapping[str, Sequence[FusedPrediction]], path: str | Path) -> None:
    """One JSON line per image in image_id order; byte-stable for equal inputs."""
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for image_id in sorted(predictions):
            preds = [
                {"class": p.label.value, "confidence": p.confidence, "bbox": list(p.bbox.as_tuple()),
                 "contributors": p.contributor_count}
                for p in predictions[image_id]
            ]
            fh.write(json.dumps({"image_id": image_id, "predictions": preds}, separators=(", ", ": ")))
            fh.write("\n")


def load_predictions(path: str | Path) -> dict[str, list[FusedPrediction]]:
    path = Path(path)
    out: dict[str, list[FusedPrediction]] = {}
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ParseError(str(exc), str(path)) from None
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        where = f"line {lineno}"
        try:
            obj = json.loads(line)
            image_id = obj["image_id"]
            out[image_id] = [
                FusedPrediction(image_id, DistressClass.parse(p["class"]), float(p["confidence"]),
                                BoundingBox(*map(float, p["bbox"])), int(p.get("contributors", 1)))
                for p in obj["predictions"]
            ]
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"bad prediction record: {exc}", str(path), where) from None
    return dict(sorted(out.items()))


# ---------------------------------------------------------------------------
# image metadata


def load_image_meta(path: str | Path) -> dict[str, ImageMeta]:
    path = Path(path)
    out: dict[str, ImageMeta] = {}
    try:
        fh = path.open(newline="", encoding="utf-8")
    except OSError as exc:
        raise ParseError(str(exc), str(path)) from None
    with fh:
        reader = csv.DictReader(fh)
        missing = {"image_id", "width", "height"} - set(reader.fieldnames or ())
        if missing:
            raise ParseError(f"missing columns {sorted(missing)}", str(path), "header")
        for row in reader:
            where = f"line {reader.line_num}"
            try:
                image_id = row["image_id"].strip()
                gps = None
                if (row.get("lat") or "").strip() and (row.get("lon") or "").strip():
                    gps = GeoPoint(float(row["lat"]), float(row["lon"]))
                out[image_id] = ImageMeta(image_id, int(row["width"]), int(row["height"]),
                                          _country_for(image_id, None, row.get("country")), gps)
            except (TypeError, ValueError) as exc:
                raise ParseError(str(exc), str(path), where) from None
    return out


def write_image_meta(metas: Iterable[ImageMeta], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image_id", "width", "height", "country", "lat", "lon"])
        for m in sorted(metas, key=lambda m: m.image_id):
            lat, lon = (repr(m.gps.latitude), repr(m.gps.longitude)) if m.gps else ("", "")
            w.writerow([m.image_id, m.width, m.height, m.country.value if m.country else "", lat, lon])


# ---------------------------------------------------------------------------
# split and statistics


def split_train_val(records: Sequence, val_fraction: float, seed: int = 0) -> tuple[list, list]:
    """Seeded shuffle, then hold out ``floor(val_fraction * N)`` records."""
    if not (0.0 < val_fraction < 1.0):
        raise ValueError(f"val_fraction must lie in (0, 1), got {val_fraction}")
    items = list(records)
    random.Random(seed).shuffle(items)
    n_val = math.floor(val_fraction * len(items))
    return items[n_val:], items[:n_val]


@dataclass
class DatasetStats:
    images: dict[Country, int]
    annotations: dict[DistressClass, dict[Country, int]]

    @property
    def total_images(self) -> int:
        return sum(self.images.values())

    def class_total(self, label: DistressClass) -> int:
        return sum(self.annotations[label].values())

    def country_annotations(self, country: Country) -> int:
        return sum(row[country] for row in self.annotations.values())

    @property
    def total_annotations(self) -> int:
        return sum(self.class_total(c) for c in DistressClass)

    def rows(self) -> list[list]:
        """Table rows: one per country plus a total row."""
        out = []
        for c in Country:
            out.append([c.value, self.images[c], *(self.annotations[k][c] for k in DistressClass),
                        self.country_annotations(c)])
        out.append(["Total", self.total_images, *(self.class_total(k) for k in DistressClass), self.total_annotations])
        return out

    def write_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["country", "images", *(k.value for k in DistressClass), "annotations"])
            w.writerows(self.rows())


def compute_stats(records: Iterable[GroundTruthRecord]) -> DatasetStats:
    images = {c: 0 for c in Country}
    annotations = {k: {c: 0 for c in Country} for k in DistressClass}
    for r in records:
        country = r.meta.country
        if country is None:
            raise MissingCountry(f"image {r.image_id} has no country tag")
        images[country] += 1
        for a in r.annotations:
            annotations[a.label][country] += 1
    return DatasetStats(images, annotations)


# ---------------------------------------------------------------------------
# submission


def submission_line(image_id: str, preds: Sequence[FusedPrediction], max_per_image: int | None = None) -> str:
    ordered = sorted(preds, key=lambda p: (-p.confidence, *p.bbox.as_tuple(), p.label.value))
    if max_per_image is not None:
        ordered = ordered[:max_per_image]
    groups = []
    for p in ordered:
        groups.append(" ".join(str(v) for v in (p.label.index, *p.bbox.rounded())))
    return f"{image_id}," + " ".join(groups)


def export_submission(predictions: Mapping[str, Sequence[FusedPrediction]], path: str | Path,
                      max_per_image: int | None = None) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for image_id in sorted(predictions):
            fh.write(submission_line(image_id, predictions[image_id], max_per_image))
            fh.write("\n")


def read_submission(path: str | Path) -> dict[str, list[tuple[DistressClass, tuple[int, int, int, int]]]]:
    path = Path(path)
    out = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        image_id, sep, rest = line.partition(",")
        if not sep:
            raise ParseError("expected 'filename,boxes'", str(path), f"line {lineno}")
        fields = rest.split()
        if len(fields) % 5:
            raise ParseError("box groups must have 5 fields", str(path), f"line {lineno}")
        try:
            out[image_id] = [
                (DistressClass.from_index(int(fields[k])), tuple(int(v) for v in fields[k + 1:k + 5]))
                for k in range(0, len(fields), 5)
            ]
        except (ValueError, UnknownClass) as exc:
            raise ParseError(str(exc), str(path), f"line {lineno}") from None
    return out


__all__ = [
    "Annotation", "GroundTruthRecord", "GroundTruthSet", "DatasetStats",
    "load_ground_truth", "parse_xml_annotation", "write_ground_truth_csv", "write_xml_annotation",
    "load_detections", "iter_detections", "write_detections", "detection_to_json",
    "load_predictions", "write_predictions", "load_image_meta", "write_image_meta",
    "split_train_val", "compute_stats", "export_submission", "read_submission", "submission_line",
]
