"""Detection scoring (precision / recall / F1) and the threshold grid search."""

from __future__ import annotations

import csv
import io
from collections.abc import Iterable, Mapping, Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .dataset import GroundTruthRecord
from .errors import RoadDistressError
from .fusion import FusedPrediction, FusionConfig, PreparedImage, prepare_image, reduce_image
from .model import Detection, DistressClass, ImageMeta, iou
from .tta import ViewManifest

DEFAULT_CONF_AXIS = (0.10, 0.15, 0.20, 0.25, 0.30)
DEFAULT_NMS_AXIS = (0.999, 0.99, 0.95, 0.90, 0.85, 0.80)


@dataclass
class Counts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def precision(self) -> float:
        d = self.tp + self.fp
        return self.tp / d if d else 0.0

    @property
    def recall(self) -> float:
        d = self.tp + self.fn
        return self.tp / d if d else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        if self.tp == 0 or p + r == 0:
            return 0.0
        return 2 * p * r / (p + r)

    def __iadd__(self, other: Counts) -> Counts:
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn
        return self


@dataclass
class EvaluationReport:
    per_class: dict[DistressClass, Counts]
    match_iou: float

    @property
    def total(self) -> Counts:
        agg = Counts()
        for c in self.per_class.values():
            agg += c
        return agg

    @property
    def f1(self) -> float:
        return self.total.f1

    @property
    def precision(self) -> float:
        return self.total.precision

    @property
    def recall(self) -> float:
        return self.total.recall

    def rows(self) -> list[list]:
        out = []
        for label, c in [*((k.value, self.per_class[k]) for k in DistressClass), ("all", self.total)]:
            out.append([label, c.tp, c.fp, c.fn, f"{c.precision:.4f}", f"{c.recall:.4f}", f"{c.f1:.4f}"])
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "tp", "fp", "fn", "precision", "recall", "f1"])
        w.writerows(self.rows())
        return buf.getvalue()

    def to_table(self) -> str:
        header = ["class", "TP", "FP", "FN", "precision", "recall", "F1"]
        lines = [f"match IoU >= {self.match_iou:g}", "  ".join(f"{h:>9}" for h in header)]
        for row in self.rows():
            lines.append("  ".join(f"{str(v):>9}" for v in row))
        return "\n".join(lines)


def _match_image(preds: Sequence[FusedPrediction], gt: Sequence, match_iou: float, per_class: dict) -> None:
    for label in DistressClass:
        p = sorted((x for x in preds if x.label == label),
                   key=lambda x: (-x.confidence, *x.bbox.as_tuple()))
        g = [a.bbox for a in gt if a.label == label]
        matched = [False] * len(g)
        tp = 0
        for pred in p:
            best, best_iou = -1, -1.0
            for j, gbox in enumerate(g):
                if matched[j]:
                    continue
                v = iou(pred.bbox, gbox)
                if v > 0 and v >= match_iou and v > best_iou:
                    best, best_iou = j, v
            if best >= 0:
                matched[best] = True
                tp += 1
        per_class[label] += Counts(tp, len(p) - tp, len(g) - tp)


def match_and_score(predictions: Mapping[str, Sequence[FusedPrediction]], ground_truth: Iterable[GroundTruthRecord],
                    match_iou: float = 0.5, max_per_image: int | None = None) -> EvaluationReport:
    """Score fused predictions against ground truth.

    Within each image and class, predictions are visited by descending
    confidence and each claims the unmatched ground-truth box with the
    highest IoU, provided the boxes overlap and IoU >= ``match_iou``.
    """
    if not 0.0 <= match_iou <= 1.0:
        raise ValueError(f"match_iou must lie in [0, 1], got {match_iou}")
    gt_by_image = {r.image_id: r.annotations for r in ground_truth}
    per_class = {k: Counts() for k in DistressClass}
    for image_id in sorted(set(gt_by_image) | set(predictions)):
        preds = list(predictions.get(image_id, ()))
        if max_per_image is not None:
            preds = sorted(preds, key=lambda x: (-x.confidence, *x.bbox.as_tuple(), x.label.value))[:max_per_image]
        _match_image(preds, gt_by_image.get(image_id, ()), match_iou, per_class)
    return EvaluationReport(per_class, match_iou)


class GridSearchError(RoadDistressError):
    pass


@dataclass
class GridSearchResult:
    conf_axis: tuple[float, ...]
    nms_axis: tuple[float, ...]
    f1: np.ndarray  # rows follow nms_axis, columns follow conf_axis
    reports: dict[tuple[float, float], EvaluationReport] = field(default_factory=dict, repr=False)

    @property
    def argmax(self) -> tuple[float, float]:
        """(conf, nms) of the best cell; ties go to the first cell in row-major order."""
        r, c = np.unravel_index(int(np.argmax(self.f1)), self.f1.shape)
        return self.conf_axis[c], self.nms_axis[r]

    @property
    def best_f1(self) -> float:
        return float(self.f1.max())

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["nms\\conf", *(format_threshold(c) for c in self.conf_axis)])
        for t, row in zip(self.nms_axis, self.f1):
            w.writerow([format_threshold(t), *(f"{v:.4f}" for v in row)])
        return buf.getvalue()

    def to_table(self) -> str:
        width = 8
        lines = [" " * 12 + "Confidence threshold",
                 f"{'NMS':>8}    " + "".join(f"{format_threshold(c):>{width}}" for c in self.conf_axis)]
        for t, row in zip(self.nms_axis, self.f1):
            lines.append(f"{format_threshold(t):>8}    " + "".join(f"{v:>{width}.4f}" for v in row))
        c, t = self.argmax
        lines.append(f"best F1 {self.best_f1:.4f} at C = {format_threshold(c)}, NMS = {format_threshold(t)}")
        return "\n".join(lines)


def format_threshold(x: float) -> str:
    """Shortest decimal with at least two places: 0.1 -> 0.10, 0.999 -> 0.999."""
    s = f"{x:.6f}".rstrip("0")
    whole, _, frac = s.partition(".")
    return f"{whole}.{frac.ljust(2, '0')}"


def _score_cell(prepared: Sequence[PreparedImage], gt: Sequence[GroundTruthRecord], cfg: FusionConfig,
                match_iou: float, max_per_image: int | None) -> EvaluationReport:
    preds = {p.image_id: reduce_image(p, cfg) for p in prepared}
    return match_and_score(preds, gt, match_iou, max_per_image)


def _score_cells(prepared, gt, cfgs, match_iou, max_per_image):
    return [_score_cell(prepared, gt, cfg, match_iou, max_per_image) for cfg in cfgs]


def grid_search(groups: Mapping[str, Sequence[Detection]], ground_truth: Iterable[GroundTruthRecord],
                views: ViewManifest, metas: Mapping[str, ImageMeta],
                conf_axis: Sequence[float] = DEFAULT_CONF_AXIS, nms_axis: Sequence[float] = DEFAULT_NMS_AXIS,
                template: FusionConfig | None = None, match_iou: float = 0.5,
                max_per_image: int | None = None, jobs: int = 1) -> GridSearchResult:
    """Evaluate F1 for every (confidence, NMS) threshold pair.

    Each cell is equivalent to ``fuse_batch`` followed by
    ``match_and_score``; de-augmentation and ranking are shared between
    cells since they do not depend on either threshold.
    """
    conf_axis, nms_axis = tuple(conf_axis), tuple(nms_axis)
    if not conf_axis or not nms_axis:
        raise ValueError("grid axes must be non-empty")
    template = template or FusionConfig()
    gt = list(ground_truth)
    cells = [(t, c) for t in nms_axis for c in conf_axis]
    cfgs = []
    for t, c in cells:
        try:
            cfgs.append(replace(template, conf_threshold=c, nms_threshold=t))
        except ValueError as exc:
            raise GridSearchError(f"cell C={c}, NMS={t}: {exc}") from None

    prepared = []
    for image_id in sorted(set(groups) | set(metas)):
        meta = metas.get(image_id)
        try:
            if meta is None:
                raise RoadDistressError(f"no image metadata for {image_id!r}")
            prepared.append(prepare_image([groups.get(image_id, ())], views, meta))
        except (RoadDistressError, ValueError) as exc:
            t, c = cells[0]
            raise GridSearchError(f"cell C={c}, NMS={t}: fusion failed for image {image_id}: {exc}") from exc

    if jobs <= 1 or len(cfgs) < 2:
        reports = _score_cells(prepared, gt, cfgs, match_iou, max_per_image)
    else:
        nchunks = min(len(cfgs), jobs)
        idx = [list(range(k, len(cfgs), nchunks)) for k in range(nchunks)]
        reports = [None] * len(cfgs)
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            parts = pool.map(_score_cells, [prepared] * nchunks, [gt] * nchunks,
                             [[cfgs[i] for i in ix] for ix in idx], [match_iou] * nchunks, [max_per_image] * nchunks)
            for ix, part in zip(idx, parts):
                for i, rep in zip(ix, part):
                    reports[i] = rep

    f1 = np.array([r.f1 for r in reports]).reshape(len(nms_axis), len(conf_axis))
    by_cell = {(c, t): r for (t, c), r in zip(cells, reports)}
    return GridSearchResult(conf_axis, nms_axis, f1, by_cell)


def write_grid_csv(result: GridSearchResult, path: str | Path) -> None:
    Path(path).write_text(result.to_csv(), encoding="utf-8")
