"""Command-line interface.

Exit codes: 0 success, 2 input/format error, 3 fusion latency budget
exceeded under ``--enforce-budget``. Set ``ROADDISTRESS_LOG`` (e.g. to
``DEBUG``) to change log verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

from . import __version__
from .dataset import (compute_stats, export_submission, load_detections, load_ground_truth, load_image_meta,
                      load_predictions, split_train_val, write_predictions)
from .errors import RoadDistressError
from .evaluation import DEFAULT_CONF_AXIS, DEFAULT_NMS_AXIS, grid_search, match_and_score, write_grid_csv
from .fusion import FusionConfig, fuse_batch
from .geo import (DEFAULT_CELL_SIZE, DEFAULT_COLOR_THRESHOLDS, bin_segments, color_bucket, export_geojson,
                  export_html, export_table, scan_images)
from .tta import ViewManifest, load_manifest

log = logging.getLogger("roaddistress")

EXIT_OK, EXIT_INPUT, EXIT_BUDGET = 0, 2, 3
DEFAULT_BUDGET_MS = 10.0

# argparse attributes that are paths and get resolved to absolute form in the run config
_PATH_ARGS = {"annotations", "out", "detections", "manifest", "meta", "gt", "pred", "images", "out_geojson",
              "out_csv", "out_html", "timing_out", "submission", "out_dir"}


class InputError(RoadDistressError):
    pass


@dataclass
class RunConfig:
    command: str
    args: dict
    version: str = __version__
    outputs: list[str] = field(default_factory=list)

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def read(cls, path: str | Path) -> RunConfig:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(data["command"], data["args"], data.get("version", __version__), data.get("outputs", []))


def _resolved(ns: argparse.Namespace) -> dict:
    out = {}
    for k, v in sorted(vars(ns).items()):
        if k in ("func", "command", "verbose"):
            continue
        if k in _PATH_ARGS and v is not None:
            v = str(Path(v).resolve())
        if isinstance(v, tuple):
            v = list(v)
        out[k] = v
    return out


def _record_run(ns: argparse.Namespace, primary: str | Path, outputs: list[Path]) -> None:
    cfg = RunConfig(ns.command, _resolved(ns), outputs=[str(Path(p).resolve()) for p in outputs])
    cfg.write(Path(str(primary) + ".run.json"))


def _sibling(path: str | Path, suffix: str) -> Path:
    p = Path(path)
    return p.with_name(p.stem + suffix)


def _fusion_config(ns: argparse.Namespace) -> FusionConfig:
    return FusionConfig(ns.conf, ns.nms, ns.mode, not ns.cross_class)


def _load_metas(ns: argparse.Namespace, gt=None) -> dict:
    if getattr(ns, "meta", None):
        return load_image_meta(ns.meta)
    if gt is not None:
        return gt.metas()
    raise InputError("image metadata required: pass --meta (or --gt to take sizes from annotations)")


def _manifest(ns: argparse.Namespace) -> ViewManifest:
    if not ns.manifest:
        raise InputError("--manifest is required")
    if not Path(ns.manifest).exists():
        raise InputError(f"{ns.manifest}: manifest file not found")
    return load_manifest(ns.manifest)


# ---------------------------------------------------------------------------
# subcommands


def cmd_stats(ns: argparse.Namespace) -> int:
    gt = load_ground_truth(ns.annotations, strict=not ns.lenient)
    stats = compute_stats(gt)
    header = ["country", "images", "D00", "D10", "D20", "D40", "annotations"]
    print("  ".join(f"{h:>11}" for h in header))
    for row in stats.rows():
        print("  ".join(f"{v:>11,}" if isinstance(v, int) else f"{v:>11}" for v in row))
    if gt.skipped:
        print(f"skipped {gt.skipped_total} out-of-scope annotations: {dict(sorted(gt.skipped.items()))}")
    if ns.out:
        stats.write_csv(ns.out)
        outputs = [Path(ns.out)]
        if not ns.no_figures:
            from .plotting import plot_stats
            outputs.append(plot_stats(stats, _sibling(ns.out, ".png")))
        _record_run(ns, ns.out, outputs)
    return EXIT_OK


def cmd_split(ns: argparse.Namespace) -> int:
    gt = load_ground_truth(ns.annotations, strict=not ns.lenient)
    ids = sorted(r.image_id for r in gt)
    train, val = split_train_val(ids, ns.val_fraction, ns.seed)
    print(f"{len(train)} train / {len(val)} val (seed {ns.seed})")
    out_dir = Path(ns.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "train.txt").write_text("".join(f"{i}\n" for i in train), encoding="utf-8")
    (out_dir / "val.txt").write_text("".join(f"{i}\n" for i in val), encoding="utf-8")
    _record_run(ns, out_dir / "split", [out_dir / "train.txt", out_dir / "val.txt"])
    return EXIT_OK


def cmd_fuse(ns: argparse.Namespace) -> int:
    manifest = _manifest(ns)
    cfg = _fusion_config(ns)
    metas = _load_metas(ns)
    groups = load_detections(ns.detections, manifest)
    budget_s = ns.budget_ms / 1e3
    result = fuse_batch(groups, manifest, metas, cfg, jobs=ns.jobs, budget_s=budget_s)
    write_predictions(result.predictions, ns.out)
    outputs = [Path(ns.out)]
    if ns.submission:
        export_submission(result.predictions, ns.submission, ns.max_per_image)
        outputs.append(Path(ns.submission))

    timing = result.timing
    timing_path = Path(ns.timing_out) if ns.timing_out else _sibling(ns.out, ".timing.json")
    timing_path.write_text(json.dumps(timing.to_dict(), indent=2) + "\n", encoding="utf-8")
    if not ns.no_figures:
        from .plotting import plot_timing
        plot_timing(list(timing.to_dict()["per_image_ms"].values()), ns.budget_ms, timing_path.with_suffix(".png"))
    _record_run(ns, ns.out, outputs)

    n_preds = sum(len(v) for v in result.predictions.values())
    print(f"fused {len(result.predictions)} images -> {n_preds} predictions "
          f"(C={cfg.conf_threshold:g}, NMS={cfg.nms_threshold:g}, mode={cfg.mode})")
    print(f"fusion time per image: max {timing.max_s * 1e3:.3f} ms, median {timing.median_s * 1e3:.3f} ms, "
          f"budget {ns.budget_ms:g} ms")
    if timing.over_budget:
        print(f"{len(timing.over_budget)} images over budget: {', '.join(timing.over_budget[:10])}")
    if result.failed:
        for image_id, err in result.failed.items():
            print(f"failed {image_id}: {err}", file=sys.stderr)
        return EXIT_INPUT
    if ns.enforce_budget and timing.over_budget:
        return EXIT_BUDGET
    return EXIT_OK


def cmd_evaluate(ns: argparse.Namespace) -> int:
    gt = load_ground_truth(ns.gt, strict=not ns.lenient)
    if ns.pred:
        preds = load_predictions(ns.pred)
    elif ns.detections:
        manifest = _manifest(ns)
        result = fuse_batch(load_detections(ns.detections, manifest), manifest, _load_metas(ns, gt),
                            _fusion_config(ns), jobs=ns.jobs)
        if result.failed:
            raise InputError(f"fusion failed for {len(result.failed)} images: {next(iter(result.failed.values()))}")
        preds = result.predictions
    else:
        raise InputError("pass --pred or --detections")
    report = match_and_score(preds, gt, ns.match_iou, ns.max_per_image)
    print(report.to_table())
    print(f"F1 {report.f1:.4f}")
    if ns.out:
        Path(ns.out).write_text(report.to_csv(), encoding="utf-8")
        _record_run(ns, ns.out, [Path(ns.out)])
    return EXIT_OK


def cmd_grid(ns: argparse.Namespace) -> int:
    gt = load_ground_truth(ns.gt, strict=not ns.lenient)
    manifest = _manifest(ns)
    groups = load_detections(ns.detections, manifest)
    template = FusionConfig(mode=ns.mode, class_wise=not ns.cross_class)
    result = grid_search(groups, gt, manifest, _load_metas(ns, gt), ns.conf_axis, ns.nms_axis, template,
                         ns.match_iou, ns.max_per_image, ns.jobs)
    print(result.to_table())
    if ns.out:
        write_grid_csv(result, ns.out)
        outputs = [Path(ns.out)]
        if not ns.no_figures:
            from .plotting import plot_grid
            outputs.append(plot_grid(result, _sibling(ns.out, ".png")))
        _record_run(ns, ns.out, outputs)
    return EXIT_OK


def cmd_map(ns: argparse.Namespace) -> int:
    images = scan_images(ns.images, jobs=ns.jobs)
    preds = load_predictions(ns.pred) if ns.pred else {}
    binning = bin_segments(images, preds, ns.cell_size)
    thresholds = tuple(ns.thresholds)
    doc = export_geojson(binning.segments, ns.out_geojson, thresholds, ns.cell_size if ns.polygons else None)
    outputs = [Path(ns.out_geojson)]
    if ns.out_csv:
        export_table(binning.segments, ns.out_csv)
        outputs.append(Path(ns.out_csv))
    if ns.out_html:
        export_html(doc, ns.out_html)
        outputs.append(Path(ns.out_html))
    if not ns.no_figures:
        from .plotting import plot_segments
        rows = [s.row() for s in binning.segments]
        colors = [color_bucket(s.damage_score, thresholds) for s in binning.segments]
        outputs.append(plot_segments(rows, colors, _sibling(ns.out_csv or ns.out_geojson, ".png")))
    _record_run(ns, ns.out_geojson, outputs)
    print(f"{len(binning.segments)} segments from {len(images) - sum(1 for g in images.values() if g is None)} "
          f"geotagged images, {binning.mapped_detections} detections mapped")
    print(f"unmapped images: {len(binning.unmapped)}")
    return EXIT_OK


def cmd_replay(ns: argparse.Namespace) -> int:
    cfg = RunConfig.read(ns.run_config)
    if cfg.command not in COMMANDS or cfg.command == "replay":
        raise InputError(f"{ns.run_config}: cannot replay command {cfg.command!r}")
    replay_ns = argparse.Namespace(command=cfg.command, **cfg.args)
    return COMMANDS[cfg.command](replay_ns)


COMMANDS: dict[str, Callable[[argparse.Namespace], int]] = {
    "stats": cmd_stats,
    "split": cmd_split,
    "fuse": cmd_fuse,
    "evaluate": cmd_evaluate,
    "grid": cmd_grid,
    "map": cmd_map,
    "replay": cmd_replay,
}


# ---------------------------------------------------------------------------
# parser


def _float_list(text: str) -> tuple[float, ...]:
    try:
        values = tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("axis must not be empty")
    return values


def _add_fusion_args(p: argparse.ArgumentParser, thresholds: bool = True) -> None:
    if thresholds:
        p.add_argument("--conf", type=float, default=0.25, help="minimum confidence C (default 0.25)")
        p.add_argument("--nms", type=float, default=0.999, help="NMS IoU threshold T (default 0.999)")
    p.add_argument("--mode", choices=("nms", "average"), default="nms")
    p.add_argument("--cross-class", action="store_true", help="suppress across classes as well")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="roaddistress", description="Road distress detection post-processing.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("stats", help="per-country image and annotation counts")
    p.add_argument("annotations", help="annotation file (XML or CSV) or directory")
    p.add_argument("--out", help="write the table as CSV (and a bar chart next to it)")
    p.add_argument("--lenient", action="store_true", help="skip unknown classes instead of failing")
    p.add_argument("--no-figures", action="store_true")

    p = sub.add_parser("split", help="seeded train/validation split of annotated images")
    p.add_argument("annotations")
    p.add_argument("--val-fraction", type=float, default=0.02)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--lenient", action="store_true")

    p = sub.add_parser("fuse", help="fuse TTA x ensemble detections per image")
    p.add_argument("--detections", required=True)
    p.add_argument("--manifest", help="view manifest CSV (view_id,scale,flipped)")
    p.add_argument("--meta", required=True, help="image metadata CSV (image_id,width,height)")
    _add_fusion_args(p)
    p.add_argument("--out", required=True, help="fused predictions (JSON lines)")
    p.add_argument("--submission", help="also write a submission file")
    p.add_argument("--max-per-image", type=int, default=None)
    p.add_argument("--timing-out", help="timing report JSON (default: next to --out)")
    p.add_argument("--budget-ms", type=float, default=DEFAULT_BUDGET_MS)
    p.add_argument("--enforce-budget", action="store_true", help="exit 3 if any image exceeds the budget")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--no-figures", action="store_true")

    p = sub.add_parser("evaluate", help="precision / recall / F1 against ground truth")
    p.add_argument("--gt", required=True)
    p.add_argument("--pred", help="fused predictions file")
    p.add_argument("--detections", help="raw detections, fused on the fly")
    p.add_argument("--manifest")
    p.add_argument("--meta")
    _add_fusion_args(p)
    p.add_argument("--match-iou", type=float, default=0.5)
    p.add_argument("--max-per-image", type=int, default=None)
    p.add_argument("--out", help="report CSV")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--lenient", action="store_true")

    p = sub.add_parser("grid", help="F1 grid search over confidence and NMS thresholds")
    p.add_argument("--gt", required=True)
    p.add_argument("--detections", required=True)
    p.add_argument("--manifest")
    p.add_argument("--meta")
    p.add_argument("--conf-axis", type=_float_list, default=DEFAULT_CONF_AXIS)
    p.add_argument("--nms-axis", type=_float_list, default=DEFAULT_NMS_AXIS)
    _add_fusion_args(p, thresholds=False)
    p.add_argument("--match-iou", type=float, default=0.5)
    p.add_argument("--max-per-image", type=int, default=None)
    p.add_argument("--out", help="F1 matrix CSV (and heatmap next to it)")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--lenient", action="store_true")
    p.add_argument("--no-figures", action="store_true")

    p = sub.add_parser("map", help="GPS-binned road damage map")
    p.add_argument("--images", required=True, help="directory of geotagged JPEGs")
    p.add_argument("--pred", help="fused predictions file")
    p.add_argument("--cell-size", type=float, default=DEFAULT_CELL_SIZE, help="grid cell size in degrees")
    p.add_argument("--thresholds", type=float, nargs=2, default=DEFAULT_COLOR_THRESHOLDS, metavar=("LOW", "HIGH"))
    p.add_argument("--polygons", action="store_true", help="emit cell polygons instead of centroid points")
    p.add_argument("--out-geojson", required=True)
    p.add_argument("--out-csv")
    p.add_argument("--out-html")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--no-figures", action="store_true")

    p = sub.add_parser("replay", help="re-run from a saved *.run.json")
    p.add_argument("run_config")
    return parser


def _configure_logging(verbose: int) -> None:
    level = os.environ.get("ROADDISTRESS_LOG", "").upper() or ("DEBUG" if verbose > 1 else "INFO" if verbose else "WARNING")
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    _configure_logging(ns.verbose)
    try:
        return COMMANDS[ns.command](ns)
    except (RoadDistressError, OSError, ValueError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
