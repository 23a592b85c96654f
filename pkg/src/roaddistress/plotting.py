"""Matplotlib figures written next to the CSV reports."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .dataset import DatasetStats  # noqa: E402
from .evaluation import GridSearchResult, format_threshold  # noqa: E402
from .model import Country, DistressClass  # noqa: E402

_RC = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "svg.hashsalt": "roaddistress",
}
_BUCKET_COLORS = {"green": "#2e9d4b", "yellow": "#e5b92b", "red": "#c8372d"}


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    fig.tight_layout()
    # fixed metadata keeps the files reproducible across runs
    fig.savefig(path, dpi=150, metadata={"Software": None} if path.suffix == ".png" else None)
    plt.close(fig)
    return path


def plot_stats(stats: DatasetStats, path: str | Path) -> Path:
    """Grouped bars of annotation counts per class, one group per country."""
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(6.0, 3.4))
        countries = list(Country)
        x = np.arange(len(DistressClass))
        width = 0.8 / len(countries)
        for k, c in enumerate(countries):
            counts = [stats.annotations[label][c] for label in DistressClass]
            ax.bar(x + (k - (len(countries) - 1) / 2) * width, counts, width,
                   label=f"{c.value} ({stats.images[c]:,} images)")
        ax.set_xticks(x, [f"{k.value}\n{k.description}" for k in DistressClass])
        ax.set_ylabel("annotations")
        ax.set_title("Distress counts by country")
        ax.legend(frameon=False)
        ax.spines[["top", "right"]].set_visible(False)
        return _save(fig, path)


def plot_grid(result: GridSearchResult, path: str | Path) -> Path:
    """Heatmap of F1 with NMS thresholds as rows and confidence thresholds as columns."""
    with plt.rc_context(_RC):
        n_rows, n_cols = result.f1.shape
        fig, ax = plt.subplots(figsize=(1.0 + 0.9 * n_cols, 0.8 + 0.45 * n_rows))
        im = ax.imshow(result.f1, cmap="viridis", aspect="auto")
        ax.set_xticks(range(n_cols), [format_threshold(c) for c in result.conf_axis])
        ax.set_yticks(range(n_rows), [format_threshold(t) for t in result.nms_axis])
        ax.set_xlabel("confidence threshold")
        ax.set_ylabel("NMS threshold")
        lo, hi = float(result.f1.min()), float(result.f1.max())
        best_c, best_t = result.argmax
        for r in range(n_rows):
            for c in range(n_cols):
                v = result.f1[r, c]
                light = hi > lo and (v - lo) / (hi - lo) < 0.6
                is_best = (result.conf_axis[c], result.nms_axis[r]) == (best_c, best_t)
                ax.text(c, r, f"{v:.4f}", ha="center", va="center", color="white" if light else "black",
                        fontweight="bold" if is_best else "normal", fontsize=7)
        fig.colorbar(im, ax=ax, label="F1")
        return _save(fig, path)


def plot_segments(rows: Sequence[dict], colors: Sequence[str], path: str | Path) -> Path:
    """Scatter of segment centroids coloured by damage bucket, sized by image count."""
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(5.0, 4.5))
        if rows:
            lon = [r["lon"] for r in rows]
            lat = [r["lat"] for r in rows]
            sizes = [20 + 10 * r["n_images"] for r in rows]
            ax.scatter(lon, lat, s=sizes, c=[_BUCKET_COLORS.get(c, c) for c in colors],
                       edgecolors="black", linewidths=0.4)
            ax.ticklabel_format(useOffset=False, style="plain")
        else:
            ax.text(0.5, 0.5, "no geotagged images", ha="center", va="center", transform=ax.transAxes)
        ax.set_xlabel("longitude")
        ax.set_ylabel("latitude")
        ax.set_title("Road segment damage")
        for name, color in _BUCKET_COLORS.items():
            ax.scatter([], [], c=color, label=name, edgecolors="black", linewidths=0.4)
        ax.legend(frameon=False, loc="best")
        return _save(fig, path)


def plot_timing(per_image_ms: Sequence[float], budget_ms: float | None, path: str | Path) -> Path:
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(5.0, 3.0))
        if per_image_ms:
            ax.hist(per_image_ms, bins=min(30, max(5, len(per_image_ms) // 3)), color="#4c72b0")
        if budget_ms is not None:
            ax.axvline(budget_ms, color="#c8372d", ls="--", label=f"budget {budget_ms:g} ms")
            ax.legend(frameon=False)
        ax.set_xlabel("fusion time per image (ms)")
        ax.set_ylabel("images")
        return _save(fig, path)
