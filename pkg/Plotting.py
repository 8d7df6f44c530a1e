"""Figures for guidance tensors, error curves, per-finger errors and training curves."""
import csv
import math
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from DomainTypes import FINGER_NAMES, NUM_JOINTS, DataException, DepthPerception  # noqa: E402
from Evaluation import CDF_MAX_MM  # noqa: E402
from LoggingSetup import get_logger  # noqa: E402

logger = get_logger("plotting")

GRID_COLUMNS = 9


def _normalized(tile: np.ndarray) -> np.ndarray:
    low, high = float(tile.min()), float(tile.max())
    if high - low == 0:
        return np.zeros_like(tile)
    return (tile - low) / (high - low)


def phi_tiles(phi: DepthPerception, as_rgb: bool = False) -> List[np.ndarray]:
    """
    One tile per channel (channel = view * 21 + joint). With `as_rgb` a three-view tensor is
    shown as 21 colour tiles whose channels are the frontal, side and top maps of each joint.
    """
    tensor = phi.tensor
    if not as_rgb:
        return [_normalized(channel) for channel in tensor]
    if phi.view_count != 3:
        raise DataException("colour rendering needs a three-view guidance tensor")
    views = tensor.reshape(3, NUM_JOINTS, *tensor.shape[-2:])
    return [np.stack([_normalized(views[v, j]) for v in range(3)], axis=-1) for j in range(NUM_JOINTS)]


def plot_phi_grid(phi: DepthPerception, as_rgb: bool = False):
    tiles = phi_tiles(phi, as_rgb)
    columns = min(GRID_COLUMNS, len(tiles))
    rows = math.ceil(len(tiles) / columns)
    fig, axes = plt.subplots(rows, columns, figsize=(columns * 1.2, rows * 1.2), squeeze=False)
    for index, ax in enumerate(axes.flat):
        ax.set_axis_off()
        if index < len(tiles):
            ax.imshow(tiles[index], cmap=None if as_rgb else "viridis", interpolation="nearest")
    fig.suptitle(f"Depth perception ({len(tiles)} {'colour tiles' if as_rgb else 'channels'})")
    return fig


def plot_fake_depth(depth: np.ndarray):
    """The generated frontal depth map on the normalized [0, 1] depth scale; 0 is background."""
    fig, ax = plt.subplots(figsize=(4, 4))
    shown = ax.imshow(depth, cmap="gray", vmin=0.0, vmax=1.0, interpolation="nearest")
    ax.set_axis_off()
    ax.set_title("Fake depth")
    fig.colorbar(shown, ax=ax, fraction=0.046)
    return fig


def plot_error_cdf(curves: Dict[str, Sequence[Tuple[float, float]]]):
    """Fraction of frames within each maximum joint error threshold, one line per label."""
    fig, ax = plt.subplots(figsize=(5, 4))
    for label, cdf in curves.items():
        thresholds, fractions = zip(*cdf)
        ax.plot(thresholds, np.asarray(fractions) * 100.0, label=label)
    ax.set_xlim(0, CDF_MAX_MM)
    ax.set_ylim(0, 100)
    ax.set_xlabel("Maximum allowed distance to GT (mm)")
    ax.set_ylabel("Fraction of frames within distance (%)")
    ax.grid(True, alpha=0.3)
    ax.legend(loc="lower right")
    fig.tight_layout()
    return fig


def plot_finger_bars(per_finger: Dict[str, Sequence[float]]):
    """Grouped bars of per-finger mean error, one bar per label within each finger group."""
    fig, ax = plt.subplots(figsize=(6, 4))
    positions = np.arange(len(FINGER_NAMES))
    width = 0.8 / max(len(per_finger), 1)
    for k, (label, values) in enumerate(per_finger.items()):
        ax.bar(positions + k * width, values, width, label=label)
    ax.set_xticks(positions + width * (len(per_finger) - 1) / 2)
    ax.set_xticklabels(FINGER_NAMES)
    ax.set_ylabel("Mean error (mm)")
    ax.legend()
    fig.tight_layout()
    return fig


def read_cdf(path) -> List[Tuple[float, float]]:
    with open(path, newline="", encoding="utf-8") as f:
        return [(float(row["threshold_mm"]), float(row["fraction"])) for row in csv.DictReader(f)]


def plot_training_curves(steps_csv):
    with open(steps_csv, newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    if not rows:
        raise DataException(f"no steps logged in {steps_csv}")
    steps = [int(row["step"]) for row in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    for column in ("total", "reg", "p", "dp", "w"):
        values = [float(row[column]) if row[column] else np.nan for row in rows]
        if not np.all(np.isnan(values)):
            ax.plot(steps, values, label=column, linewidth=0.8)
    ax.set_yscale("log")
    ax.set_xlabel("Step")
    ax.set_ylabel("Loss")
    ax.legend()
    fig.tight_layout()
    return fig


def save_figure(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    logger.info(f"Saved figure {path}")
    return path
