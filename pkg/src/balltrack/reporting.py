"""Figure and image export: loss curves, metric charts, frame overlays.

Overlays mark the ground-truth center with a white cross and the predicted
center with a black cross, so the two stay distinct even in grayscale
renderings of the color frames.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

GT_VALUE = 1.0
PRED_VALUE = 0.0
CROSS_ARM = 3


def save_loss_curve(log, path: Path) -> None:
    """Loss-vs-step curve with per-epoch means from a fit loss log."""
    steps = [row[1] for row in log]
    losses = [row[3] for row in log]
    epochs = sorted({row[0] for row in log})
    epoch_mean = [np.mean([r[3] for r in log if r[0] == e]) for e in epochs]
    epoch_step = [max(r[1] for r in log if r[0] == e) for e in epochs]

    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(steps, losses, lw=0.6, alpha=0.5, label="step loss")
    ax.plot(epoch_step, epoch_mean, "o-", lw=1.5, label="epoch mean")
    ax.set_xlabel("step")
    ax.set_ylabel("weighted BCE")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_metrics_figure(rows, path: Path) -> None:
    """Grouped bar chart of accuracy/precision/recall/F1 per model row."""
    names = [r["model"] for r in rows]
    keys = ["acc", "precision", "recall", "f1"]
    x = np.arange(len(names))
    width = 0.2
    fig, ax = plt.subplots(figsize=(max(5, 1.6 * len(names) + 2), 4))
    for i, key in enumerate(keys):
        ax.bar(x + (i - 1.5) * width, [r[key] for r in rows], width, label=key)
    ax.set_xticks(x, names)
    ax.set_ylim(0, 1.05)
    ax.legend(ncols=4, loc="lower right")
    ax.set_ylabel("score")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def draw_cross(image: np.ndarray, x: float, y: float, value: float,
               arm: int = CROSS_ARM) -> None:
    """Paint an axis-aligned cross into a (3, H, W) image in place."""
    _, h, w = image.shape
    cx, cy = int(round(x)), int(round(y))
    for d in range(-arm, arm + 1):
        if 0 <= cy + d < h and 0 <= cx < w:
            image[:, cy + d, cx] = value
        if 0 <= cy < h and 0 <= cx + d < w:
            image[:, cy, cx + d] = value


def overlay_frame(image: np.ndarray, pred, gt) -> np.ndarray:
    """Copy of the frame with prediction/ground-truth crosses drawn in.

    ``pred`` and ``gt`` are (x, y) tuples or None.  Ground truth is drawn
    first so an exactly-overlapping prediction covers it, mirroring the
    convention that a hidden ground-truth marker means a zero-error hit.
    """
    out = image.copy()
    if gt is not None:
        draw_cross(out, gt[0], gt[1], GT_VALUE)
    if pred is not None:
        draw_cross(out, pred[0], pred[1], PRED_VALUE)
    return out


def save_image(path: Path, image: np.ndarray) -> None:
    """(3, H, W) [0,1] image to PNG."""
    plt.imsave(path, np.clip(image, 0, 1).transpose(1, 2, 0))


def save_heatmap(path: Path, heatmap: np.ndarray) -> None:
    """(H, W) probability map to grayscale PNG on a fixed [0,1] scale."""
    plt.imsave(path, np.clip(heatmap, 0, 1), cmap="gray", vmin=0.0, vmax=1.0)
