"""Ground-truth heatmaps and the confidence-weighted cross-entropy loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

PROB_CLAMP = 1e-7
DEFAULT_RADIUS = 3.0  # at the 64x48 desk resolution


@dataclass
class GroundTruthSpec:
    """Per-frame target: ball center at heatmap resolution, or absent."""
    x: float = 0.0
    y: float = 0.0
    radius: float = DEFAULT_RADIUS
    visible: bool = True


def make_gt_heatmap(spec: GroundTruthSpec, height: int, width: int) -> np.ndarray:
    """Binary disk target: 1 inside radius of the center, 0 elsewhere.

    Invisible frames get an all-zero map; off-image disks clip to bounds.
    """
    if height <= 0 or width <= 0:
        raise ValueError(f"bad heatmap size {height}x{width}")
    out = np.zeros((height, width))
    if not spec.visible:
        return out
    if spec.radius <= 0:
        raise ValueError(f"radius must be positive, got {spec.radius}")
    ys = np.arange(height).reshape(-1, 1)
    xs = np.arange(width).reshape(1, -1)
    out[(xs - spec.x) ** 2 + (ys - spec.y) ** 2 <= spec.radius ** 2] = 1.0
    return out


def wbce_loss(p: Tensor, y: np.ndarray) -> Tensor:
    """Mean confidence-weighted binary cross entropy.

    Per pixel: -( (1-p)^2 * y * log p + p^2 * (1-y) * log(1-p) ), with p
    clamped to [1e-7, 1 - 1e-7] so the loss stays finite.
    """
    if p.shape != y.shape:
        raise dc.ShapeMismatch("wbce_loss", f"prediction {p.shape} vs target {y.shape}")
    yc = dc.const(np.asarray(y, dtype=np.float64))
    one = dc.const(1.0)
    pc = dc.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    q = dc.subtract(one, pc)
    pos = dc.multiply(dc.multiply(dc.multiply(q, q), yc), dc.log(pc))
    neg = dc.multiply(dc.multiply(dc.multiply(pc, pc), dc.subtract(one, yc)), dc.log(q))
    return dc.neg(dc.mean_all(dc.add(pos, neg)))
