"""Evaluation protocol: peak extraction, five-way frame classification with
a 4-pixel tolerance, and the derived metrics.

Frame classes:
  TP  - ball present, predicted within tolerance
  FP1 - ball present, predicted beyond tolerance
  FP2 - no ball, but something predicted
  TN  - no ball, nothing predicted
  FN  - ball present, nothing predicted
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from scipy import ndimage


@dataclass
class EvalConfig:
    tolerance: float = 4.0      # pixels at original resolution
    threshold: float = 0.5
    scale_x: float = 1.0        # model -> original resolution
    scale_y: float = 1.0

    def __post_init__(self):
        if self.tolerance <= 0:
            raise ValueError(f"tolerance must be positive, got {self.tolerance}")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must be in (0, 1), got {self.threshold}")


@dataclass
class Detection:
    frame: int
    present: bool
    x: float = 0.0   # original-resolution pixels
    y: float = 0.0
    confidence: float = 0.0

    @classmethod
    def none(cls, frame: int = 0) -> "Detection":
        return cls(frame, False)


class FrameClass(str, Enum):
    TP = "TP"
    FP1 = "FP1"
    FP2 = "FP2"
    TN = "TN"
    FN = "FN"


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp1: int = 0
    fp2: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def fp(self) -> int:
        return self.fp1 + self.fp2

    @property
    def total(self) -> int:
        return self.tp + self.fp1 + self.fp2 + self.tn + self.fn

    def add(self, cls: FrameClass) -> None:
        key = cls.value.lower()
        setattr(self, key, getattr(self, key) + 1)

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp1 + other.fp1,
                               self.fp2 + other.fp2, self.tn + other.tn,
                               self.fn + other.fn)


@dataclass
class Metrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    undefined: tuple[str, ...] = ()


_EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


def extract_coordinate(heatmap: np.ndarray, cfg: EvalConfig, frame: int = 0) -> Detection:
    """Detection from one frame's probability map.

    Thresholds at cfg.threshold, keeps the largest 8-connected component
    (ties break toward higher peak value, then earlier scan order), and
    returns its intensity-weighted centroid scaled to original resolution.
    """
    mask = heatmap > cfg.threshold
    if not mask.any():
        return Detection.none(frame)
    labels, count = ndimage.label(mask, structure=_EIGHT_CONNECTED)
    areas = np.bincount(labels.ravel())[1:]
    best_area = areas.max()
    candidates = [i + 1 for i, a in enumerate(areas) if a == best_area]
    if len(candidates) > 1:
        peaks = [heatmap[labels == lab].max() for lab in candidates]
        best_peak = max(peaks)
        candidates = [lab for lab, pk in zip(candidates, peaks) if pk == best_peak]
    chosen = candidates[0]  # earliest scan order among remaining ties
    ys, xs = np.nonzero(labels == chosen)
    weights = heatmap[ys, xs]
    wsum = weights.sum()
    cx = float((xs * weights).sum() / wsum)
    cy = float((ys * weights).sum() / wsum)
    return Detection(frame, True, cx * cfg.scale_x, cy * cfg.scale_y,
                     float(weights.max()))


def classify_frame(pred: Detection, visible: bool, gt_x: float, gt_y: float,
                   cfg: EvalConfig) -> FrameClass:
    """Five-way partition; distance exactly at tolerance counts as TP."""
    if visible:
        if not pred.present:
            return FrameClass.FN
        dist = float(np.hypot(pred.x - gt_x, pred.y - gt_y))
        return FrameClass.TP if dist <= cfg.tolerance else FrameClass.FP1
    return FrameClass.FP2 if pred.present else FrameClass.TN


def compute_metrics(c: ConfusionCounts) -> Metrics:
    """Accuracy, precision, recall, F1 from confusion counts.

    Zero denominators yield 0.0 and are reported in ``undefined``.
    """
    undefined = []

    def ratio(num, den, name):
        if den == 0:
            undefined.append(name)
            return 0.0
        return num / den

    precision = ratio(c.tp, c.tp + c.fp1 + c.fp2, "precision")
    recall = ratio(c.tp, c.tp + c.fn, "recall")
    f1 = ratio(2 * precision * recall, precision + recall, "f1")
    accuracy = ratio(c.tp + c.tn, c.total, "accuracy")
    return Metrics(accuracy, precision, recall, f1, tuple(undefined))


# ---------------------------------------------------------------------------
# dataset-level protocol


def evaluate_heatmap_sequences(per_frame_heatmaps, labels, cfg: EvalConfig):
    """Classify every frame of one sequence given its heatmaps and labels.

    Returns (counts, detections); labels are (visible, x, y) triples at
    original resolution.
    """
    counts = ConfusionCounts()
    detections = []
    for k, ((visible, gx, gy), hm) in enumerate(zip(labels, per_frame_heatmaps)):
        det = extract_coordinate(hm, cfg, frame=k)
        counts.add(classify_frame(det, visible, gx, gy, cfg))
        detections.append(det)
    return counts, detections


def frame_heatmaps_for_sequence(model, frames: np.ndarray, batch: int = 16):
    """Per-frame heatmaps via the sliding 3-frame protocol.

    Frame k comes from the window centred on k; the first and last frames
    come from the outer channels of the first and last windows.  Every frame
    is evaluated exactly once.
    """
    n = frames.shape[0]
    if n < 3:
        raise ValueError(f"need at least 3 frames, got {n}")
    centers = list(range(1, n - 1))
    maps = np.empty((n,) + frames.shape[-2:])
    for start in range(0, len(centers), batch):
        chunk = centers[start:start + batch]
        windows = np.stack([frames[t - 1:t + 2] for t in chunk])
        probs = model.forward(windows, "infer").data
        for row, t in enumerate(chunk):
            maps[t] = probs[row, 1]
            if t == 1:
                maps[0] = probs[row, 0]
            if t == n - 2:
                maps[n - 1] = probs[row, 2]
    return maps


def evaluate_model(model, sequences: dict, cfg: EvalConfig):
    """Full protocol over a labeled dataset; returns (counts, per-sequence)."""
    total = ConfusionCounts()
    per_sequence = {}
    for name in sorted(sequences):
        frames = np.stack([f.image for f in sequences[name]])
        labels = [(f.visible, f.x, f.y) for f in sequences[name]]
        maps = frame_heatmaps_for_sequence(model, frames)
        counts, detections = evaluate_heatmap_sequences(maps, labels, cfg)
        per_sequence[name] = (counts, detections)
        total = total + counts
    return total, per_sequence


# ---------------------------------------------------------------------------
# reporting


REPORT_COLUMNS = ["Model", "Acc", "Precision", "Recall", "F1",
                  "Total", "TP", "FP1", "FP2", "FP", "TN", "FN"]


def report_rows(named_counts: list[tuple[str, ConfusionCounts]]):
    rows = []
    for name, c in named_counts:
        m = compute_metrics(c)
        rows.append({
            "model": name,
            "acc": m.accuracy, "precision": m.precision,
            "recall": m.recall, "f1": m.f1,
            "total": c.total, "tp": c.tp, "fp1": c.fp1, "fp2": c.fp2,
            "fp": c.fp, "tn": c.tn, "fn": c.fn,
            "undefined": m.undefined,
        })
    return rows


def format_report(rows) -> str:
    """Fixed-width text table mirroring the standard column order."""
    header = "".join(f"{c:>10}" for c in REPORT_COLUMNS)
    lines = [header, "-" * len(header)]
    for r in rows:
        cells = [f"{r['model']:>10}"]
        for key in ("acc", "precision", "recall", "f1"):
            name = "accuracy" if key == "acc" else key
            star = "*" if name in r["undefined"] else " "
            cells.append(f"{r[key]:>9.4f}{star}")
        for key in ("total", "tp", "fp1", "fp2", "fp", "tn", "fn"):
            cells.append(f"{r[key]:>10d}")
        lines.append("".join(cells))
    if any(r["undefined"] for r in rows):
        lines.append("(* metric undefined for these counts; reported as 0)")
    return "\n".join(lines)


def write_report_csv(rows, path: Path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["model", "acc", "precision", "recall", "f1",
                         "total", "tp", "fp1", "fp2", "fp", "tn", "fn"])
        for r in rows:
            writer.writerow([r["model"], f"{r['acc']:.6f}", f"{r['precision']:.6f}",
                             f"{r['recall']:.6f}", f"{r['f1']:.6f}",
                             r["total"], r["tp"], r["fp1"], r["fp2"],
                             r["fp"], r["tn"], r["fn"]])
