"""Synthetic bouncing-ball sequences with occluders, decoys, and labels.

Scenes are deterministic functions of their configuration: a small
anti-aliased ball bounces elastically inside the frame over a flat
background with static ball-colored decoy blobs; rectangular occluders are
scheduled onto the trajectory so every sequence contains occlusion events.
Frames are quantized to 8-bit levels at generation time, so the PPM+CSV
on-disk form round-trips losslessly and is also the ingestion format for
user-supplied data.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np


@dataclass
class Occluder:
    x: float  # top-left corner, pixel units
    y: float
    w: int
    h: int
    vx: float = 0.0
    vy: float = 0.0

    def rect_at(self, t: int) -> tuple[float, float, int, int]:
        return self.x + t * self.vx, self.y + t * self.vy, self.w, self.h


@dataclass
class SceneConfig:
    width: int = 64
    height: int = 48
    frames: int = 120
    ball_radius: float = 2.2
    speed_min: float = 1.2
    speed_max: float = 2.4
    ball_color: tuple[float, float, float] = (0.95, 0.90, 0.25)
    background: tuple[float, float, float] = (0.13, 0.30, 0.16)
    decoys: int = 3
    decoy_dim: float = 1.0  # decoy brightness relative to the ball
    occluders: int = 2
    occluder_color: tuple[float, float, float] = (0.45, 0.45, 0.50)
    veils: int = 1  # semi-transparent patches that dim but do not occlude
    veil_alpha: float = 0.6
    veil_color: tuple[float, float, float] = (0.05, 0.10, 0.05)
    noise_sigma: float = 0.02
    seed: int = 0


@dataclass
class LabeledFrame:
    image: np.ndarray  # (3, H, W) float64 at 8-bit granularity, values in [0, 1]
    visible: bool
    x: float
    y: float


def _reflect(p: float, lo: float, hi: float) -> tuple[float, int]:
    """Fold p into [lo, hi]; returns (position, parity of reflections)."""
    flips = 0
    while p < lo or p > hi:
        if p < lo:
            p = 2 * lo - p
        else:
            p = 2 * hi - p
        flips += 1
    return p, flips


def simulate_trajectory(cfg: SceneConfig, rng: np.random.Generator) -> np.ndarray:
    """Per-frame ball centers (frames, 2) with elastic wall reflection."""
    r = cfg.ball_radius
    lo_x, hi_x = r, cfg.width - 1 - r
    lo_y, hi_y = r, cfg.height - 1 - r
    x = rng.uniform(lo_x, hi_x)
    y = rng.uniform(lo_y, hi_y)
    speed = rng.uniform(cfg.speed_min, cfg.speed_max)
    angle = rng.uniform(0, 2 * np.pi)
    vx, vy = speed * np.cos(angle), speed * np.sin(angle)
    out = np.empty((cfg.frames, 2))
    for t in range(cfg.frames):
        out[t] = (x, y)
        x, fx = _reflect(x + vx, lo_x, hi_x)
        y, fy = _reflect(y + vy, lo_y, hi_y)
        if fx % 2:
            vx = -vx
        if fy % 2:
            vy = -vy
    return out


def render_circle(img: np.ndarray, cx: float, cy: float, r: float,
                  color: tuple[float, float, float]) -> None:
    """Alpha-composite an anti-aliased disk; coverage ramps over one pixel."""
    _, h, w = img.shape
    ys = np.arange(h).reshape(-1, 1)
    xs = np.arange(w).reshape(1, -1)
    dist = np.sqrt((xs - cx) ** 2 + (ys - cy) ** 2)
    alpha = np.clip(r + 0.5 - dist, 0.0, 1.0)
    for c in range(3):
        img[c] = img[c] * (1 - alpha) + color[c] * alpha


def _rect_mask(h: int, w: int, rect: tuple[float, float, int, int]) -> np.ndarray:
    """Pixels whose centers fall inside [x, x+w) x [y, y+h)."""
    x, y, rw, rh = rect
    ys = np.arange(h).reshape(-1, 1)
    xs = np.arange(w).reshape(1, -1)
    return (xs >= x) & (xs < x + rw) & (ys >= y) & (ys < y + rh)


def schedule_occluders(cfg: SceneConfig, traj: np.ndarray) -> list[Occluder]:
    """Place occluders on the trajectory so crossings are guaranteed."""
    occluders = []
    n = cfg.frames
    for i in range(cfg.occluders):
        t = (i + 1) * n // (cfg.occluders + 1)
        cx, cy = traj[min(t, n - 1)]
        if i % 2 == 0:
            w, h = 10, 8
            occluders.append(Occluder(cx - w / 2, cy - h / 2, w, h))
        else:
            w, h = 8, 10
            vx, vy = -0.6, 0.25
            occluders.append(Occluder(cx - w / 2 - t * vx, cy - h / 2 - t * vy,
                                      w, h, vx, vy))
    return occluders


def schedule_veils(cfg: SceneConfig, traj: np.ndarray) -> list[tuple[float, float, int, int]]:
    """Static dimming rectangles centered on trajectory crossings; the ball
    stays labeled visible underneath, only its contrast drops."""
    veils = []
    n = cfg.frames
    for i in range(cfg.veils):
        t = (2 * i + 1) * n // (2 * cfg.veils)
        cx, cy = traj[min(t, n - 1)]
        w, h = 14, 11
        veils.append((cx - w / 2, cy - h / 2, w, h))
    return veils


def generate_sequence(cfg: SceneConfig) -> list[LabeledFrame]:
    """Deterministic labeled frames for one scene configuration."""
    if cfg.frames < 3:
        raise ValueError(f"need at least 3 frames, got {cfg.frames}")
    if cfg.ball_radius >= (min(cfg.height, cfg.width) - 1) / 2:
        raise ValueError(
            f"ball radius {cfg.ball_radius} too large for {cfg.width}x{cfg.height}")
    rng = np.random.default_rng(cfg.seed)
    traj = simulate_trajectory(cfg, rng)
    occluders = schedule_occluders(cfg, traj)
    veils = schedule_veils(cfg, traj)

    decoys = []
    margin = 4.0
    for _ in range(cfg.decoys):
        dx = rng.uniform(margin, cfg.width - 1 - margin)
        dy = rng.uniform(margin, cfg.height - 1 - margin)
        dr = cfg.ball_radius * rng.uniform(0.8, 1.1)
        decoys.append((dx, dy, dr))
    decoy_color = tuple(c * cfg.decoy_dim for c in cfg.ball_color)

    base = np.empty((3, cfg.height, cfg.width))
    for c in range(3):
        base[c] = cfg.background[c]
    for dx, dy, dr in decoys:
        render_circle(base, dx, dy, dr, decoy_color)

    out = []
    for t in range(cfg.frames):
        img = base.copy()
        cx, cy = traj[t]
        render_circle(img, cx, cy, cfg.ball_radius, cfg.ball_color)
        for rect in veils:
            mask = _rect_mask(cfg.height, cfg.width, rect)
            for c in range(3):
                img[c][mask] = (img[c][mask] * (1 - cfg.veil_alpha)
                                + cfg.veil_color[c] * cfg.veil_alpha)
        covered = np.zeros((cfg.height, cfg.width), dtype=bool)
        for occ in occluders:
            mask = _rect_mask(cfg.height, cfg.width, occ.rect_at(t))
            covered |= mask
            for c in range(3):
                img[c][mask] = cfg.occluder_color[c]
        px, py = int(np.floor(cx + 0.5)), int(np.floor(cy + 0.5))
        visible = not covered[py, px]
        if cfg.noise_sigma > 0:
            img = img + rng.normal(0.0, cfg.noise_sigma, img.shape)
        img = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
        out.append(LabeledFrame(img, visible, float(cx), float(cy)))
    return out


def make_dataset(sequences: int, cfg: SceneConfig) -> dict[str, list[LabeledFrame]]:
    """Generate named sequences with per-sequence seeds cfg.seed, cfg.seed+1, ..."""
    return {f"seq{i:03d}": generate_sequence(replace(cfg, seed=cfg.seed + i))
            for i in range(sequences)}


def window_count(n_frames: int) -> int:
    """Overlapping 3-frame training windows in a sequence of n frames."""
    return max(0, n_frames - 2)


# ---------------------------------------------------------------------------
# on-disk format: binary PPM frames + labels CSV


def write_ppm(path: Path, image: np.ndarray) -> None:
    """8-bit binary PPM (P6); lossless for images at 8-bit granularity."""
    _, h, w = image.shape
    data = np.round(image * 255.0).astype(np.uint8).transpose(1, 2, 0)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_ppm(path: Path) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        fields.append(blob[start:pos])
    pos += 1  # single whitespace after maxval
    magic, w, h, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    if magic != b"P6" or maxval != 255:
        raise ValueError(f"{path}: unsupported PPM variant ({magic!r}, maxval {maxval})")
    data = np.frombuffer(blob, dtype=np.uint8, count=w * h * 3, offset=pos)
    return data.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float64) / 255.0


def write_dataset(sequences: dict[str, list[LabeledFrame]], root: Path) -> dict:
    """Write `root/<seq>/frames/%06d.ppm` plus `labels.csv` per sequence.

    CSV schema: header `frame,visibility,x,y`; occluded frames leave x and y
    empty.  Returns a manifest of sequence names and frame counts.
    """
    root = Path(root)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset root {root}: {exc}") from exc
    manifest = {"sequences": []}
    for name, frames in sequences.items():
        seq_dir = root / name
        (seq_dir / "frames").mkdir(parents=True, exist_ok=True)
        with open(seq_dir / "labels.csv", "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["frame", "visibility", "x", "y"])
            for k, fr in enumerate(frames):
                write_ppm(seq_dir / "frames" / f"{k:06d}.ppm", fr.image)
                if fr.visible:
                    writer.writerow([k, 1, f"{fr.x:.6f}", f"{fr.y:.6f}"])
                else:
                    writer.writerow([k, 0, "", ""])
        manifest["sequences"].append({"name": name, "frames": len(frames)})
    return manifest


def read_dataset(root: Path) -> dict[str, list[LabeledFrame]]:
    """Inverse of write_dataset; also the ingestion path for external data."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    out: dict[str, list[LabeledFrame]] = {}
    for seq_dir in sorted(p for p in root.iterdir() if (p / "labels.csv").is_file()):
        frames = []
        with open(seq_dir / "labels.csv", newline="") as f:
            for row in csv.DictReader(f):
                k = int(row["frame"])
                visible = row["visibility"].strip() == "1"
                x = float(row["x"]) if visible else 0.0
                y = float(row["y"]) if visible else 0.0
                image = read_ppm(seq_dir / "frames" / f"{k:06d}.ppm")
                frames.append(LabeledFrame(image, visible, x, y))
        out[seq_dir.name] = frames
    if not out:
        raise FileNotFoundError(f"no sequences found under {root}")
    return out
