"""Training loop: decoupled-decay adaptive optimizer, multistep schedule,
window batching, and versioned checkpoints.

Checkpoints are a plain-text manifest (configuration plus an array registry
with shapes and byte offsets) next to a little-endian float64 flat binary;
loading validates every shape.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import Tape, Tensor
from .supervision import DEFAULT_RADIUS, GroundTruthSpec, make_gt_heatmap, wbce_loss
from .synthgen import LabeledFrame

Array = np.ndarray

CHECKPOINT_FORMAT = "balltrack-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 2
    epochs: int = 30
    milestones: tuple[int, ...] = (20, 25)
    gamma: float = 0.1
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float | None = None
    seed: int = 0

    def __post_init__(self):
        ms = tuple(self.milestones)
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError(f"milestones must be strictly increasing, got {ms}")
        if ms and ms[-1] >= self.epochs:
            raise ValueError(f"milestones {ms} must be below epochs={self.epochs}")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must be in (0, 1), got {self.gamma}")
        self.milestones = ms


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    """Base rate decayed by gamma once per milestone at or before epoch."""
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    return cfg.lr * cfg.gamma ** sum(1 for m in cfg.milestones if m <= epoch)


@dataclass
class ModelState:
    """Named parameters plus optimizer moments, buffers, and step counter."""
    params: dict[str, Tensor]
    m: dict[str, Array]
    v: dict[str, Array]
    buffers: dict[str, Array]
    step: int = 0
    decay_exempt: set[str] = field(default_factory=set)

    @classmethod
    def from_model(cls, model) -> "ModelState":
        return cls(
            params=model.params,
            m={k: np.zeros_like(t.data) for k, t in model.params.items()},
            v={k: np.zeros_like(t.data) for k, t in model.params.items()},
            buffers=model.buffers,
            decay_exempt=set(getattr(model, "decay_exempt", ())),
        )

    def snapshot(self) -> dict:
        return {
            "params": {k: t.data.copy() for k, t in self.params.items()},
            "m": {k: a.copy() for k, a in self.m.items()},
            "v": {k: a.copy() for k, a in self.v.items()},
            "buffers": {k: a.copy() for k, a in self.buffers.items()},
            "step": self.step,
        }

    def restore(self, snap: dict) -> None:
        for k, t in self.params.items():
            t.data = snap["params"][k].copy()
        for k in self.m:
            self.m[k] = snap["m"][k].copy()
            self.v[k] = snap["v"][k].copy()
        for k, a in self.buffers.items():
            a[:] = snap["buffers"][k]
        self.step = snap["step"]


def adamw_step(state: ModelState, grads: dict[str, Array], lr: float,
               cfg: TrainConfig) -> None:
    """One decoupled-weight-decay adaptive update over all parameters."""
    missing = set(state.params) - set(grads)
    extra = set(grads) - set(state.params)
    if missing or extra:
        raise ValueError(f"gradient set mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise dc.NonFiniteError(f"non-finite gradient for parameter {name!r}")

    if cfg.grad_clip is not None:
        total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        if total > cfg.grad_clip:
            factor = cfg.grad_clip / total
            grads = {k: g * factor for k, g in grads.items()}

    state.step += 1
    bc1 = 1.0 - cfg.beta1 ** state.step
    bc2 = 1.0 - cfg.beta2 ** state.step
    for name, p in state.params.items():
        g = grads[name]
        state.m[name] = cfg.beta1 * state.m[name] + (1 - cfg.beta1) * g
        state.v[name] = cfg.beta2 * state.v[name] + (1 - cfg.beta2) * g * g
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        wd = 0.0 if name in state.decay_exempt else cfg.weight_decay
        p.data = p.data - lr * (m_hat / (np.sqrt(v_hat) + cfg.eps) + wd * p.data)


# ---------------------------------------------------------------------------
# window batching


class WindowSet:
    """All overlapping 3-frame windows of a labeled dataset, with cached
    ground-truth heatmaps at the configured disk radius."""

    def __init__(self, frames_by_seq, gt_by_seq, labels_by_seq, index):
        self.frames_by_seq = frames_by_seq
        self.gt_by_seq = gt_by_seq
        self.labels_by_seq = labels_by_seq
        self.index = index

    @classmethod
    def from_sequences(cls, sequences: dict[str, list[LabeledFrame]],
                       radius: float = DEFAULT_RADIUS) -> "WindowSet":
        frames_by_seq, gt_by_seq, labels_by_seq, index = [], [], [], []
        for si, (name, frames) in enumerate(sorted(sequences.items())):
            stack = np.stack([f.image for f in frames])
            h, w = stack.shape[-2:]
            gt = np.stack([
                make_gt_heatmap(GroundTruthSpec(f.x, f.y, radius, f.visible), h, w)
                for f in frames])
            frames_by_seq.append(stack)
            gt_by_seq.append(gt)
            labels_by_seq.append([(f.visible, f.x, f.y) for f in frames])
            index.extend((si, t) for t in range(1, len(frames) - 1))
        return cls(frames_by_seq, gt_by_seq, labels_by_seq, index)

    def __len__(self) -> int:
        return len(self.index)

    def batch(self, items) -> tuple[Array, Array]:
        frames = np.stack([self.frames_by_seq[si][t - 1:t + 2] for si, t in items])
        gt = np.stack([self.gt_by_seq[si][t - 1:t + 2] for si, t in items])
        return frames, gt


# ---------------------------------------------------------------------------
# fit driver


@dataclass
class FitResult:
    state: ModelState
    loss_log: list[tuple[int, int, float, float]]  # (epoch, step, lr, loss)
    aborted: bool = False


def fit(model, windows: WindowSet, cfg: TrainConfig) -> FitResult:
    """Run the full schedule; deterministic given cfg.seed.

    On divergence (non-finite loss) training aborts and the state rolls back
    to the last completed epoch.
    """
    if len(windows) == 0:
        raise ValueError("empty dataset")
    state = ModelState.from_model(model)
    last_good = state.snapshot()
    log: list[tuple[int, int, float, float]] = []
    gstep = 0
    for epoch in range(cfg.epochs):
        lr = lr_at_epoch(cfg, epoch)
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(windows))
        for start in range(0, len(order), cfg.batch_size):
            chunk = [windows.index[i] for i in order[start:start + cfg.batch_size]]
            frames, gt = windows.batch(chunk)
            try:
                with Tape() as tape:
                    probs = model.forward(frames, "train",
                                          mask_seed=cfg.seed * 1_000_003 + gstep)
                    loss = wbce_loss(probs, gt)
                value = float(loss.data)
                if not np.isfinite(value):
                    raise dc.NonFiniteError("non-finite loss")
                grads = dc.backward(tape, loss)
                adamw_step(state, grads, lr, cfg)
            except dc.NonFiniteError:
                state.restore(last_good)
                return FitResult(state, log, aborted=True)
            log.append((epoch, gstep, lr, value))
            gstep += 1
        last_good = state.snapshot()
    return FitResult(state, log)


def write_loss_log(log, path: Path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "step", "lr", "loss"])
        for epoch, step, lr, loss in log:
            writer.writerow([epoch, step, f"{lr:.12g}", f"{loss:.17g}"])


# ---------------------------------------------------------------------------
# checkpoints


def _array_sections(state: ModelState):
    for name in sorted(state.params):
        yield "param", name, state.params[name].data
    for name in sorted(state.m):
        yield "adam_m", name, state.m[name]
    for name in sorted(state.v):
        yield "adam_v", name, state.v[name]
    for name in sorted(state.buffers):
        yield "buffer", name, state.buffers[name]


def save_checkpoint(state: ModelState, prefix: Path,
                    config: dict[str, str] | None = None) -> None:
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    lines = [
        f"format = {CHECKPOINT_FORMAT}",
        f"version = {CHECKPOINT_VERSION}",
        "dtype = <f8",
        f"step = {state.step}",
    ]
    for key in sorted(config or {}):
        lines.append(f"config.{key} = {config[key]}")
    offset = 0
    blobs = []
    for i, (kind, name, arr) in enumerate(_array_sections(state)):
        data = np.array(arr, dtype="<f8", order="C")  # preserves 0-d shapes
        nbytes = data.nbytes
        lines.append(f"array.{i}.kind = {kind}")
        lines.append(f"array.{i}.name = {name}")
        lines.append(f"array.{i}.shape = {','.join(map(str, data.shape)) or 'scalar'}")
        lines.append(f"array.{i}.offset = {offset}")
        lines.append(f"array.{i}.bytes = {nbytes}")
        blobs.append(data.tobytes())
        offset += nbytes
    with open(prefix.with_suffix(".manifest"), "w") as f:
        f.write("\n".join(lines) + "\n")
    with open(prefix.with_suffix(".bin"), "wb") as f:
        for blob in blobs:
            f.write(blob)


def load_checkpoint(prefix: Path):
    """Returns (arrays, config, step) where arrays maps (kind, name) -> ndarray."""
    prefix = Path(prefix)
    manifest_path = prefix.with_suffix(".manifest")
    if not manifest_path.is_file():
        raise FileNotFoundError(f"no checkpoint manifest at {manifest_path}")
    fields: dict[str, str] = {}
    for line in manifest_path.read_text().splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition(" = ")
        fields[key.strip()] = value.strip()
    if fields.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unrecognized checkpoint format {fields.get('format')!r}")
    if int(fields.get("version", -1)) != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {fields.get('version')!r}")
    blob = prefix.with_suffix(".bin").read_bytes()
    arrays: dict[tuple[str, str], Array] = {}
    i = 0
    while f"array.{i}.name" in fields:
        kind = fields[f"array.{i}.kind"]
        name = fields[f"array.{i}.name"]
        shape_text = fields[f"array.{i}.shape"]
        shape = () if shape_text == "scalar" else tuple(int(s) for s in shape_text.split(","))
        offset = int(fields[f"array.{i}.offset"])
        nbytes = int(fields[f"array.{i}.bytes"])
        arr = np.frombuffer(blob[offset:offset + nbytes], dtype="<f8").reshape(shape)
        arrays[(kind, name)] = arr.astype(np.float64)
        i += 1
    config = {k[len("config."):]: v for k, v in fields.items() if k.startswith("config.")}
    return arrays, config, int(fields.get("step", 0))


def load_into_model(model, prefix: Path) -> ModelState:
    """Rebuild a ModelState from a checkpoint, validating shape-by-shape."""
    arrays, _, step = load_checkpoint(prefix)
    state = ModelState.from_model(model)
    state.step = step
    for kind, holder in (("param", state.params), ("adam_m", state.m),
                         ("adam_v", state.v), ("buffer", state.buffers)):
        for name in holder:
            if (kind, name) not in arrays:
                raise ValueError(f"checkpoint is missing {kind} {name!r}")
            loaded = arrays[(kind, name)]
            current = holder[name].data if kind == "param" else holder[name]
            if loaded.shape != current.shape:
                raise ValueError(
                    f"shape mismatch for {kind} {name!r}: "
                    f"checkpoint {loaded.shape} vs model {current.shape}")
            if kind == "param":
                holder[name].data = loaded.copy()
            elif kind == "buffer":
                holder[name][:] = loaded
            else:
                holder[name] = loaded.copy()
    return state
