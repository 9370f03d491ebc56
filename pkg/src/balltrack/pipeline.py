"""Variant assembly: wires motion inputs, backbone, and refinement head.

Five pipeline variants cover the ablation space: a plain 9-channel visual
baseline, a direction-blind motion variant, motion-only, refinement-only,
and the full motion + refinement model.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import diffcore as dc
from . import mdd
from .backbone import Backbone, BackboneConfig
from .diffcore import Tensor
from .rstr import DraftHead, MotionFusion, TsattConfig, TsattHead, refine, stochastic_mask


class PipelineVariant(str, Enum):
    V2 = "v2"            # no motion input, no refinement
    V4LIKE = "v4like"    # absolute-difference motion, no refinement
    V2_MDD = "v2_mdd"    # decoupled motion input only
    V2_RSTR = "v2_rstr"  # refinement head only
    V5 = "v5"            # decoupled motion input + refinement head

    @property
    def uses_motion(self) -> bool:
        return self in (PipelineVariant.V4LIKE, PipelineVariant.V2_MDD, PipelineVariant.V5)

    @property
    def uses_rstr(self) -> bool:
        return self in (PipelineVariant.V2_RSTR, PipelineVariant.V5)

    @property
    def in_channels(self) -> int:
        return mdd.MOTION_INPUT_CHANNELS if self.uses_motion else mdd.PLAIN_INPUT_CHANNELS


@dataclass
class ModelConfig:
    variant: PipelineVariant = PipelineVariant.V5
    height: int = 48
    width: int = 64
    widths: tuple[int, ...] = (8, 16, 32, 64)
    tsatt: TsattConfig = field(default_factory=TsattConfig)
    mdd_eps: float = mdd.DEFAULT_EPS
    mdd_per_polarity: bool = False
    seed: int = 0


class TrackModel:
    """One assembled pipeline variant with a flat named parameter registry."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.variant = PipelineVariant(cfg.variant)
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        rng = np.random.default_rng(cfg.seed)

        self.mapper = None
        if self.variant.uses_motion:
            self.mapper = mdd.MotionMapper(
                self.params, eps=cfg.mdd_eps, per_polarity=cfg.mdd_per_polarity)
        self.backbone_cfg = BackboneConfig(
            in_channels=self.variant.in_channels, widths=tuple(cfg.widths))
        self.backbone = Backbone(self.params, self.buffers, self.backbone_cfg, rng)
        self.draft_head = DraftHead(self.params, self.backbone_cfg.out_channels, rng)
        self.fusion = None
        self.tsatt = None
        if self.variant is PipelineVariant.V5:
            self.fusion = MotionFusion(self.params)
        if self.variant.uses_rstr:
            self.tsatt = TsattHead(self.params, cfg.tsatt, cfg.height, cfg.width, rng)

        self.decay_exempt = {
            name for name in self.params
            if name.startswith("mdd.") or name.endswith((".b", ".beta", ".gamma"))
            or "pos_" in name
        }

    # -- input construction --

    def split_frames(self, frames: np.ndarray) -> tuple[Tensor, Tensor, Tensor]:
        """(B, 3 frames, 3 colors, H, W) array -> three constant tensors."""
        f = np.asarray(frames, dtype=np.float64)
        if f.ndim != 5 or f.shape[1] != 3 or f.shape[2] != 3:
            raise dc.ShapeMismatch("pipeline", f"expected (B, 3, 3, H, W), got {f.shape}")
        return dc.const(f[:, 0]), dc.const(f[:, 1]), dc.const(f[:, 2])

    def build_input(self, frames: np.ndarray) -> tuple[Tensor, Tensor | None, Tensor | None]:
        """Return (network input, interval maps t-1->t, interval maps t->t+1)."""
        f0, f1, f2 = self.split_frames(frames)
        if not self.variant.uses_motion:
            return dc.concat([f0, f1, f2]), None, None
        if self.variant is PipelineVariant.V4LIKE:
            a1 = self.mapper.interval_maps_absolute(f0, f1)
            a2 = self.mapper.interval_maps_absolute(f1, f2)
        else:
            a1 = self.mapper.interval_maps(f0, f1)
            a2 = self.mapper.interval_maps(f1, f2)
        return mdd.build_input((f0, f1, f2), a1, a2), a1, a2

    # -- forward --

    def draft_logits(self, frames: np.ndarray, mode: str):
        x, a1, a2 = self.build_input(frames)
        features = self.backbone(x, mode)
        draft = self.draft_head(features)
        if self.fusion is not None:
            draft = self.fusion(draft, a1, a2)
        return draft

    def forward(self, frames: np.ndarray, mode: str, mask_seed: int = 0) -> Tensor:
        """Probability heatmaps (B, 3, H, W) for a batch of frame triplets."""
        draft = self.draft_logits(frames, mode)
        if self.tsatt is None:
            return dc.sigmoid(draft)
        base = stochastic_mask(draft, self.cfg.tsatt.mask_rate, mode, mask_seed)
        delta = self.tsatt(base)
        return refine(base, delta)

    def batch_norms(self):
        return self.backbone.batch_norms()

    def sync_batchnorm_to_batch(self, frames: np.ndarray, mask_seed: int = 0) -> None:
        """Copy the batch statistics of one train forward into the running
        buffers, making a subsequent train and infer forward agree exactly."""
        self.forward(frames, "train", mask_seed=mask_seed)
        for bn in self.batch_norms():
            bn.running_mean[:] = bn.last_mean
            bn.running_var[:] = bn.last_var

    # -- accounting --

    def flop_items(self, input_shape: tuple[int, ...]):
        b, c, h, w = input_shape
        items = list(self.backbone.flop_items((b, self.variant.in_channels, h, w)))
        items.append(("conv", self.backbone_cfg.out_channels, 3, 1, 1, h, w))
        if self.fusion is not None:
            items.append(("conv", 7, 3, 1, 1, h, w))
        if self.tsatt is not None:
            items.extend(self.tsatt.flop_items())
        return items
