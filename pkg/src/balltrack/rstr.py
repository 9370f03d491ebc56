"""Residual spatio-temporal refinement of draft heatmaps.

The decoder features are compressed to 3-channel logit drafts, fused with
the motion attention maps, optionally corrupted by training-only dropout,
and corrected by a small factorized-attention Transformer that predicts an
additive residual.  The final probability map is sigmoid(draft + residual).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .layers import LayerNorm, Linear, register


@dataclass
class TsattConfig:
    patch: int = 8
    dim: int = 16
    heads: int = 4
    mask_rate: float = 0.1
    temporal_first: bool = True

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if not 0.0 <= self.mask_rate < 1.0:
            raise ValueError(f"mask rate must be in [0, 1), got {self.mask_rate}")


class DraftHead:
    """1x1 convolution from decoder features to 3 per-frame logit channels."""

    def __init__(self, params: dict, cin: int, rng: np.random.Generator,
                 name: str = "draft"):
        from .layers import Conv2d
        self.conv = Conv2d(params, name, cin, 3, 1, rng)

    def __call__(self, features: Tensor) -> Tensor:
        return self.conv(features)


class MotionFusion:
    """Learnable 1x1 fusion of drafts with the two attention stacks.

    Initialized so drafts pass through unchanged and attention channels
    contribute nothing; training can then learn spatial gating without ever
    being able to destroy drafts in motionless regions at the start.
    """

    def __init__(self, params: dict, name: str = "fusion"):
        w = np.zeros((3, 7, 1, 1))
        for i in range(3):
            w[i, i, 0, 0] = 1.0
        self.w = register(params, f"{name}.w", w)
        self.b = register(params, f"{name}.b", np.zeros(3))

    def __call__(self, draft: Tensor, a1: Tensor, a2: Tensor) -> Tensor:
        if draft.shape[2:] != a1.shape[2:] or draft.shape[2:] != a2.shape[2:]:
            raise dc.ShapeMismatch(
                "fuse_motion", f"spatial dims differ: {draft.shape}, {a1.shape}, {a2.shape}")
        stacked = dc.concat([draft, a1, a2])
        return dc.conv2d(stacked, self.w, self.b)


def stochastic_mask(x: Tensor, rate: float, mode: str, seed: int) -> Tensor:
    """Training-only context masking; identity at inference for any rate."""
    if rate >= 1.0:
        raise dc.DiffcoreError(f"mask rate must be < 1, got {rate}")
    return dc.dropout(x, rate, mode, seed)


def refine(base: Tensor, delta: Tensor) -> Tensor:
    """Final heatmaps: sigmoid(base + delta), strictly inside (0, 1)."""
    if base.shape != delta.shape:
        raise dc.ShapeMismatch("refine", f"{base.shape} vs {delta.shape}")
    return dc.sigmoid(dc.add(base, delta))


class _AttentionBlock:
    """Pre-norm multi-head self-attention plus a width-2d feed-forward."""

    def __init__(self, params: dict, name: str, dim: int, heads: int,
                 rng: np.random.Generator):
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.norm1 = LayerNorm(params, f"{name}.norm1", dim)
        self.wq = Linear(params, f"{name}.q", dim, dim, rng)
        self.wk = Linear(params, f"{name}.k", dim, dim, rng)
        self.wv = Linear(params, f"{name}.v", dim, dim, rng)
        self.wo = Linear(params, f"{name}.out", dim, dim, rng)
        self.norm2 = LayerNorm(params, f"{name}.norm2", dim)
        self.ff1 = Linear(params, f"{name}.ff1", dim, 2 * dim, rng)
        self.ff2 = Linear(params, f"{name}.ff2", 2 * dim, dim, rng)

    def _split(self, x: Tensor) -> Tensor:
        b1, b2, n, _ = x.shape
        x = dc.reshape(x, (b1, b2, n, self.heads, self.head_dim))
        return dc.transpose(x, (0, 1, 3, 2, 4))

    def _merge(self, x: Tensor) -> Tensor:
        b1, b2, h, n, hd = x.shape
        x = dc.transpose(x, (0, 1, 3, 2, 4))
        return dc.reshape(x, (b1, b2, n, h * hd))

    def attend(self, x: Tensor) -> Tensor:
        h = self.norm1(x)
        q, k, v = self._split(self.wq(h)), self._split(self.wk(h)), self._split(self.wv(h))
        kt = dc.transpose(k, (0, 1, 2, 4, 3))
        scores = dc.scale(dc.matmul(q, kt), 1.0 / np.sqrt(self.head_dim))
        ctx = dc.matmul(dc.softmax(scores), v)
        return dc.add(x, self.wo(self._merge(ctx)))

    def feed_forward(self, x: Tensor) -> Tensor:
        h = self.ff2(dc.relu(self.ff1(self.norm2(x))))
        return dc.add(x, h)

    def __call__(self, x: Tensor) -> Tensor:
        """x: (batch1, batch2, seq, dim); attention runs over seq."""
        return self.feed_forward(self.attend(x))


class TsattHead:
    """Factorized spatio-temporal Transformer estimating the correction map.

    Pipeline: patchify each frame channel, project patches to the embedding
    dim, add factorized spatial/temporal positional encodings, run one
    temporal and one spatial attention block, then project tokens back to
    patch pixels.  The output projection starts at zero so the correction is
    exactly zero at initialization.
    """

    FRAMES = 3

    def __init__(self, params: dict, cfg: TsattConfig, height: int, width: int,
                 rng: np.random.Generator, name: str = "tsatt"):
        if height % cfg.patch or width % cfg.patch:
            raise dc.ShapeMismatch(
                "tsatt", f"{height}x{width} not divisible by patch {cfg.patch}")
        self.cfg = cfg
        self.height = height
        self.width = width
        self.grid = (height // cfg.patch) * (width // cfg.patch)
        p2 = cfg.patch * cfg.patch
        self.embed = Linear(params, f"{name}.embed", p2, cfg.dim, rng)
        self.pos_spatial = register(
            params, f"{name}.pos_spatial", 0.02 * rng.standard_normal((self.grid, cfg.dim)))
        self.pos_temporal = register(
            params, f"{name}.pos_temporal", 0.02 * rng.standard_normal((self.FRAMES, 1, cfg.dim)))
        self.block_t = _AttentionBlock(params, f"{name}.temporal", cfg.dim, cfg.heads, rng)
        self.block_s = _AttentionBlock(params, f"{name}.spatial", cfg.dim, cfg.heads, rng)
        self.norm_out = LayerNorm(params, f"{name}.norm_out", cfg.dim)
        self.proj = Linear(params, f"{name}.proj", cfg.dim, p2, rng, zero_init=True)

    def token_count(self) -> int:
        return self.FRAMES * self.grid

    def embed_tokens(self, x: Tensor) -> Tensor:
        """(B, 3, H, W) -> (B, 3, S, d) tokens with positional encodings."""
        if x.data.ndim != 4 or x.shape[1] != self.FRAMES:
            raise dc.ShapeMismatch("tsatt", f"expected (B, 3, H, W), got {x.shape}")
        if x.shape[2] != self.height or x.shape[3] != self.width:
            raise dc.ShapeMismatch(
                "tsatt", f"configured for {self.height}x{self.width}, got {x.shape[2]}x{x.shape[3]}")
        b = x.shape[0]
        tok = dc.patchify(x, self.cfg.patch)
        tok = self.embed(tok)
        t4 = dc.reshape(tok, (b, self.FRAMES, self.grid, self.cfg.dim))
        t4 = dc.add(t4, self.pos_spatial)
        return dc.add(t4, self.pos_temporal)

    def temporal_stage(self, t4: Tensor) -> Tensor:
        """Attention among the 3 tokens sharing each spatial index."""
        x = dc.transpose(t4, (0, 2, 1, 3))  # (B, S, 3, d)
        x = self.block_t(x)
        return dc.transpose(x, (0, 2, 1, 3))

    def spatial_stage(self, t4: Tensor) -> Tensor:
        """Attention among all spatial tokens within each frame."""
        return self.block_s(t4)

    def decode(self, t4: Tensor) -> Tensor:
        b = t4.shape[0]
        tok = dc.reshape(t4, (b, self.token_count(), self.cfg.dim))
        pix = self.proj(self.norm_out(tok))
        return dc.unpatchify(pix, self.cfg.patch, self.height, self.width)

    def __call__(self, x: Tensor) -> Tensor:
        t4 = self.embed_tokens(x)
        stages = (self.temporal_stage, self.spatial_stage)
        if not self.cfg.temporal_first:
            stages = (self.spatial_stage, self.temporal_stage)
        for stage in stages:
            t4 = stage(t4)
        return self.decode(t4)

    def flop_items(self):
        n = self.token_count()
        d = self.cfg.dim
        p2 = self.cfg.patch * self.cfg.patch
        items = [("linear", n, p2, d)]
        for seq in (self.FRAMES, self.grid):
            items.append(("attention", n, d, seq))
            items.append(("linear", n, d, 2 * d))
            items.append(("linear", n, 2 * d, d))
        items.append(("linear", n, d, p2))
        return items
