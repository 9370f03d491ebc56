"""Multi-frame encoder-decoder backbone.

U-Net topology: each encoder stage is two 3x3 conv+BN+ReLU blocks followed
by 2x2 max pooling; the decoder mirrors it with nearest 2x upsampling and
skip concatenation.  One pass consumes the stacked 3-frame input and emits
a full-resolution feature map for all three frames.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .layers import BatchNorm2d, Conv2d


@dataclass
class BackboneConfig:
    in_channels: int = 13
    widths: tuple[int, ...] = (8, 16, 32, 64)
    convs_per_stage: int = 2

    @property
    def levels(self) -> int:
        return len(self.widths) - 1

    @property
    def divisor(self) -> int:
        return 2 ** self.levels

    @property
    def out_channels(self) -> int:
        return self.widths[0]


class _ConvBlock:
    def __init__(self, params, buffers, name, cin, cout, rng):
        self.conv = Conv2d(params, f"{name}.conv", cin, cout, 3, rng, padding=1)
        self.bn = BatchNorm2d(params, buffers, f"{name}.bn", cout)

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        return dc.relu(self.bn(self.conv(x), mode))


class Backbone:
    def __init__(self, params: dict, buffers: dict, cfg: BackboneConfig,
                 rng: np.random.Generator, name: str = "backbone"):
        self.cfg = cfg
        w = cfg.widths
        self.enc: list[list[_ConvBlock]] = []
        cin = cfg.in_channels
        for i, width in enumerate(w[:-1]):
            stage = []
            for j in range(cfg.convs_per_stage):
                stage.append(_ConvBlock(params, buffers, f"{name}.enc{i}.{j}", cin, width, rng))
                cin = width
            self.enc.append(stage)
        self.bottleneck = []
        for j in range(cfg.convs_per_stage):
            self.bottleneck.append(_ConvBlock(params, buffers, f"{name}.mid.{j}", cin, w[-1], rng))
            cin = w[-1]
        self.dec: list[list[_ConvBlock]] = []
        for i in reversed(range(len(w) - 1)):
            skip = w[i]
            stage = []
            merged = cin + skip
            for j in range(cfg.convs_per_stage):
                stage.append(_ConvBlock(params, buffers, f"{name}.dec{i}.{j}", merged, w[i], rng))
                merged = w[i]
            # skip integrity: decoder input = upsampled channels + encoder stage channels
            assert stage[0].conv.w.shape[1] == cin + skip
            self.dec.append(stage)
            cin = w[i]

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        b, c, h, w = x.shape
        d = self.cfg.divisor
        if h % d or w % d:
            raise dc.ShapeMismatch(
                "backbone", f"input {h}x{w} must be divisible by {d} ({self.cfg.levels} pooling levels)")
        if c != self.cfg.in_channels:
            raise dc.ShapeMismatch("backbone", f"expected {self.cfg.in_channels} channels, got {c}")
        skips = []
        for stage in self.enc:
            for block in stage:
                x = block(x, mode)
            skips.append(x)
            x = dc.max_pool2d(x)
        for block in self.bottleneck:
            x = block(x, mode)
        for stage, skip in zip(self.dec, reversed(skips)):
            x = dc.concat([dc.nearest_upsample(x), skip])
            for block in stage:
                x = block(x, mode)
        return x

    def batch_norms(self):
        for stage in self.enc + [self.bottleneck] + self.dec:
            for block in stage:
                yield block.bn

    def flop_items(self, input_shape: tuple[int, ...]):
        _, _, h, w = input_shape
        items = []
        cin = self.cfg.in_channels
        widths = self.cfg.widths
        hh, ww = h, w
        for width in widths[:-1]:
            for _ in range(self.cfg.convs_per_stage):
                items.append(("conv", cin, width, 3, 3, hh, ww))
                cin = width
            hh, ww = hh // 2, ww // 2
        for _ in range(self.cfg.convs_per_stage):
            items.append(("conv", cin, widths[-1], 3, 3, hh, ww))
            cin = widths[-1]
        for width in reversed(widths[:-1]):
            hh, ww = hh * 2, ww * 2
            merged = cin + width
            for _ in range(self.cfg.convs_per_stage):
                items.append(("conv", merged, width, 3, 3, hh, ww))
                merged = width
            cin = width
        return items
