"""Motion direction decoupling.

Frame differences are split into signed polarity fields (brightening vs
darkening), mapped to (0, 1) attention weights by a learnable sigmoid with
data-adaptive slope and offset, and interleaved with the raw frames into a
13-channel network input.
"""

from __future__ import annotations

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

DEFAULT_EPS = 1e-6

# channel layout of the motion-augmented input:
# [frame t-1 (3), attention t-1->t (2), frame t (3), attention t->t+1 (2), frame t+1 (3)]
MOTION_INPUT_CHANNELS = 13
PLAIN_INPUT_CHANNELS = 9


def raw_difference(earlier: Tensor, later: Tensor) -> Tensor:
    """Signed, unclipped difference map: later - earlier."""
    if earlier.shape != later.shape:
        raise dc.ShapeMismatch("raw_difference", f"{earlier.shape} vs {later.shape}")
    return dc.subtract(later, earlier)


def polarity_decompose(delta: Tensor) -> tuple[Tensor, Tensor]:
    """Split a signed difference into nonnegative brightening/darkening fields."""
    return dc.relu(delta), dc.relu(dc.neg(delta))


class MotionMapper:
    """Learnable intensity-to-attention mapping shared by both intervals.

    The slope k and center offset m are reparameterized from two scalars so
    that k stays finite and positive and m stays inside (-0.6, 0.6):

        k = 5.0 / (0.45 * |tanh(alpha)| + eps)
        m = 0.6 * tanh(beta)

    A 3-channel field is reduced to a single intensity channel by a per-pixel
    mean before the mapping, so each interval contributes exactly 2 attention
    channels.  With ``per_polarity`` the two polarities get their own
    (alpha, beta) pairs.
    """

    def __init__(self, params: dict, name: str = "mdd", eps: float = DEFAULT_EPS,
                 per_polarity: bool = False,
                 alpha_init: float = 1.0, beta_init: float = 0.0):
        from .layers import register
        self.eps = eps
        self.per_polarity = per_polarity
        if per_polarity:
            self.pairs = {
                "+": (register(params, f"{name}.alpha_pos", alpha_init),
                      register(params, f"{name}.beta_pos", beta_init)),
                "-": (register(params, f"{name}.alpha_neg", alpha_init),
                      register(params, f"{name}.beta_neg", beta_init)),
            }
        else:
            shared = (register(params, f"{name}.alpha", alpha_init),
                      register(params, f"{name}.beta", beta_init))
            self.pairs = {"+": shared, "-": shared}

    def slope_offset(self, polarity: str = "+") -> tuple[Tensor, Tensor]:
        alpha, beta = self.pairs[polarity]
        at = dc.absolute(dc.tanh(alpha))
        k = dc.multiply(dc.const(5.0),
                        dc.reciprocal(dc.add(dc.scale(at, 0.45), dc.const(self.eps))))
        m = dc.scale(dc.tanh(beta), 0.6)
        return k, m

    def attention_map(self, field: Tensor, polarity: str = "+") -> Tensor:
        """Map a (B, 3, H, W) intensity field to (B, 1, H, W) weights in (0, 1)."""
        if field.data.ndim != 4 or field.shape[1] != 3:
            raise dc.ShapeMismatch("attention_map", f"expected (B, 3, H, W), got {field.shape}")
        # frames carry no gradient, so the color reduction runs on raw data
        intensity = dc.const(field.data.mean(axis=1, keepdims=True))
        k, m = self.slope_offset(polarity)
        return dc.sigmoid(dc.multiply(k, dc.subtract(dc.absolute(intensity), m)))

    def interval_maps(self, earlier: Tensor, later: Tensor) -> Tensor:
        """Polarity-decoupled 2-channel attention stack for one interval."""
        p_plus, p_minus = polarity_decompose(raw_difference(earlier, later))
        return dc.concat([self.attention_map(p_plus, "+"),
                          self.attention_map(p_minus, "-")])

    def interval_maps_absolute(self, earlier: Tensor, later: Tensor) -> Tensor:
        """Direction-blind variant: |difference| through the same mapping,
        duplicated so the channel contract matches the decoupled stack."""
        p_plus, p_minus = polarity_decompose(raw_difference(earlier, later))
        a = self.attention_map(dc.add(p_plus, p_minus), "+")
        return dc.concat([a, a])


def build_input(triplet: tuple[Tensor, Tensor, Tensor], a1: Tensor, a2: Tensor) -> Tensor:
    """Interleave RGB frames with interval attention maps into 13 channels."""
    f0, f1, f2 = triplet
    for t, want in ((f0, 3), (f1, 3), (f2, 3), (a1, 2), (a2, 2)):
        if t.data.ndim != 4 or t.shape[1] != want:
            raise dc.ShapeMismatch("build_input", f"expected {want} channels, got {t.shape}")
        if t.shape[2:] != f0.shape[2:]:
            raise dc.ShapeMismatch("build_input", f"spatial dims differ: {t.shape} vs {f0.shape}")
    return dc.concat([f0, a1, f1, a2, f2])
