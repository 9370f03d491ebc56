"""Variant wiring tests: channel arithmetic, shapes, cold-start identity."""

import numpy as np
import pytest

import balltrack.diffcore as dc
from balltrack.pipeline import ModelConfig, PipelineVariant, TrackModel
from balltrack.rstr import TsattConfig

TINY = dict(height=16, width=16, widths=(2, 4),
            tsatt=TsattConfig(patch=4, dim=8, heads=2))


def tiny_model(variant, seed=0, **kw):
    cfg = dict(TINY)
    cfg.update(kw)
    return TrackModel(ModelConfig(variant=PipelineVariant(variant), seed=seed, **cfg))


def frames_batch(rng, b=2, h=16, w=16):
    return rng.uniform(0, 1, (b, 3, 3, h, w))


@pytest.mark.parametrize("variant,channels", [
    ("v2", 9), ("v4like", 13), ("v2_mdd", 13), ("v2_rstr", 9), ("v5", 13),
])
def test_variant_channel_arithmetic(variant, channels):
    model = tiny_model(variant)
    assert model.variant.in_channels == channels
    rng = np.random.default_rng(0)
    x, _, _ = model.build_input(frames_batch(rng))
    assert x.shape[1] == channels


@pytest.mark.parametrize("variant", ["v2", "v4like", "v2_mdd", "v2_rstr", "v5"])
def test_outputs_match_input_resolution(variant):
    model = tiny_model(variant)
    rng = np.random.default_rng(1)
    out = model.forward(frames_batch(rng), "infer")
    assert out.shape == (2, 3, 16, 16)
    assert np.all(out.data > 0) and np.all(out.data < 1)


def test_motion_params_only_on_motion_variants():
    assert "mdd.alpha" in tiny_model("v5").params
    assert "mdd.alpha" not in tiny_model("v2").params
    assert "mdd.alpha" not in tiny_model("v2_rstr").params
    assert "fusion.w" in tiny_model("v5").params
    assert "fusion.w" not in tiny_model("v2_rstr").params  # no maps to fuse


def test_mdd_alone_counts_two_params():
    import balltrack.mdd as mdd
    params = {}
    mdd.MotionMapper(params)
    assert dc.count_params(params) == 2


def test_cold_start_identity():
    # at init: identity fusion, zero residual -> H = sigmoid(draft)
    model = tiny_model("v5", seed=3)
    rng = np.random.default_rng(4)
    frames = frames_batch(rng)
    out = model.forward(frames, "infer")
    draft = model.draft_logits(frames, "infer")
    np.testing.assert_array_equal(out.data, dc.sigmoid(draft).data)


def test_train_equals_infer_with_zero_mask_rate():
    # with rate 0, the only train/infer gap is batch-norm statistics; after
    # syncing the running buffers to the batch, both paths agree exactly
    model = tiny_model("v5", seed=5,
                       tsatt=TsattConfig(patch=4, dim=8, heads=2, mask_rate=0.0))
    rng = np.random.default_rng(6)
    frames = frames_batch(rng)
    model.sync_batchnorm_to_batch(frames)
    infer_out = model.forward(frames, "infer").data
    train_out = model.forward(frames, "train", mask_seed=11).data
    np.testing.assert_array_equal(train_out, infer_out)


def test_seed_determinism_of_initialization():
    a = tiny_model("v5", seed=7)
    b = tiny_model("v5", seed=7)
    for name in a.params:
        np.testing.assert_array_equal(a.params[name].data, b.params[name].data)
    c = tiny_model("v5", seed=8)
    assert any(not np.array_equal(a.params[n].data, c.params[n].data) for n in a.params)


def test_v4like_motion_channels_identical_pairwise():
    model = tiny_model("v4like")
    rng = np.random.default_rng(9)
    x, a1, a2 = model.build_input(frames_batch(rng))
    np.testing.assert_array_equal(x.data[:, 3], x.data[:, 4])
    np.testing.assert_array_equal(x.data[:, 8], x.data[:, 9])


def test_flops_overhead_of_full_model_under_ten_percent():
    shape = (1, 3, 48, 64)
    v5 = TrackModel(ModelConfig(variant=PipelineVariant.V5, height=48, width=64))
    v2 = TrackModel(ModelConfig(variant=PipelineVariant.V2, height=48, width=64))
    f5 = dc.estimate_flops(v5, shape)
    f2 = dc.estimate_flops(v2, shape)
    assert (f5 - f2) / f2 < 0.10


def test_default_param_count_fixture():
    # computed once from the default desk configuration, then frozen
    model = TrackModel(ModelConfig(variant=PipelineVariant.V5, height=48, width=64))
    assert dc.count_params(model) == 131005
