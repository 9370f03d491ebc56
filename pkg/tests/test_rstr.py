"""Refinement head tests: drafts, fusion, masking, attention, mode parity."""

import numpy as np
import pytest

import balltrack.diffcore as dc
from balltrack.layers import Conv2d
from balltrack.rstr import (DraftHead, MotionFusion, TsattConfig, TsattHead,
                            refine, stochastic_mask)


def test_draft_shape():
    params = {}
    head = DraftHead(params, 8, np.random.default_rng(0))
    out = head(dc.const(np.zeros((1, 8, 48, 64))))
    assert out.shape == (1, 3, 48, 64)


def test_draft_zero_weights_gives_bias_map():
    params = {}
    head = DraftHead(params, 8, np.random.default_rng(0))
    head.conv.set_weights(np.zeros((3, 8, 1, 1)), [0.3, -0.1, 2.0])
    out = head(dc.const(np.random.default_rng(1).uniform(0, 1, (1, 8, 6, 6))))
    for c, b in enumerate([0.3, -0.1, 2.0]):
        np.testing.assert_array_equal(out.data[0, c], b)


def test_draft_linearity():
    rng = np.random.default_rng(7)
    params = {}
    head = DraftHead(params, 8, rng)
    f1 = rng.standard_normal((1, 8, 6, 6))
    f2 = rng.standard_normal((1, 8, 6, 6))
    lhs = head(dc.const(f1 + f2)).data
    rhs = head(dc.const(f1)).data + head(dc.const(f2)).data - head.conv.b.data.reshape(1, 3, 1, 1)
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_fusion_identity_at_initialization():
    rng = np.random.default_rng(2)
    params = {}
    fusion = MotionFusion(params)
    draft = dc.const(rng.standard_normal((2, 3, 8, 8)))
    a1 = dc.const(rng.uniform(0, 1, (2, 2, 8, 8)))
    a2 = dc.const(rng.uniform(0, 1, (2, 2, 8, 8)))
    out = fusion(draft, a1, a2)
    np.testing.assert_array_equal(out.data, draft.data)
    assert fusion.w.shape == (3, 7, 1, 1)  # channel arithmetic 3+2+2 -> 7 -> 3


def test_fusion_perturbed_weights_respond_to_localized_motion():
    rng = np.random.default_rng(11)
    params = {}
    fusion = MotionFusion(params)
    fusion.w.data = fusion.w.data + 0.1 * rng.standard_normal(fusion.w.shape)
    draft = dc.const(np.zeros((1, 3, 8, 8)))
    a_flat = np.full((1, 2, 8, 8), 0.5)
    a_spot = a_flat.copy()
    a_spot[0, :, 2, 3] = 1.0  # localized motion
    base = fusion(draft, dc.const(a_flat), dc.const(a_flat)).data
    bump = fusion(draft, dc.const(a_spot), dc.const(a_flat)).data
    diff = np.abs(bump - base).sum(axis=1)[0]
    assert diff[2, 3] > 0
    diff[2, 3] = 0
    np.testing.assert_array_equal(diff, 0.0)


def test_mask_infer_identity_any_rate():
    rng = np.random.default_rng(3)
    x = dc.const(rng.standard_normal((1, 3, 8, 8)))
    for rate in (0.0, 0.1, 0.9):
        np.testing.assert_array_equal(stochastic_mask(x, rate, "infer", 5).data, x.data)


def test_mask_train_rate_zero_identity():
    rng = np.random.default_rng(4)
    x = dc.const(rng.standard_normal((1, 3, 8, 8)))
    np.testing.assert_array_equal(stochastic_mask(x, 0.0, "train", 5).data, x.data)


def test_mask_rate_statistics():
    x = dc.const(np.ones((10, 10, 10, 100)))  # 1e5 elements
    out = stochastic_mask(x, 0.1, "train", 3).data
    zeroed = np.count_nonzero(out == 0.0) / out.size
    assert abs(zeroed - 0.1) <= 0.01
    survivors = out[out != 0.0]
    np.testing.assert_allclose(survivors, 1.0 / 0.9, atol=1e-12)


def test_mask_rejects_rate_one():
    with pytest.raises(dc.DiffcoreError):
        stochastic_mask(dc.const(np.ones(3)), 1.0, "train", 0)


def _head(h=48, w=64, cfg=None, seed=0):
    params = {}
    head = TsattHead(params, cfg or TsattConfig(patch=4, dim=16, heads=4),
                     h, w, np.random.default_rng(seed))
    return head, params


def test_token_count():
    head, _ = _head(48, 64, TsattConfig(patch=4, dim=16, heads=4))
    assert head.grid == (48 // 4) * (64 // 4) == 192
    assert head.token_count() == 576


def test_divisibility_enforced():
    with pytest.raises(dc.ShapeMismatch):
        _head(50, 64, TsattConfig(patch=4, dim=16, heads=4))


def test_zero_initialized_residual():
    rng = np.random.default_rng(5)
    head, _ = _head(16, 16, TsattConfig(patch=4, dim=8, heads=2))
    out = head(dc.const(rng.standard_normal((2, 3, 16, 16))))
    np.testing.assert_array_equal(out.data, 0.0)
    assert out.shape == (2, 3, 16, 16)


def test_temporal_block_permutation_equivariance():
    rng = np.random.default_rng(5)
    head, params = _head(16, 16, TsattConfig(patch=4, dim=8, heads=2))
    for t in params.values():  # random weights, seed 5
        t.data = rng.standard_normal(t.data.shape) * 0.3
    x = dc.const(rng.standard_normal((2, 3, 16, 16)))
    t4 = head.embed_tokens(x)
    perm = rng.permutation(head.grid)
    out = head.temporal_stage(t4).data
    permuted_in = dc.const(t4.data[:, :, perm, :])
    out_perm = head.temporal_stage(permuted_in).data
    np.testing.assert_allclose(out_perm, out[:, :, perm, :], atol=1e-12)


def test_refine_zero_delta_is_sigmoid_of_draft():
    rng = np.random.default_rng(6)
    base = rng.standard_normal((1, 3, 8, 8))
    out = refine(dc.const(base), dc.const(np.zeros_like(base)))
    np.testing.assert_allclose(out.data, 1 / (1 + np.exp(-base)), atol=1e-15)


def test_refine_open_interval():
    rng = np.random.default_rng(7)
    out = refine(dc.const(rng.standard_normal((1, 3, 6, 6)) * 50),
                 dc.const(rng.standard_normal((1, 3, 6, 6)) * 50))
    assert np.all(out.data > 0) and np.all(out.data < 1)


def test_refine_shape_mismatch():
    with pytest.raises(dc.ShapeMismatch):
        refine(dc.const(np.zeros((1, 3, 4, 4))), dc.const(np.zeros((1, 3, 4, 5))))


def test_head_differentiability_tiny_config():
    rng = np.random.default_rng(8)
    head, params = _head(8, 8, TsattConfig(patch=4, dim=8, heads=2))
    for t in params.values():
        t.data = rng.standard_normal(t.data.shape) * 0.2  # livens the zero proj
    x = rng.standard_normal((1, 3, 8, 8))
    weights = rng.standard_normal((1, 3, 8, 8))
    target = params["tsatt.spatial.q.w"]

    def fn(pt):
        saved = target.data
        target.data = pt.data
        head.block_s.wq.w = pt
        out = head(dc.const(x))
        y = dc.sum_all(dc.multiply(out, dc.const(weights)))
        target.data = saved
        head.block_s.wq.w = target
        return y

    assert dc.finite_diff_check(fn, target.data.copy(), 1e-4) < 1e-4


def test_mode_consistency_with_zero_mask_rate():
    # full refine path: with rate 0, train equals infer exactly
    rng = np.random.default_rng(9)
    head, params = _head(16, 16, TsattConfig(patch=4, dim=8, heads=2, mask_rate=0.0))
    for t in params.values():
        t.data = rng.standard_normal(t.data.shape) * 0.2
    draft = dc.const(rng.standard_normal((2, 3, 16, 16)))

    def path(mode):
        base = stochastic_mask(draft, 0.0, mode, seed=17)
        return refine(base, head(base)).data

    np.testing.assert_array_equal(path("train"), path("infer"))
