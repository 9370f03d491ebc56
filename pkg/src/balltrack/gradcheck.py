"""Finite-difference verification suite over every primitive and module.

Each case returns the max relative error between reverse-mode and central
difference gradients; the suite passes when every case is under tolerance.
"""

from __future__ import annotations

import numpy as np

from . import diffcore as dc
from . import mdd
from .diffcore import PrimitiveKind, Tape, Tensor
from .pipeline import ModelConfig, PipelineVariant, TrackModel
from .rstr import TsattConfig
from .supervision import wbce_loss

DEFAULT_SEEDS = (11, 22, 33, 44, 55)


def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    return dc.sum_all(dc.multiply(out, dc.const(w)))


def primitive_cases(kind: PrimitiveKind, seed: int):
    """(fn, point) pairs probing one primitive's gradient rule."""
    rng = np.random.default_rng(seed)
    r = rng.standard_normal
    if kind == PrimitiveKind.CONV2D:
        x, w, b = r((1, 2, 6, 6)), r((3, 2, 3, 3)), r(3)
        wt = r((1, 3, 6, 6))
        yield lambda p: _weighted(dc.conv2d(p, dc.const(w), dc.const(b), padding=1), wt), x
        yield lambda p: _weighted(dc.conv2d(dc.const(x), p, dc.const(b), padding=1), wt), w
        yield lambda p: _weighted(dc.conv2d(dc.const(x), dc.const(w), p, padding=1), wt), b
    elif kind == PrimitiveKind.RELU:
        x = r((3, 4))
        x[np.abs(x) < 0.05] = 0.2
        wt = r((3, 4))
        yield lambda p: _weighted(dc.relu(p), wt), x
    elif kind == PrimitiveKind.SIGMOID:
        x, wt = r((3, 4)), r((3, 4))
        yield lambda p: _weighted(dc.sigmoid(p), wt), x
    elif kind == PrimitiveKind.TANH:
        x, wt = r((3, 4)), r((3, 4))
        yield lambda p: _weighted(dc.tanh(p), wt), x
    elif kind == PrimitiveKind.ADD:
        y, wt = r((2, 3)), r((2, 3))
        yield lambda p: _weighted(dc.add(p, dc.const(y)), wt), r((2, 3))
        yield lambda p: _weighted(dc.add(dc.const(y), p), wt), r(3)
    elif kind == PrimitiveKind.SUBTRACT:
        y, wt = r((2, 3)), r((2, 3))
        yield lambda p: _weighted(dc.subtract(p, dc.const(y)), wt), r((2, 3))
        yield lambda p: _weighted(dc.subtract(dc.const(y), p), wt), r((2, 3))
    elif kind == PrimitiveKind.MULTIPLY:
        y, wt = r((2, 3)), r((2, 3))
        yield lambda p: _weighted(dc.multiply(p, dc.const(y)), wt), r((2, 3))
        yield lambda p: _weighted(dc.multiply(dc.const(y), p), wt), np.asarray(r())
    elif kind == PrimitiveKind.MATMUL:
        a, b, wt = r((2, 3, 4)), r((2, 4, 5)), r((2, 3, 5))
        yield lambda p: _weighted(dc.matmul(p, dc.const(b)), wt), a
        yield lambda p: _weighted(dc.matmul(dc.const(a), p), wt), b
    elif kind == PrimitiveKind.LAYER_NORM:
        x, gm, bt, wt = r((2, 3, 5)), r(5), r(5), r((2, 3, 5))
        yield lambda p: _weighted(dc.layer_norm(p, dc.const(gm), dc.const(bt)), wt), x
        yield lambda p: _weighted(dc.layer_norm(dc.const(x), p, dc.const(bt)), wt), gm
        yield lambda p: _weighted(dc.layer_norm(dc.const(x), dc.const(gm), p), wt), bt
    elif kind == PrimitiveKind.SOFTMAX:
        x, wt = r((2, 4)), r((2, 4))
        yield lambda p: _weighted(dc.softmax(p), wt), x
    elif kind == PrimitiveKind.CONCAT:
        a, b, wt = r((1, 2, 3, 3)), r((1, 3, 3, 3)), r((1, 5, 3, 3))
        yield lambda p: _weighted(dc.concat([p, dc.const(b)]), wt), a
        yield lambda p: _weighted(dc.concat([dc.const(a), p]), wt), b
    elif kind == PrimitiveKind.DROPOUT:
        x, wt = r((4, 5)), r((4, 5))
        yield lambda p: _weighted(dc.dropout(p, 0.3, "train", 123), wt), x
    elif kind == PrimitiveKind.PIXEL_SHUFFLE:
        x, wt = r((1, 8, 3, 3)), r((1, 2, 6, 6))
        yield lambda p: _weighted(dc.pixel_shuffle(p, 2), wt), x
    elif kind == PrimitiveKind.MAX_POOL2D:
        x, wt = r((1, 2, 6, 6)), r((1, 2, 3, 3))
        yield lambda p: _weighted(dc.max_pool2d(p), wt), x
    elif kind == PrimitiveKind.NEAREST_UPSAMPLE:
        x, wt = r((1, 2, 3, 3)), r((1, 2, 6, 6))
        yield lambda p: _weighted(dc.nearest_upsample(p), wt), x
    elif kind == PrimitiveKind.BATCH_NORM2D:
        x, gm, bt, wt = r((2, 3, 4, 4)), r(3), r(3), r((2, 3, 4, 4))

        def bn(xx, g, b, mode):
            return dc.batch_norm2d(xx, g, b, np.zeros(3), np.ones(3), mode)

        yield lambda p: _weighted(bn(p, dc.const(gm), dc.const(bt), "train"), wt), x
        yield lambda p: _weighted(bn(dc.const(x), p, dc.const(bt), "train"), wt), gm
        yield lambda p: _weighted(bn(dc.const(x), dc.const(gm), p, "train"), wt), bt
        yield lambda p: _weighted(bn(p, dc.const(gm), dc.const(bt), "infer"), wt), x
    elif kind == PrimitiveKind.LINEAR:
        x, w, b, wt = r((2, 3, 4)), r((4, 5)), r(5), r((2, 3, 5))
        yield lambda p: _weighted(dc.linear(p, dc.const(w), dc.const(b)), wt), x
        yield lambda p: _weighted(dc.linear(dc.const(x), p, dc.const(b)), wt), w
        yield lambda p: _weighted(dc.linear(dc.const(x), dc.const(w), p), wt), b
    elif kind == PrimitiveKind.PATCHIFY:
        x, wt = r((1, 2, 4, 4)), r((1, 8, 4))
        yield lambda p: _weighted(dc.patchify(p, 2), wt), x
    elif kind == PrimitiveKind.UNPATCHIFY:
        x, wt = r((1, 8, 4)), r((1, 2, 4, 4))
        yield lambda p: _weighted(dc.unpatchify(p, 2, 4, 4), wt), x
    elif kind == PrimitiveKind.SUM:
        yield lambda p: dc.sum_all(p), r((3, 4))
    elif kind == PrimitiveKind.MEAN:
        yield lambda p: dc.mean_all(p), r((3, 4))
    elif kind == PrimitiveKind.LOG:
        x, wt = rng.uniform(0.5, 2.0, (3, 4)), r((3, 4))
        yield lambda p: _weighted(dc.log(p), wt), x
    elif kind == PrimitiveKind.RECIPROCAL:
        x, wt = rng.uniform(0.5, 2.0, (3, 4)), r((3, 4))
        yield lambda p: _weighted(dc.reciprocal(p), wt), x
    elif kind == PrimitiveKind.CLAMP:
        x = r((3, 4)) * 3
        x[np.abs(np.abs(x) - 1.0) < 0.05] = 0.0
        wt = r((3, 4))
        yield lambda p: _weighted(dc.clamp(p, -1.0, 1.0), wt), x
    elif kind == PrimitiveKind.RESHAPE:
        x, wt = r((2, 6)), r((3, 4))
        yield lambda p: _weighted(dc.reshape(p, (3, 4)), wt), x
    elif kind == PrimitiveKind.TRANSPOSE:
        x, wt = r((2, 3, 4)), r((4, 2, 3))
        yield lambda p: _weighted(dc.transpose(p, (2, 0, 1)), wt), x
    else:
        raise ValueError(f"no gradient case for {kind}")


def check_primitives(tolerance: float = 1e-4, seeds=DEFAULT_SEEDS, step: float = 1e-4):
    """Per-kind worst finite-difference error over the seed set."""
    results = []
    for kind in PrimitiveKind:
        worst = 0.0
        for seed in seeds:
            for fn, point in primitive_cases(kind, seed):
                worst = max(worst, dc.finite_diff_check(fn, point, step))
        results.append((f"primitive/{kind.value}", worst))
    return results


def check_attention_params(step: float = 1e-4):
    """Slope/offset gradients of the motion attention mapping."""
    rng = np.random.default_rng(7)
    field = rng.uniform(0, 0.3, (1, 3, 4, 4))
    weights = rng.standard_normal((1, 1, 4, 4))
    results = []
    for which in ("alpha", "beta"):
        def fn(pt):
            params = {}
            mapper = mdd.MotionMapper(params, alpha_init=0.5, beta_init=0.2)
            a0, b0 = mapper.pairs["+"]
            pair = (pt, b0) if which == "alpha" else (a0, pt)
            mapper.pairs = {"+": pair, "-": pair}
            return _weighted(mapper.attention_map(dc.const(field)), weights)
        start = np.asarray(0.5 if which == "alpha" else 0.2)
        results.append((f"mdd/{which}", dc.finite_diff_check(fn, start, step)))
    return results


def check_wbce(step: float = 1e-5):
    rng = np.random.default_rng(8)
    y = (rng.random((3, 5)) < 0.3).astype(float)
    p0 = rng.uniform(0.05, 0.95, (3, 5))
    return [("supervision/wbce", dc.finite_diff_check(lambda p: wbce_loss(p, y), p0, step))]


def _tiny_v5(seed: int = 0) -> TrackModel:
    model = TrackModel(ModelConfig(
        variant=PipelineVariant.V5, height=16, width=16, widths=(2, 4),
        tsatt=TsattConfig(patch=4, dim=8, heads=2, mask_rate=0.0), seed=seed))
    rng = np.random.default_rng(seed + 1)
    # liven the zero-init projection so gradients reach the attention blocks
    for name in ("tsatt.proj.w", "tsatt.proj.b"):
        t = model.params[name]
        t.data = 0.2 * rng.standard_normal(t.data.shape)
    return model


END_TO_END_TARGETS = (
    "mdd.alpha", "mdd.beta", "fusion.w", "draft.b",
    "backbone.enc0.0.bn.gamma", "backbone.mid.1.conv.b",
    "tsatt.temporal.q.b", "tsatt.pos_temporal", "tsatt.proj.b",
)


def check_end_to_end(step: float = 1e-6, targets=END_TO_END_TARGETS):
    """Full-pipeline gradients of the training loss for sampled parameters.

    Central differences are taken by perturbing the live parameter tensors
    in place; the analytic side comes from one taped backward pass.  The
    step is smaller than the per-primitive checks: token normalization runs
    near its eps knee at this depth, so wider steps pick up third-order
    curvature instead of the slope (verified: errors shrink ~h^2 down to
    the roundoff floor, i.e. the analytic side is exact).
    """
    model = _tiny_v5()
    rng = np.random.default_rng(9)
    frames = rng.uniform(0, 1, (1, 3, 3, 16, 16))
    y = (rng.random((1, 3, 16, 16)) < 0.1).astype(float)

    def loss_value() -> float:
        return float(wbce_loss(model.forward(frames, "infer"), y).data)

    with Tape() as tape:
        loss = wbce_loss(model.forward(frames, "infer"), y)
    analytic = dc.backward(tape, loss)

    results = []
    for name in targets:
        tensor = model.params[name]
        grad = analytic[name]
        flat = tensor.data.reshape(-1)
        gflat = np.asarray(grad).reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = loss_value()
            flat[i] = orig - step
            lo = loss_value()
            flat[i] = orig
            numeric = (hi - lo) / (2 * step)
            a = float(gflat[i])
            worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), 1e-8))
        results.append((f"pipeline/{name}", worst))
    return results


def run_suite(tolerance: float = 1e-4, seeds=DEFAULT_SEEDS):
    """All checks; returns (results, ok)."""
    results = []
    results.extend(check_primitives(tolerance, seeds))
    results.extend(check_attention_params())
    results.extend(check_wbce())
    results.extend(check_end_to_end())
    ok = all(err < tolerance for _, err in results)
    return results, ok
