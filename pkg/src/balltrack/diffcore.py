"""Minimal differentiable tensor core.

A fixed set of primitive operations, each with a forward rule and an exact
reverse-mode gradient rule, recorded on an explicit tape.  Values are numpy
float64 arrays; the pipeline's universal value type is the rank-4 image
tensor (batch, channel, height, width), with rank-3 token tensors
(batch, token, feature) appearing inside attention blocks.

Gradients flow tape-backwards through closures, micrograd-style; the tape's
append order is the topological order, so no graph search is needed.
"""

from __future__ import annotations

from enum import Enum
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

Array = np.ndarray

_SIG_LO = 1e-300
_SIG_HI = float(np.nextafter(1.0, 0.0))


class DiffcoreError(Exception):
    """Base class for tensor-core failures."""


class ShapeMismatch(DiffcoreError):
    """Inputs to a primitive have incompatible shapes."""

    def __init__(self, kind: str, detail: str):
        super().__init__(f"{kind}: {detail}")
        self.kind = kind
        self.detail = detail


class NonFiniteError(DiffcoreError):
    """A primitive received (or would produce) NaN/Inf values."""


class TapeError(DiffcoreError):
    """Backward pass requested on an invalid tape/loss combination."""


class Tensor:
    """A value node: float64 data plus autodiff bookkeeping.

    Tensors are immutable by convention once created; parameter updates
    replace ``data`` in place only between recorded passes.
    """

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag})"


def const(data) -> Tensor:
    return Tensor(data)


def param(data, name: str) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


class TapeEntry:
    """One executed primitive: saved inputs/output plus its gradient rule."""

    __slots__ = ("kind", "inputs", "output", "backward", "recompute")

    def __init__(self, kind: str, inputs: tuple[Tensor, ...], output: Tensor,
                 backward: Callable[[Array], tuple[Array | None, ...]],
                 recompute: Callable[[], Array]):
        self.kind = kind
        self.inputs = inputs
        self.output = output
        self.backward = backward
        self.recompute = recompute


_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of primitive applications.

    Entries are appended in execution order, which is a topological order by
    construction.  A tape is confined to one thread; the gradient map
    returned by :func:`backward` is a fresh dict of fresh arrays.
    """

    def __init__(self, check_finite: bool = True):
        self.entries: list[TapeEntry] = []
        self.check_finite = check_finite

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.pop()

    def __len__(self) -> int:
        return len(self.entries)

    def replay_max_abs_diff(self) -> float:
        """Re-run every recorded forward; return the max |replay - recorded|.

        Zero means the tape reproduces itself bit-exactly.
        """
        worst = 0.0
        for e in self.entries:
            again = e.recompute()
            if again.shape != e.output.data.shape:
                return float("inf")
            d = float(np.max(np.abs(again - e.output.data))) if again.size else 0.0
            worst = max(worst, d)
        return worst


def active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def _record(kind: str, inputs: tuple[Tensor, ...], out: Tensor, backward, recompute) -> None:
    t = active_tape()
    if t is not None:
        t.entries.append(TapeEntry(kind, inputs, out, backward, recompute))


def _check_finite(kind: str, *tensors: Tensor) -> None:
    t = active_tape()
    if t is not None and not t.check_finite:
        return
    for x in tensors:
        if not np.isfinite(x.data).all():
            raise NonFiniteError(f"{kind}: non-finite input values")


def _make(inputs: tuple[Tensor, ...], data: Array) -> Tensor:
    return Tensor(data, requires_grad=any(i.requires_grad for i in inputs))


def _reduce_to_shape(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum a gradient over axes that numpy broadcasting expanded."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gd, sd) in enumerate(zip(g.shape, shape)) if sd == 1 and gd != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise primitives


def relu(x: Tensor) -> Tensor:
    _check_finite("relu", x)
    out = _make((x,), np.maximum(x.data, 0.0))
    mask = x.data > 0  # gradient at exactly 0 is defined as 0
    _record("relu", (x,), out,
            lambda g: (g * mask,),
            lambda: np.maximum(x.data, 0.0))
    return out


def _sigmoid_fwd(v: Array) -> Array:
    z = np.exp(-np.abs(v))
    y = np.where(v >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    # keep the open-interval contract even where rounding saturates
    return np.clip(y, _SIG_LO, _SIG_HI)


def sigmoid(x: Tensor) -> Tensor:
    _check_finite("sigmoid", x)
    y = _sigmoid_fwd(x.data)
    out = _make((x,), y)
    _record("sigmoid", (x,), out,
            lambda g: (g * y * (1.0 - y),),
            lambda: _sigmoid_fwd(x.data))
    return out


def tanh(x: Tensor) -> Tensor:
    _check_finite("tanh", x)
    y = np.tanh(x.data)
    out = _make((x,), y)
    _record("tanh", (x,), out,
            lambda g: (g * (1.0 - y * y),),
            lambda: np.tanh(x.data))
    return out


def log(x: Tensor) -> Tensor:
    _check_finite("log", x)
    if np.any(x.data <= 0.0):
        raise NonFiniteError("log: input must be strictly positive")
    out = _make((x,), np.log(x.data))
    _record("log", (x,), out,
            lambda g: (g / x.data,),
            lambda: np.log(x.data))
    return out


def reciprocal(x: Tensor) -> Tensor:
    _check_finite("reciprocal", x)
    if np.any(x.data == 0.0):
        raise NonFiniteError("reciprocal: input contains zeros")
    y = 1.0 / x.data
    out = _make((x,), y)
    _record("reciprocal", (x,), out,
            lambda g: (-g * y * y,),
            lambda: 1.0 / x.data)
    return out


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    if not lo < hi:
        raise ShapeMismatch("clamp", f"empty interval [{lo}, {hi}]")
    _check_finite("clamp", x)
    y = np.clip(x.data, lo, hi)
    out = _make((x,), y)
    mask = (x.data > lo) & (x.data < hi)
    _record("clamp", (x,), out,
            lambda g: (g * mask,),
            lambda: np.clip(x.data, lo, hi))
    return out


def _binary(kind: str, a: Tensor, b: Tensor, fwd, bwd) -> Tensor:
    _check_finite(kind, a, b)
    try:
        data = fwd(a.data, b.data)
    except ValueError as exc:
        raise ShapeMismatch(kind, f"shapes {a.shape} vs {b.shape}: {exc}") from exc
    out = _make((a, b), data)
    _record(kind, (a, b), out, bwd, lambda: fwd(a.data, b.data))
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    return _binary("add", a, b, np.add,
                   lambda g: (_reduce_to_shape(g, a.shape), _reduce_to_shape(g, b.shape)))


def subtract(a: Tensor, b: Tensor) -> Tensor:
    return _binary("subtract", a, b, np.subtract,
                   lambda g: (_reduce_to_shape(g, a.shape), _reduce_to_shape(-g, b.shape)))


def multiply(a: Tensor, b: Tensor) -> Tensor:
    return _binary("multiply", a, b, np.multiply,
                   lambda g: (_reduce_to_shape(g * b.data, a.shape),
                              _reduce_to_shape(g * a.data, b.shape)))


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar (sugar over multiply with a constant)."""
    return multiply(x, const(float(c)))


def neg(x: Tensor) -> Tensor:
    return scale(x, -1.0)


def absolute(x: Tensor) -> Tensor:
    """|x| composed from relu so the subgradient at 0 is 0."""
    return add(relu(x), relu(neg(x)))


# ---------------------------------------------------------------------------
# reductions


def sum_all(x: Tensor) -> Tensor:
    _check_finite("sum", x)
    out = _make((x,), np.asarray(x.data.sum()))
    _record("sum", (x,), out,
            lambda g: (np.broadcast_to(g, x.shape).copy(),),
            lambda: np.asarray(x.data.sum()))
    return out


def mean_all(x: Tensor) -> Tensor:
    _check_finite("mean", x)
    n = x.data.size
    out = _make((x,), np.asarray(x.data.mean()))
    _record("mean", (x,), out,
            lambda g: (np.broadcast_to(g / n, x.shape).copy(),),
            lambda: np.asarray(x.data.mean()))
    return out


# ---------------------------------------------------------------------------
# token-shaped primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over matching leading dims."""
    if a.data.ndim < 2 or b.data.ndim < 2 or a.data.ndim != b.data.ndim:
        raise ShapeMismatch("matmul", f"ranks {a.data.ndim} vs {b.data.ndim}")
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch("matmul", f"shapes {a.shape} vs {b.shape}")
    _check_finite("matmul", a, b)
    data = a.data @ b.data
    out = _make((a, b), data)

    def bwd(g: Array):
        return (g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g)

    _record("matmul", (a, b), out, bwd, lambda: a.data @ b.data)
    return out


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Token-wise affine map: (..., Din) @ (Din, Dout) + (Dout,)."""
    if w.data.ndim != 2 or x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeMismatch("linear", f"x {x.shape}, w {w.shape}, b {b.shape}")
    _check_finite("linear", x, w, b)
    data = x.data @ w.data + b.data
    out = _make((x, w, b), data)
    din, dout = w.shape

    def bwd(g: Array):
        g2 = g.reshape(-1, dout)
        x2 = x.data.reshape(-1, din)
        return (g @ w.data.T, x2.T @ g2, g2.sum(axis=0))

    _record("linear", (x, w, b), out, bwd, lambda: x.data @ w.data + b.data)
    return out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-token normalization over the last axis, with learnable affine."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeMismatch("layer_norm", f"x {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    _check_finite("layer_norm", x, gamma, beta)

    def fwd():
        mu = x.data.mean(axis=-1, keepdims=True)
        dev = x.data - mu
        var = np.mean(dev * dev, axis=-1, keepdims=True)
        return dev / np.sqrt(var + eps)

    y = fwd()
    out = _make((x, gamma, beta), y * gamma.data + beta.data)
    mu = x.data.mean(axis=-1, keepdims=True)
    dev = x.data - mu
    inv = 1.0 / np.sqrt(np.mean(dev * dev, axis=-1, keepdims=True) + eps)

    def bwd(g: Array):
        dy = g * gamma.data
        dx = inv * (dy - dy.mean(axis=-1, keepdims=True)
                    - y * (dy * y).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return (dx, (g * y).sum(axis=lead), g.sum(axis=lead))

    _record("layer_norm", (x, gamma, beta), out, bwd,
            lambda: fwd() * gamma.data + beta.data)
    return out


def softmax(x: Tensor) -> Tensor:
    """Numerically stable softmax over the last axis."""
    _check_finite("softmax", x)

    def fwd():
        z = x.data - x.data.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)

    y = fwd()
    out = _make((x,), y)
    _record("softmax", (x,), out,
            lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),),
            fwd)
    return out


# ---------------------------------------------------------------------------
# layout primitives


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape, dtype=np.int64)) != x.size and -1 not in shape:
        raise ShapeMismatch("reshape", f"{x.shape} -> {shape}")
    data = x.data.reshape(shape)
    out = _make((x,), data)
    _record("reshape", (x,), out,
            lambda g: (g.reshape(x.shape),),
            lambda: x.data.reshape(shape))
    return out


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.data.ndim)):
        raise ShapeMismatch("transpose", f"axes {axes} for rank {x.data.ndim}")
    inv = tuple(np.argsort(axes))
    out = _make((x,), x.data.transpose(axes))
    _record("transpose", (x,), out,
            lambda g: (g.transpose(inv),),
            lambda: x.data.transpose(axes))
    return out


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    xs = tuple(xs)
    if not xs:
        raise ShapeMismatch("concat", "no inputs")
    base = list(xs[0].shape)
    for t in xs[1:]:
        other = list(t.shape)
        if len(other) != len(base):
            raise ShapeMismatch("concat", f"ranks differ: {xs[0].shape} vs {t.shape}")
        if other[:axis] + other[axis + 1:] != base[:axis] + base[axis + 1:]:
            raise ShapeMismatch("concat", f"non-{axis} dims differ: {xs[0].shape} vs {t.shape}")
    _check_finite("concat", *xs)
    data = np.concatenate([t.data for t in xs], axis=axis)
    out = _make(xs, data)
    sizes = [t.shape[axis] for t in xs]
    offsets = np.cumsum([0] + sizes)

    def bwd(g: Array):
        sl = [slice(None)] * g.ndim
        pieces = []
        for i in range(len(xs)):
            sl[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
            pieces.append(g[tuple(sl)])
        return tuple(pieces)

    _record("concat", xs, out, bwd,
            lambda: np.concatenate([t.data for t in xs], axis=axis))
    return out


def patchify(x: Tensor, p: int) -> Tensor:
    """(B, C, H, W) -> (B, C*(H/p)*(W/p), p*p) tokens, channel-major order."""
    b, c, h, w = _require_rank4("patchify", x)
    if h % p or w % p:
        raise ShapeMismatch("patchify", f"H={h}, W={w} not divisible by p={p}")
    hp, wp = h // p, w // p

    def fwd():
        return (x.data.reshape(b, c, hp, p, wp, p)
                .transpose(0, 1, 2, 4, 3, 5)
                .reshape(b, c * hp * wp, p * p))

    out = _make((x,), fwd())
    _record("patchify", (x,), out,
            lambda g: (g.reshape(b, c, hp, wp, p, p)
                       .transpose(0, 1, 2, 4, 3, 5)
                       .reshape(b, c, h, w),),
            fwd)
    return out


def unpatchify(x: Tensor, p: int, height: int, width: int) -> Tensor:
    """Exact inverse of patchify: (B, C*(H/p)*(W/p), p*p) -> (B, C, H, W)."""
    if x.data.ndim != 3 or x.shape[-1] != p * p:
        raise ShapeMismatch("unpatchify", f"tokens {x.shape} with p={p}")
    if height % p or width % p:
        raise ShapeMismatch("unpatchify", f"H={height}, W={width} not divisible by p={p}")
    b, n, _ = x.shape
    hp, wp = height // p, width // p
    s = hp * wp
    if n % s:
        raise ShapeMismatch("unpatchify", f"{n} tokens not a multiple of grid {s}")
    c = n // s

    def fwd():
        return (x.data.reshape(b, c, hp, wp, p, p)
                .transpose(0, 1, 2, 4, 3, 5)
                .reshape(b, c, height, width))

    out = _make((x,), fwd())
    _record("unpatchify", (x,), out,
            lambda g: (g.reshape(b, c, hp, p, wp, p)
                       .transpose(0, 1, 2, 4, 3, 5)
                       .reshape(b, n, p * p),),
            fwd)
    return out


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """Sub-pixel rearrangement: (B, C*r*r, H, W) -> (B, C, r*H, r*W)."""
    b, cr2, h, w = _require_rank4("pixel_shuffle", x)
    if cr2 % (r * r):
        raise ShapeMismatch("pixel_shuffle", f"{cr2} channels not divisible by r^2={r * r}")
    c = cr2 // (r * r)

    def fwd():
        return (x.data.reshape(b, c, r, r, h, w)
                .transpose(0, 1, 4, 2, 5, 3)
                .reshape(b, c, h * r, w * r))

    out = _make((x,), fwd())
    _record("pixel_shuffle", (x,), out,
            lambda g: (g.reshape(b, c, h, r, w, r)
                       .transpose(0, 1, 3, 5, 2, 4)
                       .reshape(b, cr2, h, w),),
            fwd)
    return out


# ---------------------------------------------------------------------------
# spatial primitives


def _require_rank4(kind: str, x: Tensor) -> tuple[int, int, int, int]:
    if x.data.ndim != 4:
        raise ShapeMismatch(kind, f"expected rank-4, got shape {x.shape}")
    return x.shape  # type: ignore[return-value]


def _im2col(xd: Array, kh: int, kw: int, stride: int, pad: int):
    b, c, h, w = xd.shape
    if pad:
        xd = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    s0, s1, s2, s3 = xd.strides
    view = as_strided(xd, shape=(b, c, kh, kw, ho, wo),
                      strides=(s0, s1, s2, s3, s2 * stride, s3 * stride))
    cols = np.ascontiguousarray(view).reshape(b, c * kh * kw, ho * wo)
    return cols, ho, wo


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution (cross-correlation) with zero padding."""
    bs, cin, h, wd_ = _require_rank4("conv2d", x)
    if w.data.ndim != 4 or w.shape[1] != cin:
        raise ShapeMismatch("conv2d", f"x has {cin} channels, kernel {w.shape}")
    cout, _, kh, kw = w.shape
    if b is not None and b.shape != (cout,):
        raise ShapeMismatch("conv2d", f"bias {b.shape} for {cout} output channels")
    if h + 2 * padding < kh or wd_ + 2 * padding < kw:
        raise ShapeMismatch("conv2d", f"input {h}x{wd_} too small for kernel {kh}x{kw}")
    _check_finite("conv2d", x, w, *( (b,) if b is not None else () ))

    cols, ho, wo = _im2col(x.data, kh, kw, stride, padding)
    w2 = w.data.reshape(cout, cin * kh * kw)
    out2 = np.matmul(w2[None], cols)
    data = out2.reshape(bs, cout, ho, wo)
    if b is not None:
        data = data + b.data.reshape(1, cout, 1, 1)
    inputs = (x, w) if b is None else (x, w, b)
    out = _make(inputs, data)

    def bwd(g: Array):
        g2 = g.reshape(bs, cout, ho * wo)
        dw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        if x.requires_grad:
            dcols = np.matmul(w2.T[None], g2).reshape(bs, cin, kh, kw, ho, wo)
            hp, wp = h + 2 * padding, wd_ + 2 * padding
            dxp = np.zeros((bs, cin, hp, wp))
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, i, j]
            dx = dxp[:, :, padding:hp - padding or None, padding:wp - padding or None]
        else:
            dx = None
        if b is None:
            return (dx, dw)
        return (dx, dw, g.sum(axis=(0, 2, 3)))

    def recompute():
        c2, _, _ = _im2col(x.data, kh, kw, stride, padding)
        o = np.matmul(w2[None], c2).reshape(bs, cout, ho, wo)
        return o + b.data.reshape(1, cout, 1, 1) if b is not None else o

    _record("conv2d", inputs, out, bwd, recompute)
    return out


def max_pool2d(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2; ties route to the first window element."""
    b, c, h, w = _require_rank4("max_pool2d", x)
    if h % 2 or w % 2:
        raise ShapeMismatch("max_pool2d", f"H={h}, W={w} must be even")
    _check_finite("max_pool2d", x)
    ho, wo = h // 2, w // 2

    def windows():
        return (x.data.reshape(b, c, ho, 2, wo, 2)
                .transpose(0, 1, 2, 4, 3, 5)
                .reshape(b, c, ho, wo, 4))

    win = windows()
    idx = win.argmax(axis=-1)
    data = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    out = _make((x,), data)

    def bwd(g: Array):
        g4 = np.zeros((b, c, ho, wo, 4))
        np.put_along_axis(g4, idx[..., None], g[..., None], axis=-1)
        return (g4.reshape(b, c, ho, wo, 2, 2)
                .transpose(0, 1, 2, 4, 3, 5)
                .reshape(b, c, h, w),)

    _record("max_pool2d", (x,), out, bwd, lambda: windows().max(axis=-1))
    return out


def nearest_upsample(x: Tensor) -> Tensor:
    """Nearest-neighbor 2x upsampling."""
    b, c, h, w = _require_rank4("nearest_upsample", x)
    _check_finite("nearest_upsample", x)
    out = _make((x,), x.data.repeat(2, axis=2).repeat(2, axis=3))
    _record("nearest_upsample", (x,), out,
            lambda g: (g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)),),
            lambda: x.data.repeat(2, axis=2).repeat(2, axis=3))
    return out


def batch_norm2d(x: Tensor, gamma: Tensor, beta: Tensor,
                 running_mean: Array, running_var: Array,
                 mode: str, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization with running statistics.

    Train mode normalizes with batch statistics (biased variance) and updates
    the running buffers in place; eval mode normalizes with the buffers.
    """
    b, c, h, w = _require_rank4("batch_norm2d", x)
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeMismatch("batch_norm2d", f"affine shapes {gamma.shape}/{beta.shape} for {c} channels")
    _require_mode(mode)
    _check_finite("batch_norm2d", x, gamma, beta)
    n = b * h * w

    if mode == "train":
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean[:] = (1 - momentum) * running_mean + momentum * mu
        unbias = n / (n - 1) if n > 1 else 1.0
        running_var[:] = (1 - momentum) * running_var + momentum * var * unbias
    else:
        mu = running_mean.copy()
        var = running_var.copy()

    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
    out = _make((x, gamma, beta), xhat * gamma.data.reshape(1, c, 1, 1) + beta.data.reshape(1, c, 1, 1))

    def bwd(g: Array):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * gamma.data.reshape(1, c, 1, 1)
        if mode == "train":
            dx = (inv.reshape(1, c, 1, 1) / n) * (
                n * dxhat
                - dxhat.sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
                - xhat * (dxhat * xhat).sum(axis=(0, 2, 3)).reshape(1, c, 1, 1))
        else:
            dx = dxhat * inv.reshape(1, c, 1, 1)
        return (dx, dgamma, dbeta)

    def recompute():
        xh = (x.data - mu.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
        return xh * gamma.data.reshape(1, c, 1, 1) + beta.data.reshape(1, c, 1, 1)

    _record("batch_norm2d", (x, gamma, beta), out, bwd, recompute)
    return out


def _require_mode(mode: str) -> None:
    if mode not in ("train", "infer"):
        raise DiffcoreError(f"mode must be 'train' or 'infer', got {mode!r}")


def dropout(x: Tensor, rate: float, mode: str, seed: int) -> Tensor:
    """Inverted dropout: survivors scaled by 1/(1-rate) in train mode."""
    if not 0.0 <= rate < 1.0:
        raise DiffcoreError(f"dropout rate must be in [0, 1), got {rate}")
    _require_mode(mode)
    _check_finite("dropout", x)
    if mode == "infer" or rate == 0.0:
        out = _make((x,), x.data)
        _record("dropout", (x,), out, lambda g: (g,), lambda: x.data)
        return out
    keep = np.random.default_rng(seed).random(x.shape) >= rate
    scale_ = 1.0 / (1.0 - rate)
    out = _make((x,), x.data * keep * scale_)
    _record("dropout", (x,), out,
            lambda g: (g * keep * scale_,),
            lambda: x.data * keep * scale_)
    return out


# ---------------------------------------------------------------------------
# kind registry and dispatch


class PrimitiveKind(str, Enum):
    CONV2D = "conv2d"
    RELU = "relu"
    SIGMOID = "sigmoid"
    TANH = "tanh"
    ADD = "add"
    SUBTRACT = "subtract"
    MULTIPLY = "multiply"
    MATMUL = "matmul"
    LAYER_NORM = "layer_norm"
    SOFTMAX = "softmax"
    CONCAT = "concat"
    DROPOUT = "dropout"
    PIXEL_SHUFFLE = "pixel_shuffle"
    MAX_POOL2D = "max_pool2d"
    NEAREST_UPSAMPLE = "nearest_upsample"
    BATCH_NORM2D = "batch_norm2d"
    LINEAR = "linear"
    PATCHIFY = "patchify"
    UNPATCHIFY = "unpatchify"
    SUM = "sum"
    MEAN = "mean"
    LOG = "log"
    RECIPROCAL = "reciprocal"
    CLAMP = "clamp"
    RESHAPE = "reshape"
    TRANSPOSE = "transpose"


_DISPATCH: dict[PrimitiveKind, Callable[..., Tensor]] = {
    PrimitiveKind.CONV2D: conv2d,
    PrimitiveKind.RELU: relu,
    PrimitiveKind.SIGMOID: sigmoid,
    PrimitiveKind.TANH: tanh,
    PrimitiveKind.ADD: add,
    PrimitiveKind.SUBTRACT: subtract,
    PrimitiveKind.MULTIPLY: multiply,
    PrimitiveKind.MATMUL: matmul,
    PrimitiveKind.LAYER_NORM: layer_norm,
    PrimitiveKind.SOFTMAX: softmax,
    PrimitiveKind.CONCAT: lambda *xs, axis=1: concat(xs, axis=axis),
    PrimitiveKind.DROPOUT: dropout,
    PrimitiveKind.PIXEL_SHUFFLE: pixel_shuffle,
    PrimitiveKind.MAX_POOL2D: max_pool2d,
    PrimitiveKind.NEAREST_UPSAMPLE: nearest_upsample,
    PrimitiveKind.BATCH_NORM2D: batch_norm2d,
    PrimitiveKind.LINEAR: linear,
    PrimitiveKind.PATCHIFY: patchify,
    PrimitiveKind.UNPATCHIFY: unpatchify,
    PrimitiveKind.SUM: sum_all,
    PrimitiveKind.MEAN: mean_all,
    PrimitiveKind.LOG: log,
    PrimitiveKind.RECIPROCAL: reciprocal,
    PrimitiveKind.CLAMP: clamp,
    PrimitiveKind.RESHAPE: reshape,
    PrimitiveKind.TRANSPOSE: transpose,
}


def apply_primitive(kind: PrimitiveKind | str, inputs: Iterable[Tensor], params: dict | None = None) -> Tensor:
    """Run one primitive by kind, recording it on the active tape."""
    kind = PrimitiveKind(kind)
    return _DISPATCH[kind](*tuple(inputs), **(params or {}))


# ---------------------------------------------------------------------------
# reverse mode


def backward(tape: Tape, loss: Tensor) -> dict[str, Array]:
    """Exact reverse-mode gradients of a scalar loss for every named
    requires-grad tensor reachable from it on the tape.
    """
    if loss.data.size != 1:
        raise TapeError(f"loss must be scalar, got shape {loss.shape}")
    if not any(e.output is loss for e in tape.entries):
        raise TapeError("loss was not produced on this tape")

    grads: dict[int, Array] = {id(loss): np.ones_like(loss.data)}
    for entry in reversed(tape.entries):
        g = grads.get(id(entry.output))
        if g is None:
            continue
        for inp, ig in zip(entry.inputs, entry.backward(g)):
            if ig is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + ig
            else:
                grads[key] = np.array(ig, copy=True) if ig.base is not None else ig

    produced = {id(e.output) for e in tape.entries}
    result: dict[str, Array] = {}
    seen: dict[str, int] = {}
    for entry in tape.entries:
        for inp in entry.inputs:
            if not inp.requires_grad or id(inp) in produced or id(inp) not in grads:
                continue  # parameters are requires-grad graph leaves
            name = inp.name if inp.name is not None else f"tensor@{id(inp):x}"
            if name in seen and seen[name] != id(inp):
                raise TapeError(f"two distinct parameters share the name {name!r}")
            seen[name] = id(inp)
            result[name] = grads[id(inp)]
    return result


def finite_diff_check(fn: Callable[[Tensor], Tensor], point: Array,
                      step: float = 1e-4) -> float:
    """Max relative error between reverse-mode and central-difference
    gradients of a deterministic scalar function at ``point``.

    Error per coordinate is |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    """
    if step <= 0:
        raise DiffcoreError("finite_diff_check: step must be positive")
    base = np.asarray(point, dtype=np.float64)
    pt = Tensor(base.copy(), requires_grad=True, name="_fd_point")
    with Tape() as tape:
        y = fn(pt)
        if y.data.size != 1:
            raise TapeError("finite_diff_check: fn must return a scalar")
        if not np.isfinite(y.data).all():
            raise NonFiniteError("finite_diff_check: non-finite function value")
    analytic = backward(tape, y).get("_fd_point", np.zeros_like(base))

    worst = 0.0
    flat = base.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = float(fn(Tensor(base.copy())).data)
        flat[i] = orig - step
        lo = float(fn(Tensor(base.copy())).data)
        flat[i] = orig
        numeric = (hi - lo) / (2.0 * step)
        if not np.isfinite(numeric):
            raise NonFiniteError("finite_diff_check: non-finite numeric gradient")
        a = float(analytic.reshape(-1)[i])
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# model accounting


def count_params(state) -> int:
    """Total scalar parameter count of a model state (or a raw name->Tensor map)."""
    params = getattr(state, "params", state)
    return int(sum(int(np.prod(t.data.shape)) if t.data.shape else 1 for t in params.values()))


def macs_of(items: Iterable[tuple]) -> int:
    """Multiply-accumulate count from layer descriptors.

    Descriptors:
      ("conv", cin, cout, kh, kw, hout, wout)  -> cout*cin*kh*kw*hout*wout
      ("linear", tokens, din, dout)            -> tokens*din*dout
      ("attention", tokens, dim, seq_len)      -> 3*n*d^2 + 2*n*L*d + n*d^2
    """
    total = 0
    for item in items:
        tag = item[0]
        if tag == "conv":
            _, cin, cout, kh, kw, ho, wo = item
            total += cout * cin * kh * kw * ho * wo
        elif tag == "linear":
            _, n, din, dout = item
            total += n * din * dout
        elif tag == "attention":
            _, n, d, seq = item
            total += 3 * n * d * d + 2 * n * seq * d + n * d * d
        else:
            raise DiffcoreError(f"unknown flop item {tag!r}")
    return int(total)


def estimate_flops(model, input_shape: tuple[int, ...]) -> int:
    """Deterministic MAC estimate for a configured model on one input shape."""
    return macs_of(model.flop_items(input_shape))
