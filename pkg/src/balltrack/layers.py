"""Parameterized layer wrappers over the tensor core.

Each layer registers its tensors into a shared name->Tensor dict (and
buffers into a name->ndarray dict) so the whole model is a flat, named,
serializable parameter registry.  Weights use fan-in-scaled uniform init;
biases start at zero.
"""

from __future__ import annotations

import numpy as np

from . import diffcore as dc


def register(params: dict, name: str, data, rng=None) -> dc.Tensor:
    if name in params:
        raise ValueError(f"duplicate parameter name {name!r}")
    t = dc.param(np.asarray(data, dtype=np.float64), name)
    params[name] = t
    return t


def _fan_in_uniform(rng: np.random.Generator, shape, fan_in: int):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv2d:
    def __init__(self, params: dict, name: str, cin: int, cout: int, k: int,
                 rng: np.random.Generator, stride: int = 1, padding: int = 0):
        self.stride = stride
        self.padding = padding
        self.w = register(params, f"{name}.w",
                          _fan_in_uniform(rng, (cout, cin, k, k), cin * k * k))
        self.b = register(params, f"{name}.b", np.zeros(cout))

    def __call__(self, x: dc.Tensor) -> dc.Tensor:
        return dc.conv2d(x, self.w, self.b, stride=self.stride, padding=self.padding)

    def set_weights(self, w, b) -> None:
        self.w.data = np.asarray(w, dtype=np.float64)
        self.b.data = np.asarray(b, dtype=np.float64)


class BatchNorm2d:
    def __init__(self, params: dict, buffers: dict, name: str, channels: int,
                 momentum: float = 0.1, eps: float = 1e-5):
        self.momentum = momentum
        self.eps = eps
        self.gamma = register(params, f"{name}.gamma", np.ones(channels))
        self.beta = register(params, f"{name}.beta", np.zeros(channels))
        buffers[f"{name}.running_mean"] = np.zeros(channels)
        buffers[f"{name}.running_var"] = np.ones(channels)
        self.running_mean = buffers[f"{name}.running_mean"]
        self.running_var = buffers[f"{name}.running_var"]
        self._last_train_input = None

    @property
    def last_mean(self):
        """Batch mean seen by the latest train pass (computed on demand)."""
        return self._last_train_input.mean(axis=(0, 2, 3))

    @property
    def last_var(self):
        return self._last_train_input.var(axis=(0, 2, 3))

    def __call__(self, x: dc.Tensor, mode: str) -> dc.Tensor:
        if mode == "train":
            self._last_train_input = x.data
        return dc.batch_norm2d(x, self.gamma, self.beta,
                               self.running_mean, self.running_var,
                               mode, momentum=self.momentum, eps=self.eps)


class Linear:
    def __init__(self, params: dict, name: str, din: int, dout: int,
                 rng: np.random.Generator, zero_init: bool = False):
        w = np.zeros((din, dout)) if zero_init else _fan_in_uniform(rng, (din, dout), din)
        self.w = register(params, f"{name}.w", w)
        self.b = register(params, f"{name}.b", np.zeros(dout))

    def __call__(self, x: dc.Tensor) -> dc.Tensor:
        return dc.linear(x, self.w, self.b)


class LayerNorm:
    def __init__(self, params: dict, name: str, dim: int, eps: float = 1e-5):
        self.eps = eps
        self.gamma = register(params, f"{name}.gamma", np.ones(dim))
        self.beta = register(params, f"{name}.beta", np.zeros(dim))

    def __call__(self, x: dc.Tensor) -> dc.Tensor:
        return dc.layer_norm(x, self.gamma, self.beta, eps=self.eps)
