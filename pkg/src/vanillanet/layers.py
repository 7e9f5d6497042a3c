"""Stateful layers built on the functional kernels.

A :class:`Module` owns named parameter arrays, their gradients, buffers
(running statistics) and ordered child modules. ``forward`` caches what
``backward`` needs; ``backward`` fills ``grads`` and returns the input
gradient.
"""
from __future__ import annotations

import copy
from typing import Iterator

import numpy as np

from . import ops
from .activation import (
    SeriesActivationParams,
    lambda_blend,
    lambda_blend_grad,
    series_activation_backward,
    series_activation_forward,
)
from .ops import BatchNormParams, ConvParams


def trunc_normal(rng: np.random.Generator, shape, std: float, dtype=np.float32) -> np.ndarray:
    """Normal(0, std) truncated to +-2 std by resampling."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out.astype(dtype)


class Module:
    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.children: dict[str, Module] = {}
        self.training = True

    def forward(self, x):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError

    def __call__(self, x):
        return self.forward(x)

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self.children.items():
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def _named(self, attr: str, prefix: str = ""):
        for mod_name, mod in self.named_modules(prefix):
            for key, value in getattr(mod, attr).items():
                yield (f"{mod_name}.{key}" if mod_name else key), value

    def named_parameters(self, prefix: str = ""):
        return self._named("params", prefix)

    def named_grads(self, prefix: str = ""):
        return self._named("grads", prefix)

    def named_buffers(self, prefix: str = ""):
        return self._named("buffers", prefix)

    def zero_grad(self):
        for _, mod in self.named_modules():
            mod.grads = {k: np.zeros_like(v) for k, v in mod.params.items()}

    def train(self, mode: bool = True):
        for _, mod in self.named_modules():
            mod.training = mode
        return self

    def eval(self):
        return self.train(False)

    def astype(self, dtype):
        """Cast parameters and buffers in place; returns self."""
        for _, mod in self.named_modules():
            mod.params = {k: v.astype(dtype) for k, v in mod.params.items()}
            mod.buffers = {k: v.astype(dtype) for k, v in mod.buffers.items()}
            mod.grads = {}
        return self

    def copy(self):
        return copy.deepcopy(self)

    def clear_cache(self):
        for _, mod in self.named_modules():
            mod._cache = None

    def activation_pattern(self) -> list[np.ndarray]:
        """Branch decisions (ReLU masks, pooling argmaxes) of the last forward."""
        out = []
        for _, mod in self.named_modules():
            pat = mod._pattern() if hasattr(mod, "_pattern") else None
            if pat is not None:
                out.append(pat)
        return out


class Identity(Module):
    def forward(self, x):
        return x

    def backward(self, dy):
        return dy


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int = 1, stride: int = 1, padding: int = 0,
                 rng: np.random.Generator | None = None, std: float = 0.2, dtype=np.float32,
                 init: bool = True):
        super().__init__()
        self.stride, self.padding = stride, padding
        shape = (c_out, c_in, k, k)
        if init:
            rng = rng if rng is not None else np.random.default_rng(0)
            self.params["weight"] = trunc_normal(rng, shape, std, dtype)
        else:
            self.params["weight"] = np.zeros(shape, dtype)
        self.params["bias"] = np.zeros(c_out, dtype)
        self._cache = None

    @classmethod
    def from_params(cls, p: ConvParams) -> "Conv2d":
        conv = cls.__new__(cls)
        Module.__init__(conv)
        conv.stride, conv.padding = p.stride, p.padding
        conv.params["weight"] = np.array(p.weight)
        conv.params["bias"] = np.array(p.bias)
        conv._cache = None
        return conv

    @property
    def conv_params(self) -> ConvParams:
        return ConvParams(self.params["weight"], self.params["bias"], self.stride, self.padding)

    @property
    def kernel_size(self) -> int:
        return self.params["weight"].shape[2]

    def forward(self, x):
        y, self._cache = ops.conv2d_forward(x, self.conv_params)
        return y

    def backward(self, dy):
        dx, dw, db = ops.conv2d_backward(dy, self._cache)
        self.grads["weight"] = dw
        self.grads["bias"] = db
        return dx

    def __repr__(self):
        o, i, k, _ = self.params["weight"].shape
        return f"Conv2d({i}->{o}, k={k}, stride={self.stride}, padding={self.padding})"


class BatchNorm2d(Module):
    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1, dtype=np.float32):
        super().__init__()
        self.eps, self.momentum = eps, momentum
        self.params["gamma"] = np.ones(channels, dtype)
        self.params["beta"] = np.zeros(channels, dtype)
        self.buffers["running_mean"] = np.zeros(channels, dtype)
        self.buffers["running_var"] = np.ones(channels, dtype)
        self.update_stats = True
        self._cache = None

    @property
    def bn_params(self) -> BatchNormParams:
        return BatchNormParams(self.params["gamma"], self.params["beta"],
                               self.buffers["running_mean"], self.buffers["running_var"],
                               self.eps, self.momentum)

    def forward(self, x):
        y, self._cache = ops.batchnorm_forward(x, self.bn_params, self.training, self.update_stats)
        return y

    def backward(self, dy):
        dx, dg, db = ops.batchnorm_backward(dy, self._cache)
        self.grads["gamma"] = dg
        self.grads["beta"] = db
        return dx

    def __repr__(self):
        return f"BatchNorm2d({self.params['gamma'].shape[0]})"


class LambdaAct(Module):
    """Blend of ReLU and identity, ``(1 - lam) relu(x) + lam x``."""

    def __init__(self, lam: float = 0.0):
        super().__init__()
        self.lam = lam
        self._cache = None

    def forward(self, x):
        self._cache = x
        return lambda_blend(x, self.lam)

    def backward(self, dy):
        return lambda_blend_grad(self._cache, self.lam, dy)

    def _pattern(self):
        if self._cache is None or self.lam == 1.0:
            return None
        return self._cache > 0

    def __repr__(self):
        return f"LambdaAct(lam={self.lam:g})"


class SeriesAct(Module):
    def __init__(self, channels: int, n: int, rng: np.random.Generator | None = None,
                 std: float = 0.2, dtype=np.float32, init: bool = True):
        super().__init__()
        shape = (channels, 2 * n + 1, 2 * n + 1)
        if init:
            rng = rng if rng is not None else np.random.default_rng(0)
            self.params["a"] = trunc_normal(rng, shape, std, dtype)
        else:
            self.params["a"] = np.zeros(shape, dtype)
        self.params["b"] = np.zeros(channels, dtype)
        self._cache = None

    @property
    def series_params(self) -> SeriesActivationParams:
        return SeriesActivationParams(self.params["a"], self.params["b"])

    @property
    def n(self) -> int:
        return (self.params["a"].shape[1] - 1) // 2

    def forward(self, x):
        y, self._cache = series_activation_forward(x, self.series_params)
        return y

    def backward(self, dy):
        dx, da, db = series_activation_backward(dy, self._cache)
        self.grads["a"] = da
        self.grads["b"] = db
        return dx

    def _pattern(self):
        return None if self._cache is None else self._cache[0] > 0

    def __repr__(self):
        return f"SeriesAct(C={self.params['b'].shape[0]}, n={self.n})"


class MaxPool2d(Module):
    def __init__(self, k: int = 2):
        super().__init__()
        self.k = k
        self._cache = None

    def forward(self, x):
        y, self._cache = ops.maxpool2d_forward(x, self.k)
        return y

    def backward(self, dy):
        return ops.maxpool2d_backward(dy, self._cache)

    def _pattern(self):
        return None if self._cache is None else self._cache[1]

    def __repr__(self):
        return f"MaxPool2d({self.k})"


class GlobalAvgPool(Module):
    def forward(self, x):
        self._cache = x.shape
        return ops.global_avgpool(x)

    def backward(self, dy):
        return ops.global_avgpool_backward(dy, self._cache)


class Sequential(Module):
    def __init__(self, *layers: tuple[str, Module]):
        super().__init__()
        for name, layer in layers:
            self.children[name] = layer

    def forward(self, x):
        for layer in self.children.values():
            x = layer.forward(x)
        return x

    def backward(self, dy):
        for layer in reversed(list(self.children.values())):
            dy = layer.backward(dy)
        return dy


def pad_channels(x: np.ndarray, channels: int) -> np.ndarray:
    extra = channels - x.shape[1]
    if extra < 0:
        raise ops.ShapeError("parameter-free shortcut cannot drop channels")
    if extra == 0:
        return x
    return np.pad(x, ((0, 0), (0, extra), (0, 0), (0, 0)))


SHORTCUT_MODES = ("none", "before_act", "after_act")


class Unit(Module):
    """One conv block: body convs, series activation, optional max-pool.

    Body layers are the children listed in ``body`` (e.g. ``conv1, bn1,
    blend, conv2, bn2`` in deep-training mode, ``conv`` once fused). The
    activation runs before the pool unless ``act_after_pool``. The optional
    parameter-free shortcut adds the zero-padded input right before the
    activation or at the very end; the skip path is 2x2 average pooled
    whenever the main path has already been pooled at that point.
    """

    def __init__(self, body: list[tuple[str, Module]], act: SeriesAct, pool: bool,
                 shortcut: str = "none", act_after_pool: bool = False):
        super().__init__()
        if shortcut not in SHORTCUT_MODES:
            raise ValueError(f"unknown shortcut mode {shortcut!r}")
        self.body = [name for name, _ in body]
        for name, layer in body:
            self.children[name] = layer
        self.children["act"] = act
        if pool:
            self.children["pool"] = MaxPool2d(2)
        self.shortcut = shortcut
        self.act_after_pool = act_after_pool
        self._cache = None

    @property
    def pools(self) -> bool:
        return "pool" in self.children

    def body_layers(self):
        return [(name, self.children[name]) for name in self.body]

    def _steps(self):
        if not self.pools:
            return ("act",)
        return ("pool", "act") if self.act_after_pool else ("act", "pool")

    def _skip(self, x, c_out, pooled):
        s = pad_channels(x, c_out)
        if pooled:
            s, _ = ops.avgpool2d_forward(s, 2)
        return s

    def forward(self, x):
        z = x
        for name in self.body:
            z = self.children[name].forward(z)
        c_out = z.shape[1]
        pooled = False
        skip_pooled = None
        for step in self._steps():
            if step == "pool":
                z = self.children["pool"].forward(z)
                pooled = True
                continue
            if self.shortcut == "before_act":
                z = z + self._skip(x, c_out, pooled)
                skip_pooled = pooled
            z = self.children["act"].forward(z)
        if self.shortcut == "after_act":
            z = z + self._skip(x, c_out, pooled)
            skip_pooled = pooled
        self._cache = (x.shape, skip_pooled)
        return z

    def backward(self, dy):
        x_shape, skip_pooled = self._cache
        g = dy
        dskip = g if self.shortcut == "after_act" else None
        for step in reversed(self._steps()):
            g = self.children[step].backward(g)
            if step == "act" and self.shortcut == "before_act":
                dskip = g
        for name in reversed(self.body):
            g = self.children[name].backward(g)
        if dskip is not None:
            if skip_pooled:
                dskip = ops.avgpool2d_backward(dskip, None)
            g = g + dskip[:, :x_shape[1]]
        return g


class Head(Module):
    """Global average pool followed by a 1x1 classifier conv, flattened to (N, K)."""

    def __init__(self, c_in: int, num_classes: int, rng=None, std: float = 0.2,
                 dtype=np.float32, init: bool = True):
        super().__init__()
        self.children["pool"] = GlobalAvgPool()
        self.children["cls"] = Conv2d(c_in, num_classes, 1, rng=rng, std=std, dtype=dtype, init=init)

    def forward(self, x):
        y = self.children["cls"].forward(self.children["pool"].forward(x))
        return y.reshape(y.shape[0], -1)

    def backward(self, dy):
        g = self.children["cls"].backward(dy.reshape(dy.shape[0], -1, 1, 1))
        return self.children["pool"].backward(g)
