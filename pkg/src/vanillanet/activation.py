"""Blended deep-training activation and the spatial series activation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ops import ShapeError


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_grad(x: np.ndarray) -> np.ndarray:
    return (x > 0).astype(x.dtype)


BASE_ACTIVATIONS = {"relu": (relu, relu_grad)}


# --------------------------------------------------------------------------
# lambda schedule and blended activation
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class LambdaSchedule:
    """Linear ramp of the blend weight from 0 to 1 over ``deep_epochs``."""

    deep_epochs: int
    total_epochs: int

    def __post_init__(self):
        if self.deep_epochs < 1:
            raise ValueError("deep_epochs must be a positive integer")
        if self.total_epochs < self.deep_epochs:
            raise ValueError("total_epochs must be >= deep_epochs")


def lambda_value(epoch: float, sched: LambdaSchedule) -> float:
    """``min(epoch / E, 1)``; 0 at the first epoch, exactly 1 from epoch E on."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return min(epoch / sched.deep_epochs, 1.0)


def _check_lambda(lam: float) -> None:
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")


def lambda_blend(x: np.ndarray, lam: float, base: str = "relu") -> np.ndarray:
    """``(1 - lam) * A(x) + lam * x``."""
    _check_lambda(lam)
    if lam == 1.0:
        return x.copy()
    fn, _ = BASE_ACTIVATIONS[base]
    if lam == 0.0:
        return fn(x)
    return (1.0 - lam) * fn(x) + lam * x


def lambda_blend_grad(x: np.ndarray, lam: float, dy: np.ndarray, base: str = "relu") -> np.ndarray:
    _check_lambda(lam)
    _, dfn = BASE_ACTIVATIONS[base]
    return dy * ((1.0 - lam) * dfn(x) + lam)


# --------------------------------------------------------------------------
# series activation
# --------------------------------------------------------------------------

@dataclass
class SeriesActivationParams:
    a: np.ndarray  # (C, 2n+1, 2n+1) per-channel neighbourhood weights
    b: np.ndarray  # (C,) per-channel bias inside the ReLU

    def __post_init__(self):
        if self.a.ndim != 3 or self.a.shape[1] != self.a.shape[2] or self.a.shape[1] % 2 == 0:
            raise ShapeError(f"series weights must be (C, 2n+1, 2n+1), got {self.a.shape}")
        if self.b.shape != (self.a.shape[0],):
            raise ShapeError(f"series bias must have shape ({self.a.shape[0]},), got {self.b.shape}")

    @property
    def n(self) -> int:
        return (self.a.shape[1] - 1) // 2

    @property
    def channels(self) -> int:
        return self.a.shape[0]

    @classmethod
    def plain(cls, channels: int, n: int = 0, dtype=np.float64) -> "SeriesActivationParams":
        """Centre tap 1, zero elsewhere: reproduces plain ReLU for any ``n``."""
        a = np.zeros((channels, 2 * n + 1, 2 * n + 1), dtype)
        a[:, n, n] = 1
        return cls(a, np.zeros(channels, dtype))


def _to_hwk(x: np.ndarray, n: int) -> np.ndarray:
    """(N, C, H, W) -> zero-padded (H + 2n, W + 2n, N*C); each tap slice is then contiguous in k."""
    nb, c, h, w = x.shape
    out = np.zeros((h + 2 * n, w + 2 * n, nb * c), x.dtype)
    out[n:n + h, n:n + w] = x.transpose(2, 3, 0, 1).reshape(h, w, nb * c)
    return out


def _from_hwk(y: np.ndarray, nb: int, c: int) -> np.ndarray:
    h, w = y.shape[:2]
    return np.ascontiguousarray(y.reshape(h, w, nb, c).transpose(2, 3, 0, 1))


def _depthwise_corr(xp: np.ndarray, a: np.ndarray, nb: int, h: int, w: int) -> np.ndarray:
    """Per-channel valid cross-correlation in the padded (H, W, N*C) layout."""
    size = a.shape[1]
    taps = np.tile(a.transpose(1, 2, 0), (1, 1, nb))  # (s, s, N*C), channel fastest
    y = np.zeros((h, w, xp.shape[2]), xp.dtype)
    tmp = np.empty_like(y)
    for i in range(size):
        for j in range(size):
            np.multiply(xp[i:i + h, j:j + w], taps[i, j], out=tmp)
            y += tmp
    return y


def series_activation_forward(x: np.ndarray, p: SeriesActivationParams):
    if x.ndim != 4 or x.shape[1] != p.channels:
        raise ShapeError(f"series activation expects (N, {p.channels}, H, W), got {x.shape}")
    n = p.n
    nb, c, h, w = x.shape
    pre = x + p.b.reshape(1, -1, 1, 1)
    t = np.maximum(pre, 0)
    if n == 0:
        return p.a[:, 0, 0].reshape(1, -1, 1, 1) * t, (pre, t, p)
    tp = _to_hwk(t, n)
    y = _depthwise_corr(tp, p.a, nb, h, w)
    return _from_hwk(y, nb, c), (pre, tp, p)


def series_activation_backward(dy: np.ndarray, cache):
    """Return ``(dx, da, db)``."""
    pre, saved, p = cache
    n = p.n
    nb, c, h, w = dy.shape
    if n == 0:
        da = np.einsum("nchw,nchw->c", dy, saved).reshape(p.a.shape)
        dt = dy * p.a[:, 0, 0].reshape(1, -1, 1, 1)
    else:
        size = 2 * n + 1
        dyp = _to_hwk(dy, n)
        core = dyp[n:n + h, n:n + w]
        da = np.empty((size, size, nb * c), dy.dtype)
        tmp = np.empty_like(core)
        for i in range(size):
            for j in range(size):
                np.multiply(core, saved[i:i + h, j:j + w], out=tmp)
                tmp.reshape(-1, nb * c).sum(axis=0, out=da[i, j])
        da = da.reshape(size, size, nb, c).sum(axis=2).transpose(2, 0, 1).astype(p.a.dtype)
        # the input gradient is the correlation of dy with the flipped kernel
        dt = _from_hwk(_depthwise_corr(dyp, p.a[:, ::-1, ::-1], nb, h, w), nb, c)
    dx = dt * (pre > 0)
    db = dx.sum(axis=(0, 2, 3))
    return dx, da, db


def series_activation(x: np.ndarray, p: SeriesActivationParams) -> np.ndarray:
    """ReLU of the biased input followed by a per-channel zero-padded
    cross-correlation with ``a`` (stride 1, output shape equals input shape)."""
    return series_activation_forward(x, p)[0]


def series_flops(h: int, w: int, c_in: int, n: int) -> int:
    """Multiply-accumulates of one series layer, ``(2n+1)^2`` taps per output."""
    return h * w * c_in * (2 * n + 1) ** 2


def series_flops_literal(h: int, w: int, c_in: int, n: int) -> int:
    """The ``n^2``-tap count used in the published complexity comparison."""
    return h * w * c_in * n * n


def complexity_ratio(c_out: int, k: int, n: int, literal: bool = True) -> float:
    """Conv cost over series-activation cost for one layer."""
    taps = n * n if literal else (2 * n + 1) ** 2
    return c_out * k * k / taps
