"""Dense NCHW kernels with explicit forward/backward passes.

Every tensor is a plain ``numpy.ndarray``. Forward functions that feed a
backward pass return ``(output, cache)``; the matching ``*_backward`` takes
the upstream gradient and that cache.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """Raised when tensor shapes are incompatible with an operation."""


class NumericalError(FloatingPointError):
    """Raised when a NaN or Inf shows up in an output."""


def check_finite(x: np.ndarray, where: str = "tensor") -> np.ndarray:
    if not np.isfinite(x).all():
        raise NumericalError(f"non-finite values in {where}")
    return x


@dataclass
class ConvParams:
    weight: np.ndarray  # (C_out, C_in, k, k)
    bias: np.ndarray  # (C_out,)
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.weight.ndim != 4 or self.weight.shape[2] != self.weight.shape[3]:
            raise ShapeError(f"conv weight must be (C_out, C_in, k, k), got {self.weight.shape}")
        if min(self.weight.shape) < 1:
            raise ShapeError("conv weight dimensions must be >= 1")
        if self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(f"bias shape {self.bias.shape} does not match C_out={self.weight.shape[0]}")
        if self.stride < 1 or self.padding < 0:
            raise ValueError("stride must be >= 1 and padding >= 0")

    @property
    def c_out(self) -> int:
        return self.weight.shape[0]

    @property
    def c_in(self) -> int:
        return self.weight.shape[1]

    @property
    def k(self) -> int:
        return self.weight.shape[2]

    def astype(self, dtype) -> "ConvParams":
        return ConvParams(self.weight.astype(dtype), self.bias.astype(dtype), self.stride, self.padding)


@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1

    def __post_init__(self):
        c = self.gamma.shape
        if not (self.beta.shape == self.running_mean.shape == self.running_var.shape == c):
            raise ShapeError("batchnorm parameter vectors must share one length")
        if (self.running_var < 0).any():
            raise ValueError("running_var must be non-negative")
        if self.eps <= 0 or not 0 < self.momentum < 1:
            raise ValueError("eps must be > 0 and momentum in (0, 1)")

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    @property
    def sigma(self) -> np.ndarray:
        return np.sqrt(self.running_var + self.eps)

    @classmethod
    def identity(cls, channels: int, dtype=np.float64, eps: float = 1e-5) -> "BatchNormParams":
        return cls(
            np.ones(channels, dtype), np.zeros(channels, dtype),
            np.zeros(channels, dtype), np.ones(channels, dtype), eps,
        )


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - k
    if span < 0 or span % stride:
        raise ShapeError(
            f"input size {size} with k={k}, stride={stride}, padding={padding} "
            "does not give an integer output size"
        )
    return span // stride + 1


# --------------------------------------------------------------------------
# im2col / convolution
# --------------------------------------------------------------------------

def im2col(x: np.ndarray, k: int, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Unfold sliding windows into a ``(C*k*k, N*H'*W')`` matrix.

    Rows follow the ``(c, u, v)`` order of a flattened ``(C, k, k)`` kernel,
    columns run over ``(n, h', w')`` in row-major order.
    """
    if x.ndim != 4:
        raise ShapeError(f"im2col expects a 4-D tensor, got shape {x.shape}")
    n, c, h, w = x.shape
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(w, k, stride, padding)
    if k == 1 and stride == 1 and padding == 0:
        # no overlapping windows: a reshape of the channel-major layout
        return x.transpose(1, 0, 2, 3).reshape(c, n * h * w)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((c, k, k, n, ho, wo), dtype=x.dtype)
    for u in range(k):
        for v in range(k):
            patch = x[:, :, u:u + stride * ho:stride, v:v + stride * wo:stride]
            cols[:, u, v] = patch.transpose(1, 0, 2, 3)
    return cols.reshape(c * k * k, n * ho * wo)


def col2im(cols: np.ndarray, x_shape, k: int, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add columns back into an image."""
    n, c, h, w = x_shape
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(w, k, stride, padding)
    if k == 1 and stride == 1 and padding == 0:
        return cols.reshape(c, n, h, w).transpose(1, 0, 2, 3)
    cols = cols.reshape(c, k, k, n, ho, wo)
    out = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for u in range(k):
        for v in range(k):
            out[:, :, u:u + stride * ho:stride, v:v + stride * wo:stride] += cols[:, u, v].transpose(1, 0, 2, 3)
    if padding:
        out = out[:, :, padding:padding + h, padding:padding + w]
    return out


def _is_pointwise(p: ConvParams) -> bool:
    return p.k == 1 and p.stride == 1 and p.padding == 0


def conv2d_forward(x: np.ndarray, p: ConvParams):
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input, got shape {x.shape}")
    n, c, h, w = x.shape
    if c != p.c_in:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, kernel expects {p.c_in}")
    wmat = p.weight.reshape(p.c_out, -1)
    if _is_pointwise(p):
        # skip materializing im2col: batched matmul over (N, C, H*W)
        y = np.matmul(wmat, x.reshape(n, c, h * w)) + p.bias[:, None]
        return y.reshape(n, p.c_out, h, w), (x.shape, x, None, p)
    ho = conv_output_size(h, p.k, p.stride, p.padding)
    wo = conv_output_size(w, p.k, p.stride, p.padding)
    cols = im2col(x, p.k, p.stride, p.padding)
    y = wmat @ cols + p.bias[:, None]
    y = y.reshape(p.c_out, n, ho, wo).transpose(1, 0, 2, 3)
    return np.ascontiguousarray(y), (x.shape, None, cols, p)


def conv2d_backward(dy: np.ndarray, cache):
    x_shape, x, cols, p = cache
    n = x_shape[0]
    wmat = p.weight.reshape(p.c_out, -1)
    db = dy.sum(axis=(0, 2, 3))
    if cols is None:
        c, hw = x_shape[1], x_shape[2] * x_shape[3]
        dy3 = dy.reshape(n, p.c_out, hw)
        dw = np.tensordot(dy3, x.reshape(n, c, hw), axes=([0, 2], [0, 2])).reshape(p.weight.shape)
        dx = np.matmul(wmat.T, dy3).reshape(x_shape)
        return dx, dw, db
    dymat = dy.transpose(1, 0, 2, 3).reshape(p.c_out, -1)
    dw = (dymat @ cols.T).reshape(p.weight.shape)
    dx = col2im(wmat.T @ dymat, x_shape, p.k, p.stride, p.padding)
    return dx, dw, db


def conv2d(x: np.ndarray, p: ConvParams) -> np.ndarray:
    """``y = W . im2col(x) + B`` reshaped back to NCHW."""
    y, _ = conv2d_forward(x, p)
    return check_finite(y, "conv2d output")


def conv2d_grad(x: np.ndarray, p: ConvParams, dy: np.ndarray):
    """Return ``(dL/dx, dL/dW, dL/dB)`` for upstream gradient ``dy``."""
    _, cache = conv2d_forward(x, p)
    return conv2d_backward(dy, cache)


# --------------------------------------------------------------------------
# pooling
# --------------------------------------------------------------------------

def _pool_windows(x: np.ndarray, k: int) -> np.ndarray:
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(f"pooling with window {k} needs spatial dims divisible by {k}, got {h}x{w}")
    return x.reshape(n, c, h // k, k, w // k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // k, w // k, k * k)


def maxpool2d_forward(x: np.ndarray, k: int = 2):
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d expects NCHW input, got shape {x.shape}")
    win = _pool_windows(x, k)
    # argmax returns the first maximum in row-major window order
    idx = win.argmax(axis=-1)
    y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return y, (x.shape, idx, k)


def maxpool2d_backward(dy: np.ndarray, cache) -> np.ndarray:
    x_shape, idx, k = cache
    n, c, h, w = x_shape
    dwin = np.zeros(idx.shape + (k * k,), dtype=dy.dtype)
    np.put_along_axis(dwin, idx[..., None], dy[..., None], axis=-1)
    return dwin.reshape(n, c, h // k, w // k, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(x_shape)


def maxpool2d(x: np.ndarray, k: int = 2, stride: int = 2) -> np.ndarray:
    if stride != k:
        raise ValueError("only non-overlapping pooling (stride == k) is supported")
    return maxpool2d_forward(x, k)[0]


def avgpool2d_forward(x: np.ndarray, k: int = 2):
    if x.ndim != 4:
        raise ShapeError(f"avgpool2d expects NCHW input, got shape {x.shape}")
    return _pool_windows(x, k).mean(axis=-1), (x.shape, k)


def avgpool2d_backward(dy: np.ndarray, cache=None, k: int = 2) -> np.ndarray:
    if cache is not None:
        k = cache[1]
    g = np.repeat(np.repeat(dy, k, axis=2), k, axis=3)
    return g / (k * k)


def global_avgpool(x: np.ndarray) -> np.ndarray:
    if x.ndim != 4:
        raise ShapeError(f"global_avgpool expects NCHW input, got shape {x.shape}")
    return x.mean(axis=(2, 3), keepdims=True)


def global_avgpool_backward(dy: np.ndarray, x_shape) -> np.ndarray:
    h, w = x_shape[2], x_shape[3]
    return np.broadcast_to(dy / (h * w), x_shape).copy()


# --------------------------------------------------------------------------
# batch normalization
# --------------------------------------------------------------------------

def batchnorm_forward(x: np.ndarray, bn: BatchNormParams, train: bool, update_stats: bool = True):
    """Normalize per channel over (N, H, W).

    In train mode the batch statistics are used and, if ``update_stats``,
    the running buffers are updated in place with ``bn.momentum``.
    """
    if x.ndim != 4 or x.shape[1] != bn.channels:
        raise ShapeError(f"batchnorm expects (N, {bn.channels}, H, W), got {x.shape}")
    shape = (1, -1, 1, 1)
    if train:
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        if update_stats:
            m = x.size // x.shape[1]
            unbiased = var * m / max(m - 1, 1)
            bn.running_mean *= 1 - bn.momentum
            bn.running_mean += bn.momentum * mean
            bn.running_var *= 1 - bn.momentum
            bn.running_var += bn.momentum * unbiased
    else:
        mean, var = bn.running_mean, bn.running_var
    inv_std = 1.0 / np.sqrt(var + bn.eps)
    xhat = (x - mean.reshape(shape)) * inv_std.reshape(shape)
    y = bn.gamma.reshape(shape) * xhat + bn.beta.reshape(shape)
    return y, (xhat, inv_std, bn.gamma, train)


def batchnorm_backward(dy: np.ndarray, cache):
    xhat, inv_std, gamma, train = cache
    shape = (1, -1, 1, 1)
    dgamma = (dy * xhat).sum(axis=(0, 2, 3))
    dbeta = dy.sum(axis=(0, 2, 3))
    g = (gamma * inv_std).reshape(shape)
    if not train:
        return dy * g, dgamma, dbeta
    m = dy.size // dy.shape[1]
    dx = g * (dy - dbeta.reshape(shape) / m - xhat * dgamma.reshape(shape) / m)
    return dx, dgamma, dbeta


def batchnorm(x: np.ndarray, bn: BatchNormParams, mode: str = "infer") -> np.ndarray:
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    return batchnorm_forward(x, bn, train=mode == "train")[0]


# --------------------------------------------------------------------------
# linear and losses
# --------------------------------------------------------------------------

def linear(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input features {x.shape[-1]} != weight columns {weight.shape[1]}")
    return x @ weight.T + bias


def linear_grad(x: np.ndarray, weight: np.ndarray, dy: np.ndarray):
    return dy @ weight, dy.T @ x, dy.sum(axis=0)


def _smoothed_targets(targets: np.ndarray, num_classes: int, smoothing: float, dtype) -> np.ndarray:
    if not 0.0 <= smoothing < 1.0:
        raise ValueError("label_smoothing must lie in [0, 1)")
    targets = np.asarray(targets)
    if targets.min(initial=0) < 0 or targets.max(initial=0) >= num_classes:
        raise ValueError("target class index out of range")
    t = np.full((targets.shape[0], num_classes), smoothing / num_classes, dtype=dtype)
    t[np.arange(targets.shape[0]), targets] += 1.0 - smoothing
    return t


def softmax_cross_entropy(logits: np.ndarray, targets, label_smoothing: float = 0.0):
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    if logits.ndim != 2:
        raise ShapeError(f"logits must be (N, classes), got {logits.shape}")
    n, k = logits.shape
    t = _smoothed_targets(targets, k, label_smoothing, logits.dtype)
    z = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsumexp
    loss = -(t * logp).sum() / n
    grad = (np.exp(logp) - t) / n
    return float(loss), grad


def sigmoid_binary_cross_entropy(logits: np.ndarray, targets, label_smoothing: float = 0.0):
    """Per-class sigmoid BCE on smoothed one-hot targets, summed over classes, averaged over N."""
    if logits.ndim != 2:
        raise ShapeError(f"logits must be (N, classes), got {logits.shape}")
    n, k = logits.shape
    t = _smoothed_targets(targets, k, label_smoothing, logits.dtype)
    # log(1 + exp(-|z|)) keeps both branches stable
    loss = np.maximum(logits, 0) - logits * t + np.log1p(np.exp(-np.abs(logits)))
    sig = 0.5 * (1.0 + np.tanh(0.5 * logits))
    return float(loss.sum() / n), (sig - t) / n
