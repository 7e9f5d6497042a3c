"""Deep-training loop: lambda schedule, cosine LR, AdamW/SGD, evaluation."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .activation import LambdaSchedule, lambda_value
from .architecture import Network
from .data import Dataset, iterate_batches, prefetch
from .ops import NumericalError, sigmoid_binary_cross_entropy, softmax_cross_entropy

LOSSES = {"ce": softmax_cross_entropy, "bce": sigmoid_binary_cross_entropy}


@dataclass
class TrainConfig:
    epochs: int = 10
    deep_epochs: int | None = None  # None -> max(1, epochs // 3)
    base_lr: float = 2e-3
    weight_decay: float = 0.05
    batch_size: int = 128
    optimizer: str = "adamw"
    betas: tuple[float, float] = (0.9, 0.999)
    momentum: float = 0.9
    label_smoothing: float = 0.1
    loss: str = "ce"
    seed: int = 0
    dtype: str = "float32"
    warmup_epochs: float = 0.0
    flip_prob: float = 0.0
    crop_padding: int = 0
    prefetch: int = 0

    def __post_init__(self):
        if self.deep_epochs is None:
            self.deep_epochs = max(1, self.epochs // 3)
        self.betas = tuple(self.betas)
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not 1 <= self.deep_epochs <= self.epochs:
            raise ValueError("deep_epochs must lie in [1, epochs]")
        if self.base_lr < 0:
            raise ValueError("base_lr must be non-negative")
        if self.optimizer not in ("adamw", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError("warmup_epochs must lie in [0, epochs)")

    @property
    def schedule(self) -> LambdaSchedule:
        return LambdaSchedule(self.deep_epochs, self.epochs)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


def cosine_lr(epoch: float, config: TrainConfig) -> float:
    """Linear warmup to ``base_lr`` then half-cosine decay to 0 at ``epochs``.

    ``epoch`` may be fractional so the schedule can advance per step.
    """
    base, warm = config.base_lr, config.warmup_epochs
    if warm > 0 and epoch < warm:
        return base * epoch / warm
    t = min(max((epoch - warm) / (config.epochs - warm), 0.0), 1.0)
    return 0.5 * base * (1.0 + math.cos(math.pi * t))


def decays(name: str) -> bool:
    """Weight decay applies to conv weights and series kernels only."""
    return name.endswith((".weight", ".a"))


class AdamW:
    def __init__(self, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, graph: Network, lr: float):
        self.t += 1
        grads = dict(graph.named_grads())
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for name, p in graph.named_parameters():
            g = grads.get(name)
            if g is None:
                continue
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            if self.weight_decay and decays(name):
                p -= lr * self.weight_decay * p
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"m.{k}": v for k, v in self.m.items()}
        out.update({f"v.{k}": v for k, v in self.v.items()})
        return out

    def state_meta(self) -> dict:
        return {"name": "adamw", "t": self.t, "betas": [self.b1, self.b2], "eps": self.eps,
                "weight_decay": self.weight_decay}

    def load_state(self, meta: dict, arrays: dict[str, np.ndarray]):
        self.t = meta.get("t", 0)
        self.m = {k[2:]: v for k, v in arrays.items() if k.startswith("m.")}
        self.v = {k[2:]: v for k, v in arrays.items() if k.startswith("v.")}


class SGD:
    def __init__(self, momentum: float = 0.9, weight_decay: float = 0.0):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buf: dict[str, np.ndarray] = {}

    def step(self, graph: Network, lr: float):
        grads = dict(graph.named_grads())
        for name, p in graph.named_parameters():
            g = grads.get(name)
            if g is None:
                continue
            if self.weight_decay and decays(name):
                g = g + self.weight_decay * p
            b = self.buf.setdefault(name, np.zeros_like(p))
            b *= self.momentum
            b += g
            p -= lr * b

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {f"buf.{k}": v for k, v in self.buf.items()}

    def state_meta(self) -> dict:
        return {"name": "sgd", "momentum": self.momentum, "weight_decay": self.weight_decay}

    def load_state(self, meta: dict, arrays: dict[str, np.ndarray]):
        self.buf = {k[4:]: v for k, v in arrays.items() if k.startswith("buf.")}


def make_optimizer(config: TrainConfig):
    if config.optimizer == "adamw":
        return AdamW(config.betas, weight_decay=config.weight_decay)
    return SGD(config.momentum, weight_decay=config.weight_decay)


def _forward_loss(graph: Network, x, y, loss_name: str, smoothing: float):
    logits = graph.forward(x)
    loss, dlogits = LOSSES[loss_name](logits, y, smoothing)
    if not math.isfinite(loss):
        where = graph.locate_nonfinite(x)
        raise NumericalError(f"non-finite loss; first non-finite activation in layer {where!r}")
    return logits, loss, dlogits


def train_epoch(graph: Network, data: Dataset, optimizer, epoch: int, config: TrainConfig,
                rng: np.random.Generator | None = None, shuffle: bool = True) -> dict:
    """One pass over ``data``; lambda is set from the schedule at epoch start."""
    rng = rng if rng is not None else np.random.default_rng(config.seed + epoch)
    lam = lambda_value(epoch, config.schedule)
    graph.set_lambda(lam if graph.spec.deep_train and graph.spec.mode == "train" else 1.0)
    graph.train()
    dtype = np.dtype(config.dtype)
    steps = math.ceil(len(data) / config.batch_size)
    batches = iterate_batches(data, config.batch_size, shuffle=shuffle, rng=rng,
                              flip_prob=config.flip_prob, crop_padding=config.crop_padding)
    total_loss, correct, seen = 0.0, 0, 0
    lr = cosine_lr(epoch, config)
    for i, (x, y) in enumerate(prefetch(batches, config.prefetch)):
        lr = cosine_lr(epoch + i / steps, config)
        x = x.astype(dtype, copy=False)
        logits, loss, dlogits = _forward_loss(graph, x, y, config.loss, config.label_smoothing)
        graph.backward(dlogits.astype(dtype, copy=False))
        optimizer.step(graph, lr)
        total_loss += loss * len(y)
        correct += int((logits.argmax(axis=1) == y).sum())
        seen += len(y)
    graph.clear_cache()
    return {"epoch": epoch, "loss": total_loss / seen, "acc": correct / seen, "lam": graph.lam, "lr": lr}


def evaluate(graph: Network, data: Dataset, batch_size: int = 256, label_smoothing: float = 0.0,
             loss: str = "ce", batch_stats: bool = False) -> tuple[float, float]:
    """Mean loss and top-1 accuracy.

    ``batch_stats=True`` normalizes with each batch's own statistics (as in
    training) without touching the running buffers.
    """
    was = graph.training
    bns = [m for _, m in graph.named_modules() if hasattr(m, "update_stats")]
    graph.train(batch_stats)
    for m in bns:
        m.update_stats = False
    dtype = next(p for _, p in graph.named_parameters()).dtype
    total, correct = 0.0, 0
    try:
        for x, y in iterate_batches(data, batch_size):
            logits = graph.forward(x.astype(dtype, copy=False))
            l, _ = LOSSES[loss](logits, y, label_smoothing)
            total += l * len(y)
            correct += int((logits.argmax(axis=1) == y).sum())
    finally:
        for m in bns:
            m.update_stats = True
        graph.train(was)
        graph.clear_cache()
    return total / len(data), correct / len(data)


def fit(graph: Network, train: Dataset, config: TrainConfig, test: Dataset | None = None,
        optimizer=None, callback=None) -> list[dict]:
    """Train for ``config.epochs`` epochs; returns per-epoch metric rows."""
    optimizer = optimizer if optimizer is not None else make_optimizer(config)
    rows = []
    rng = np.random.default_rng(config.seed)
    for epoch in range(config.epochs):
        row = train_epoch(graph, train, optimizer, epoch, config, rng=rng)
        if test is not None:
            row["test_loss"], row["test_acc"] = evaluate(graph, test, loss=config.loss)
        rows.append(row)
        if callback is not None:
            callback(row)
    return rows
