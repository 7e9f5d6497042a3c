"""Per-forward wall-clock latency measurement."""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass

import numpy as np

from .architecture import Network


@dataclass
class LatencyReport:
    median_ms: float
    p10_ms: float
    p90_ms: float
    mean_ms: float
    iters: int
    warmup: int
    batch_size: int
    input_size: tuple[int, int]

    @classmethod
    def from_times(cls, times_s, warmup, batch_size, input_size) -> "LatencyReport":
        ms = np.asarray(times_s) * 1e3
        return cls(float(np.median(ms)), float(np.percentile(ms, 10)), float(np.percentile(ms, 90)),
                   float(ms.mean()), len(ms), warmup, batch_size, tuple(input_size))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        d["schema_version"] = 1
        return d


def _check(iters: int, warmup: int, batch_size: int):
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if warmup < 0 or batch_size < 1:
        raise ValueError("warmup must be >= 0 and batch_size >= 1")


def _input(graph: Network, batch_size: int, seed: int):
    dtype = next(p for _, p in graph.named_parameters()).dtype
    h, w = graph.spec.input_size
    rng = np.random.default_rng(seed)
    return rng.standard_normal((batch_size, graph.spec.in_channels, h, w)).astype(dtype)


def _timed(graph: Network, x) -> float:
    t = time.perf_counter()
    graph.forward(x)
    return time.perf_counter() - t


def benchmark(graph: Network, batch_size: int = 1, iters: int = 100, warmup: int = 10,
              seed: int = 0) -> LatencyReport:
    """Time ``iters`` inference-mode forwards after ``warmup`` discarded ones."""
    _check(iters, warmup, batch_size)
    x = _input(graph, batch_size, seed)
    was = graph.training
    graph.eval()
    try:
        for _ in range(warmup):
            graph.forward(x)
        times = [_timed(graph, x) for _ in range(iters)]
    finally:
        graph.train(was)
        graph.clear_cache()
    return LatencyReport.from_times(times, warmup, batch_size, graph.spec.input_size)


def paired_benchmark(a: Network, b: Network, batch_size: int = 1, iters: int = 100, warmup: int = 10,
                     seed: int = 0) -> tuple[LatencyReport, LatencyReport]:
    """Benchmark two graphs with alternating forwards so drift affects both alike."""
    _check(iters, warmup, batch_size)
    x = _input(a, batch_size, seed)
    modes = (a.training, b.training)
    a.eval()
    b.eval()
    ta, tb = [], []
    try:
        for _ in range(warmup):
            a.forward(x)
            b.forward(x)
        for i in range(iters):
            first, second = (a, b) if i % 2 == 0 else (b, a)
            t1, t2 = _timed(first, x), _timed(second, x)
            ta.append(t1 if first is a else t2)
            tb.append(t2 if first is a else t1)
    finally:
        a.train(modes[0])
        b.train(modes[1])
        a.clear_cache()
        b.clear_cache()
    size = a.spec.input_size
    return (LatencyReport.from_times(ta, warmup, batch_size, size),
            LatencyReport.from_times(tb, warmup, batch_size, size))
