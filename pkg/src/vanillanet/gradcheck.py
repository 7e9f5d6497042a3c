"""Finite-difference gradient checking for whole graphs."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import BatchNorm2d, Conv2d, Head, Module, SeriesAct
from .ops import sigmoid_binary_cross_entropy, softmax_cross_entropy

LOSSES = {"ce": softmax_cross_entropy, "bce": sigmoid_binary_cross_entropy}


@dataclass
class GradCheckReport:
    per_type: dict[str, dict] = field(default_factory=dict)  # type -> max_rel_err, checked, skipped
    max_rel_err: float = 0.0
    step: float = 1e-5

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_err <= tol

    def to_dict(self) -> dict:
        return {"schema_version": 1, "per_type": self.per_type, "max_rel_err": self.max_rel_err,
                "step": self.step}


def rel_error(a, b, floor: float = 1e-6) -> np.ndarray:
    """``|a - b| / max(|a|, |b|, floor)``; the floor keeps near-zero gradients from dominating."""
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def layer_type(mod: Module, parent: Module | None) -> str | None:
    if isinstance(mod, Conv2d):
        return "classifier" if isinstance(parent, Head) else "conv"
    if isinstance(mod, BatchNorm2d):
        return "batchnorm"
    if isinstance(mod, SeriesAct):
        return "series_act"
    return None


def _typed_parameters(graph: Module):
    """``(type, dotted name, module, key)`` for every parameter tensor."""
    out = []
    parents = {}
    for name, mod in graph.named_modules():
        for child_name, child in mod.children.items():
            parents[id(child)] = mod
        kind = layer_type(mod, parents.get(id(mod)))
        for key in mod.params:
            if kind is not None:
                out.append((kind, f"{name}.{key}" if name else key, mod, key))
    return out


def grad_check(graph: Module, x: np.ndarray, y: np.ndarray, per_type: int = 100, step: float = 1e-5,
               seed: int = 0, loss: str = "ce", label_smoothing: float = 0.0,
               check_input: bool = True, corrupt=None) -> GradCheckReport:
    """Compare backprop gradients to central differences on a float64 copy of ``graph``.

    Up to ``per_type`` coordinates are drawn per layer type (conv, batchnorm,
    series_act, classifier and, with ``check_input``, the input itself, which
    exercises the parameter-free layers). A probe whose +/- evaluations flip
    any ReLU mask or pooling argmax is retried at ``step / 10`` and skipped
    if it still straddles a kink. ``corrupt(name, grad) -> grad`` lets tests
    tamper with the analytic gradients.
    """
    g = graph.copy().astype(np.float64)
    for _, mod in g.named_modules():
        if isinstance(mod, BatchNorm2d):
            mod.update_stats = False
    x = np.asarray(x, np.float64).copy()
    loss_fn = LOSSES[loss]

    def value() -> float:
        return loss_fn(g.forward(x), y, label_smoothing)[0]

    _, dlogits = loss_fn(g.forward(x), y, label_smoothing)
    base_pattern = g.activation_pattern()
    g.zero_grad()
    dx = g.backward(dlogits)
    analytic: dict[str, np.ndarray] = {}
    targets: dict[str, list] = {}
    for kind, name, mod, key in _typed_parameters(g):
        analytic[name] = mod.grads[key]
        targets.setdefault(kind, []).append((name, mod.params, key))
    if check_input:
        analytic["input"] = dx
        targets["input"] = [("input", {"x": x}, "x")]
    if corrupt is not None:
        analytic = {k: corrupt(k, v.copy()) for k, v in analytic.items()}

    def same_pattern() -> bool:
        pat = g.activation_pattern()
        return len(pat) == len(base_pattern) and all(np.array_equal(a, b) for a, b in zip(pat, base_pattern))

    def probe(arr, idx, h):
        orig = arr[idx]
        arr[idx] = orig + h
        fp = value()
        ok = same_pattern()
        arr[idx] = orig - h
        fm = value()
        ok = ok and same_pattern()
        arr[idx] = orig
        return (fp - fm) / (2 * h), ok

    rng = np.random.default_rng(seed)
    report = GradCheckReport(step=step)
    for kind, entries in targets.items():
        sizes = np.array([store[key].size for _, store, key in entries])
        total = int(sizes.sum())
        picks = rng.choice(total, size=min(per_type, total), replace=False)
        offsets = np.cumsum(sizes) - sizes
        errs, skipped = [], 0
        for flat in np.sort(picks):
            j = int(np.searchsorted(offsets, flat, side="right") - 1)
            name, store, key = entries[j]
            arr = store[key]
            idx = np.unravel_index(int(flat - offsets[j]), arr.shape)
            num, ok = probe(arr, idx, step)
            if not ok:
                num, ok = probe(arr, idx, step / 10)
            if not ok:
                skipped += 1
                continue
            errs.append(float(rel_error(analytic[name][idx], num)))
        worst = max(errs) if errs else 0.0
        report.per_type[kind] = {"max_rel_err": worst, "checked": len(errs), "skipped": skipped}
        report.max_rel_err = max(report.max_rel_err, worst)
    return report
