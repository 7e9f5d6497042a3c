"""Rewrite a deep-training graph (lambda = 1) into its single-conv deploy form."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .architecture import Network
from .layers import BatchNorm2d, Conv2d, LambdaAct, Unit
from .ops import BatchNormParams, ConvParams, ShapeError

DEFAULT_TOL = {np.dtype(np.float32): 1e-5, np.dtype(np.float64): 1e-10}


class FusionError(ValueError):
    pass


def fold_bn(conv: ConvParams, bn: BatchNormParams) -> ConvParams:
    """Absorb an inference-mode batch norm into the preceding conv.

    ``W'_i = W_i * gamma_i / sigma_i`` and
    ``B'_i = (B_i - mu_i) * gamma_i / sigma_i + beta_i`` with
    ``sigma = sqrt(running_var + eps)``.
    """
    if bn.channels != conv.c_out:
        raise ShapeError(f"batchnorm has {bn.channels} channels, conv outputs {conv.c_out}")
    scale = bn.gamma / bn.sigma
    weight = conv.weight * scale[:, None, None, None]
    bias = (conv.bias - bn.running_mean) * scale + bn.beta
    return ConvParams(weight, bias, conv.stride, conv.padding)


def _check_outer(outer: ConvParams, inner: ConvParams):
    if outer.k != 1 or outer.stride != 1 or outer.padding != 0:
        raise ShapeError("outer conv must be 1x1 with stride 1 and no padding")
    if outer.c_in != inner.c_out:
        raise ShapeError(f"outer conv expects {outer.c_in} channels, inner produces {inner.c_out}")


def merge_conv_1x1(outer: ConvParams, inner: ConvParams) -> ConvParams:
    """Compose two 1x1 convs, ``outer(inner(x))``, into one.

    Argument order follows the matrix product: the merged weight is
    ``W_outer @ W_inner`` and the bias ``W_outer @ B_inner + B_outer``.
    """
    if inner.k != 1 or inner.stride != 1:
        raise ShapeError("inner conv must be 1x1 with stride 1")
    _check_outer(outer, inner)
    wo = outer.weight[:, :, 0, 0]
    wi = inner.weight[:, :, 0, 0]
    weight = (wo @ wi)[:, :, None, None]
    return ConvParams(weight, wo @ inner.bias + outer.bias, 1, inner.padding)


def merge_conv_kxk_1x1(inner: ConvParams, outer: ConvParams) -> ConvParams:
    """Compose a kxk conv followed by a 1x1 conv into one kxk conv.

    Stride and padding come from ``inner``; zero padding stays exact because
    padded taps contribute nothing to either path.
    """
    _check_outer(outer, inner)
    wo = outer.weight[:, :, 0, 0]
    weight = np.einsum("om,mcuv->ocuv", wo, inner.weight)
    return ConvParams(weight, wo @ inner.bias + outer.bias, inner.stride, inner.padding)


@dataclass
class FusionReport:
    passes: list[str] = field(default_factory=list)
    layers: dict[str, float] = field(default_factory=dict)  # rewritten unit -> max abs deviation
    sample_deviation: list[float] = field(default_factory=list)
    max_deviation: float = 0.0
    argmax_agreement: float = 1.0
    tol: float = 0.0
    dtype: str = "float64"
    num_samples: int = 0
    passed: bool = True

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schema_version"] = 1
        return d


def _fuse_unit(unit: Unit, dtype) -> tuple[Unit, list[str]]:
    layers = dict(unit.body_layers())
    passes = []
    if "bn1" not in layers:
        raise FusionError(f"unexpected block structure {list(layers)}")
    c1 = fold_bn(layers["conv1"].conv_params.astype(np.float64), _bn64(layers["bn1"]))
    passes.append("fold_bn")
    if "conv2" in layers:
        c2 = fold_bn(layers["conv2"].conv_params.astype(np.float64), _bn64(layers["bn2"]))
        passes.append("drop_lambda_act")
        if c1.k == 1 and c1.stride == 1:
            merged = merge_conv_1x1(c2, c1)
        else:
            merged = merge_conv_kxk_1x1(c1, c2)
        passes.append("merge_conv")
    else:
        merged = c1
    conv = Conv2d.from_params(merged.astype(dtype))
    act = unit.children["act"].copy()
    out = Unit([("conv", conv)], act, unit.pools, unit.shortcut, unit.act_after_pool)
    out.training = unit.training
    return out, passes


def _bn64(bn: BatchNorm2d) -> BatchNormParams:
    p = bn.bn_params
    return BatchNormParams(*(np.asarray(v, np.float64) for v in
                             (p.gamma, p.beta, p.running_mean, p.running_var)), p.eps, p.momentum)


def fuse_network(graph: Network, lam: float | None = None, num_samples: int = 8,
                 tol: float | None = None, seed: int = 0) -> tuple[Network, FusionReport]:
    """Fold every BN, drop the identity blends and merge each dual-conv block.

    The pass order is fixed (fold, drop, merge): the BN sits between the two
    convs, so merging first would be wrong. Folding is done in float64 and the
    result cast back to the graph's dtype.
    """
    if graph.spec.mode == "deploy":
        return graph, FusionReport(dtype=_dtype_of(graph).name)
    lam = graph.lam if lam is None else lam
    if graph.spec.deep_train and lam != 1.0:
        raise FusionError(f"cannot fuse: λ-activation not identity (λ={lam:g}); "
                          "merging would change the function")
    for _, mod in graph.named_modules():
        if isinstance(mod, LambdaAct) and mod.lam != 1.0:
            raise FusionError(f"cannot fuse: λ-activation not identity (λ={mod.lam:g})")

    dtype = _dtype_of(graph)
    deploy = Network(graph.spec.with_(mode="deploy"))
    deploy.lam = 1.0
    applied: list[str] = []
    for name, child in graph.children.items():
        if isinstance(child, Unit):
            fused, passes = _fuse_unit(child, dtype)
            deploy.children[name] = fused
            for p in passes:
                if p not in applied:
                    applied.append(p)
        else:
            deploy.children[name] = child.copy()
    deploy.train(graph.training)
    report = verify_equivalence(graph, deploy, num_samples=num_samples, tol=tol, dtype=dtype, seed=seed)
    report.passes = applied
    return deploy, report


def _dtype_of(graph) -> np.dtype:
    return next(p for _, p in graph.named_parameters()).dtype


def random_inputs(spec, num_samples: int, seed: int = 0, dtype=np.float64) -> np.ndarray:
    rng = np.random.default_rng(seed)
    h, w = spec.input_size
    return rng.standard_normal((num_samples, spec.in_channels, h, w)).astype(dtype)


def verify_equivalence(g1: Network, g2: Network, num_samples: int = 8, tol: float | None = None,
                       dtype=np.float64, seed: int = 0, batch_size: int = 16) -> FusionReport:
    """Run both graphs (inference mode, cast to ``dtype``) on seeded random inputs.

    Per-layer deviations compare matching units fed the same input (the
    activations of ``g1``), so each rewritten unit is listed once.
    """
    dtype = np.dtype(dtype)
    tol = DEFAULT_TOL.get(dtype, 1e-5) if tol is None else tol
    a = g1 if _dtype_of(g1) == dtype else g1.copy().astype(dtype)
    b = g2 if g2 is g1 else (g2 if _dtype_of(g2) == dtype else g2.copy().astype(dtype))
    modes = (a.training, b.training)
    a.eval()
    b.eval()
    x = random_inputs(g1.spec, num_samples, seed, dtype)
    layer_dev: dict[str, float] = {}
    sample_dev = []
    agree = 0
    try:
        for i in range(0, num_samples, batch_size):
            xb = x[i:i + batch_size]
            z = xb
            for name, ua in a.children.items():
                ub = b.children.get(name)
                za = ua.forward(z)
                if ua is not ub and ub is not None and isinstance(ua, Unit):
                    d = float(np.max(np.abs(za - ub.forward(z))))
                    layer_dev[name] = max(layer_dev.get(name, 0.0), d)
                z = za
            ya = z
            yb = ya if b is a else b.forward(xb)
            sample_dev.extend(np.max(np.abs(ya - yb).reshape(len(xb), -1), axis=1).tolist())
            agree += int((ya.argmax(axis=1) == yb.argmax(axis=1)).sum())
    finally:
        a.train(modes[0])
        b.train(modes[1])
    max_dev = max(sample_dev) if sample_dev else 0.0
    return FusionReport(
        layers=layer_dev, sample_deviation=sample_dev, max_deviation=max_dev,
        argmax_agreement=agree / max(num_samples, 1), tol=tol, dtype=dtype.name,
        num_samples=num_samples, passed=bool(max_dev <= tol),
    )


def calibrate_bn(graph: Network, x: np.ndarray) -> Network:
    """Set every BN's running stats to the exact statistics it sees on ``x``.

    Layers are calibrated in order, so each BN sees inputs produced with
    already-calibrated upstream layers.
    """
    was = graph.training
    graph.eval()
    z = x
    for name, child in graph.children.items():
        if isinstance(child, Unit):
            h = z
            for sub in child.body:
                layer = child.children[sub]
                if isinstance(layer, BatchNorm2d):
                    layer.buffers["running_mean"][...] = h.mean(axis=(0, 2, 3))
                    layer.buffers["running_var"][...] = h.var(axis=(0, 2, 3))
                h = layer.forward(h)
        z = child.forward(z)
    graph.train(was)
    return graph
