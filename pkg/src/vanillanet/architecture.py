"""VanillaNet builder plus parameter and FLOP accounting."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .activation import series_flops, series_flops_literal
from .layers import (
    SHORTCUT_MODES,
    BatchNorm2d,
    Conv2d,
    Head,
    LambdaAct,
    Module,
    SeriesAct,
    Unit,
)
from .ops import NumericalError, ShapeError

VARIANTS = tuple(range(5, 14))
BASE_WIDTH = 512

# Stage 3 blocks per variant: VanillaNet-7 has one, each extra depth adds one.
_STAGE3_BLOCKS = {v: max(1, v - 6) for v in VARIANTS}
LAYOUTS = ("widen_first", "widen_last")


def scale_width(channels: int, width_scale: float) -> int:
    """Nearest multiple of 8, at least 8."""
    return max(8, int(round(channels * width_scale / 8)) * 8)


@dataclass(frozen=True)
class BlockPlan:
    name: str  # e.g. "stem" or "stages.3.1"
    c_in: int
    c_out: int
    k: int
    stride: int
    pool: bool
    stage: int  # 0 for the stem


@dataclass
class ArchSpec:
    """Declarative network description.

    ``layout="widen_first"`` widens in the first block of a stage, so extra
    blocks run at the stage's output width. ``layout="widen_last"`` keeps the
    extra stage-1 block at width C and the extra stage-3 blocks at width 4C,
    widening only in the last block; its parameter totals match the published
    model sizes for VanillaNet-7 and deeper.
    """

    variant: int = 6
    width_scale: float = 1.0
    input_size: tuple[int, int] = (224, 224)
    in_channels: int = 3
    num_classes: int = 1000
    act_n: int = 3
    mode: str = "train"
    shortcut: str = "none"
    deep_train: bool = True
    layout: str = "widen_first"
    skip_stage3_pool: bool = False
    act_after_pool: bool = False
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    init_std: float = 0.2

    def __post_init__(self):
        self.input_size = tuple(int(s) for s in self.input_size)
        self.validate()

    def validate(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant}; expected one of {VARIANTS}")
        if self.width_scale <= 0:
            raise ValueError("width_scale must be positive")
        if self.mode not in ("train", "deploy"):
            raise ValueError(f"mode must be 'train' or 'deploy', got {self.mode!r}")
        if self.shortcut not in SHORTCUT_MODES:
            raise ValueError(f"shortcut must be one of {SHORTCUT_MODES}")
        if self.layout not in LAYOUTS:
            raise ValueError(f"layout must be one of {LAYOUTS}")
        if self.act_n < 0 or self.in_channels < 1 or self.num_classes < 1:
            raise ValueError("act_n >= 0, in_channels >= 1 and num_classes >= 1 required")
        div = self.input_divisor
        for s in self.input_size:
            if s % div:
                raise ShapeError(f"input size {self.input_size} must be divisible by {div}")

    @property
    def input_divisor(self) -> int:
        return 4 * 2 ** (2 if self.skip_stage3_pool else 3)

    @property
    def base_channels(self) -> int:
        return scale_width(BASE_WIDTH, self.width_scale)

    def stage_widths(self) -> tuple[int, ...]:
        """Output width of the stem and of stages 1-4 (stage 4 absent for VanillaNet-5)."""
        c = self.base_channels
        widths = (c, 2 * c, 4 * c, 8 * c)
        return widths if self.variant == 5 else widths + (8 * c,)

    def plan(self) -> list[BlockPlan]:
        c = self.base_channels
        blocks = [BlockPlan("stem", self.in_channels, c, 4, 4, False, 0)]

        def stage(idx, c_in, c_out, count, pool, mid=None):
            # the widening block is last when ``mid`` is given, else first
            for b in range(count):
                if mid is None:
                    ci, co = (c_in if b == 0 else c_out), c_out
                else:
                    ci = c_in if b == 0 else mid
                    co = c_out if b == count - 1 else mid
                blocks.append(BlockPlan(f"stages.{idx}.{b}", ci, co, 1, 1, pool and b == count - 1, idx))

        s1 = 1 if self.variant <= 6 else 2
        s3 = _STAGE3_BLOCKS[self.variant]
        late = self.layout == "widen_last"
        stage(1, c, 2 * c, s1, True, mid=c if late else None)
        stage(2, 2 * c, 4 * c, 1, True)
        stage(3, 4 * c, 8 * c, s3, not self.skip_stage3_pool, mid=4 * c if late else None)
        if self.variant != 5:
            stage(4, 8 * c, 8 * c, 1, False)
        return blocks

    @property
    def feature_channels(self) -> int:
        return self.plan()[-1].c_out

    def feature_sizes(self) -> list[tuple[int, int]]:
        """Spatial size after the stem and after each stage."""
        h, w = self.input_size[0] // 4, self.input_size[1] // 4
        sizes = [(h, w)]
        plan = self.plan()
        for i, blk in enumerate(plan[1:], start=1):
            if blk.pool:
                h, w = h // 2, w // 2
            if i == len(plan) - 1 or plan[i + 1].stage != blk.stage:
                sizes.append((h, w))
        return sizes

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        return cls(**d)

    def with_(self, **kw) -> "ArchSpec":
        return replace(self, **kw)


class Network(Module):
    """Ordered chain of :class:`Unit` blocks followed by the classifier head."""

    def __init__(self, spec: ArchSpec):
        super().__init__()
        self.spec = spec
        self.lam = 0.0 if spec.mode == "train" and spec.deep_train else 1.0

    def units(self) -> list[tuple[str, Unit]]:
        return [(n, m) for n, m in self.children.items() if isinstance(m, Unit)]

    @property
    def head(self) -> Head:
        return self.children["head"]

    def set_lambda(self, lam: float):
        if not 0.0 <= lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {lam}")
        self.lam = float(lam)
        for _, mod in self.named_modules():
            if isinstance(mod, LambdaAct):
                mod.lam = self.lam

    def forward(self, x):
        for layer in self.children.values():
            x = layer.forward(x)
        return x

    def backward(self, dy):
        for layer in reversed(list(self.children.values())):
            dy = layer.backward(dy)
        return dy

    def predict(self, x, batch_size: int = 256) -> np.ndarray:
        was = self.training
        self.eval()
        try:
            return np.concatenate([self.forward(x[i:i + batch_size]) for i in range(0, len(x), batch_size)])
        finally:
            self.train(was)

    def locate_nonfinite(self, x) -> str | None:
        """Name of the first leaf layer whose output contains NaN/Inf, if any."""
        for name, child in self.children.items():
            if isinstance(child, Unit):
                z = x
                for sub in child.body:
                    z = child.children[sub].forward(z)
                    if not np.isfinite(z).all():
                        return f"{name}.{sub}"
                x = child.forward(x)
                if not np.isfinite(x).all():
                    return f"{name}.act"
            else:
                x = child.forward(x)
                if not np.isfinite(x).all():
                    return name
        return None

    def check_finite_forward(self, x):
        y = self.forward(x)
        if not np.isfinite(y).all():
            where = self.locate_nonfinite(x)
            raise NumericalError(f"non-finite activation first produced by layer {where!r}")
        return y

    def conv_layers(self) -> list[tuple[str, Conv2d]]:
        return [(n, m) for n, m in self.named_modules() if isinstance(m, Conv2d)]

    @property
    def depth(self) -> int:
        """Conv layers after merging each block to a single conv (stem, stages, classifier)."""
        return len(self.units()) + 1

    def __repr__(self):
        s = self.spec
        return (f"Network(VanillaNet-{s.variant}, mode={s.mode}, width_scale={s.width_scale:g}, "
                f"act_n={s.act_n}, deep_train={s.deep_train}, shortcut={s.shortcut}, lam={self.lam:g})")


def _unit_body(blk: BlockPlan, spec: ArchSpec, rng, dtype, init: bool):
    conv = dict(rng=rng, std=spec.init_std, dtype=dtype, init=init)
    bn = dict(eps=spec.bn_eps, momentum=spec.bn_momentum, dtype=dtype)
    if spec.mode == "deploy":
        return [("conv", Conv2d(blk.c_in, blk.c_out, blk.k, blk.stride, **conv))]
    body = [("conv1", Conv2d(blk.c_in, blk.c_out, blk.k, blk.stride, **conv)),
            ("bn1", BatchNorm2d(blk.c_out, **bn))]
    if spec.deep_train:
        body += [("blend", LambdaAct(0.0)),
                 ("conv2", Conv2d(blk.c_out, blk.c_out, 1, 1, **conv)),
                 ("bn2", BatchNorm2d(blk.c_out, **bn))]
    return body


def build(spec: ArchSpec, seed: int = 0, dtype=np.float32, init: bool = True) -> Network:
    """Instantiate the layer graph for ``spec``.

    With ``init=False`` weights are zero-filled, which is enough for
    counting and far cheaper at full width.
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    net = Network(spec)
    for blk in spec.plan():
        body = _unit_body(blk, spec, rng, dtype, init)
        act = SeriesAct(blk.c_out, spec.act_n, rng=rng, std=spec.init_std, dtype=dtype, init=init)
        shortcut = spec.shortcut if blk.stage > 0 else "none"
        net.children[blk.name] = Unit(body, act, blk.pool, shortcut, spec.act_after_pool)
    net.children["head"] = Head(spec.feature_channels, spec.num_classes, rng=rng,
                                std=spec.init_std, dtype=dtype, init=init)
    net.set_lambda(net.lam)
    return net


def add_shortcut(graph: Network, mode: str) -> Network:
    """Copy of ``graph`` with parameter-free shortcuts on every stage block."""
    if mode not in SHORTCUT_MODES:
        raise ValueError(f"shortcut must be one of {SHORTCUT_MODES}")
    if mode == "none":
        return graph
    out = graph.copy()
    out.spec = out.spec.with_(shortcut=mode)
    for name, unit in out.units():
        if name != "stem":
            unit.shortcut = mode
    return out


# --------------------------------------------------------------------------
# accounting
# --------------------------------------------------------------------------

def param_count(graph: Module) -> int:
    return int(sum(p.size for _, p in graph.named_parameters()))


@dataclass
class FlopBreakdown:
    conv: int = 0
    series: int = 0
    pool: int = 0
    batchnorm: int = 0
    per_layer: dict = field(default_factory=dict)

    @property
    def total(self) -> int:
        """Headline count: convolutions plus series activations."""
        return self.conv + self.series


def flop_breakdown(graph: Network, input_size=None, literal_series: bool = False) -> FlopBreakdown:
    """Count multiply-accumulates (1 MAC = 1 FLOP) by shape propagation.

    Conv cost is ``H' W' C_in C_out k^2`` at the conv's output resolution.
    Series cost uses ``(2n+1)^2`` taps, or ``n^2`` with ``literal_series``.
    """
    h, w = input_size if input_size is not None else graph.spec.input_size
    fb = FlopBreakdown()
    sflops = series_flops_literal if literal_series else series_flops
    for name, unit in graph.units():
        for sub, layer in unit.body_layers():
            if isinstance(layer, Conv2d):
                c_out, c_in, k, _ = layer.params["weight"].shape
                h = (h + 2 * layer.padding - k) // layer.stride + 1
                w = (w + 2 * layer.padding - k) // layer.stride + 1
                f = h * w * c_in * c_out * k * k
                fb.conv += f
                fb.per_layer[f"{name}.{sub}"] = f
            elif isinstance(layer, BatchNorm2d):
                fb.batchnorm += h * w * layer.params["gamma"].shape[0]
        act = unit.children["act"]
        c = act.params["b"].shape[0]
        for step in unit._steps():
            if step == "pool":
                h, w = h // 2, w // 2
                fb.pool += h * w * c * 4
            else:
                f = sflops(h, w, c, act.n)
                fb.series += f
                fb.per_layer[f"{name}.act"] = f
    c_out, c_in, _, _ = graph.head.children["cls"].params["weight"].shape
    fb.pool += h * w * c_in
    fb.conv += c_in * c_out
    fb.per_layer["head.cls"] = c_in * c_out
    return fb


def flop_count(graph: Network, input_size=None, literal_series: bool = False) -> int:
    return flop_breakdown(graph, input_size, literal_series).total
