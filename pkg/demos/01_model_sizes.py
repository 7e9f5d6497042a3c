# Model sizes and compute for every variant.
#
# Nothing here is trained: networks are built with `init=False` in deploy
# mode (one conv per block) and counted.

import numpy as np

from vanillanet.architecture import VARIANTS, ArchSpec, build, flop_breakdown, param_count


def deploy(variant, **kw):
    return build(ArchSpec(variant=variant, mode="deploy", **kw), init=False)


# Default layout, series activation with n=3, 224x224 input.
print(f"{'variant':>8} {'params (M)':>11} {'FLOPs (B)':>10} {'depth':>6}")
for v in VARIANTS:
    g = deploy(v)
    print(f"{v:>8} {param_count(g) / 1e6:>11.2f} {flop_breakdown(g).total / 1e9:>10.2f} {g.depth:>6}")

# The alternative layout widens later and applies the activation after pooling.
print("\nlayout='widen_last', act_after_pool=True")
for v in VARIANTS:
    g = deploy(v, layout="widen_last", act_after_pool=True)
    print(f"{v:>8} {param_count(g) / 1e6:>11.2f} {flop_breakdown(g).total / 1e9:>10.2f}")

# Cost of the series activation as its radius grows.
print("\nVanillaNet-6, activation after pooling")
for n in range(5):
    fb = flop_breakdown(deploy(6, act_n=n, act_after_pool=True))
    print(f"  n={n}: conv {fb.conv / 1e9:.3f}B  series {fb.series / 1e9:.3f}B  total {fb.total / 1e9:.2f}B")

# Where the compute goes, layer by layer.
fb = flop_breakdown(deploy(6))
share = {k: v / fb.total for k, v in fb.per_layer.items()}
for name in sorted(share, key=share.get, reverse=True)[:5]:
    print(f"  {name:<20} {100 * share[name]:5.1f}%")
print("sum of shares", np.round(sum(share.values()), 6))
