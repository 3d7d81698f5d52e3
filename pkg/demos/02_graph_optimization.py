#!/usr/bin/env python3
"""Apply the four graph optimization passes to a two-block residual network.

Shows the node / multiply-accumulate trend per pass and verifies that the
optimized graph still computes the same function.
"""

import numpy as np

import quantnet as qn


def build_residual_net(seed=0):
    rng = np.random.default_rng(seed)
    g = qn.Graph("demo_resnet")

    def conv_w(name, *shape):
        g.weights[name] = rng.normal(0, 0.25, shape).astype(np.float32)
        return name

    def bn(prefix, c):
        g.weights[f"{prefix}m"] = rng.normal(0, 0.1, c).astype(np.float32)
        g.weights[f"{prefix}v"] = rng.uniform(0.5, 1.5, c).astype(np.float32)
        g.weights[f"{prefix}s"] = rng.uniform(0.5, 1.5, c).astype(np.float32)
        g.weights[f"{prefix}t"] = rng.normal(0, 0.1, c).astype(np.float32)
        return qn.BatchNorm(f"{prefix}m", f"{prefix}v", f"{prefix}s", f"{prefix}t", 1e-5)

    g.add("in0", qn.Input((1, 4, 8, 8)), [], ["x0"])
    # residual block with identity shortcut
    g.add("a1", qn.Convolution(4, (3, 3), (1, 1), (1, 1), weight=conv_w("a1w", 4, 4, 3, 3)),
          ["x0"], ["a1c"])
    g.add("a1bn", bn("a1", 4), ["a1c"], ["a1n"])
    g.add("a1relu", qn.ReLU(), ["a1n"], ["a1r"])
    g.add("a2", qn.Convolution(4, (3, 3), (1, 1), (1, 1), weight=conv_w("a2w", 4, 4, 3, 3)),
          ["a1r"], ["a2c"])
    g.add("a2bn", bn("a2", 4), ["a2c"], ["a2n"])
    g.add("asum", qn.EltwiseSum(), ["a2n", "x0"], ["as_"])
    g.add("arelu", qn.ReLU(), ["as_"], ["xA"])
    # downsampling block: both branch heads read xA with 1x1 stride-2 convs
    g.add("b1", qn.Convolution(8, (1, 1), (2, 2), weight=conv_w("b1w", 8, 4, 1, 1)),
          ["xA"], ["b1c"])
    g.add("b1bn", bn("b1", 8), ["b1c"], ["b1n"])
    g.add("b2a", qn.Convolution(4, (1, 1), (2, 2), weight=conv_w("b2aw", 4, 4, 1, 1)),
          ["xA"], ["b2ac"])
    g.add("b2abn", bn("b2a", 4), ["b2ac"], ["b2an"])
    g.add("b2arelu", qn.ReLU(), ["b2an"], ["b2ar"])
    g.add("b2b", qn.Convolution(8, (3, 3), (1, 1), (1, 1), weight=conv_w("b2bw", 8, 4, 3, 3)),
          ["b2ar"], ["b2bc"])
    g.add("b2bbn", bn("b2b", 8), ["b2bc"], ["b2bn"])
    g.add("bsum", qn.EltwiseSum(), ["b2bn", "b1n"], ["bs_"])
    g.add("brelu", qn.ReLU(), ["bs_"], ["xB"])
    g.validate()
    return g


g = build_residual_net()
x = np.random.default_rng(42).random((1, 4, 8, 8), dtype=np.float32)
baseline = qn.run_fp32(g, x).outputs["xB"]

print(f"{'pass':28s}{'nodes':>12s}{'macs':>16s}{'max |delta|':>14s}")
print(f"{'(original)':28s}{len(g.nodes):>12d}{qn.count_macs(g):>16d}{'-':>14s}")
current = g
for name in qn.DEFAULT_PASSES:
    current, report = qn.PASSES[name](current)
    out = qn.run_fp32(current, x).outputs["xB"]
    delta = np.max(np.abs(out.astype(np.float64) - baseline))
    nodes = f"{report.nodes_before} -> {report.nodes_after}"
    macs = f"{report.macs_before} -> {report.macs_after}"
    print(f"{name:28s}{nodes:>12s}{macs:>16s}{delta:>14.2e}")

print("\nrewrites applied:")
_, reports = qn.optimize_pipeline(g)
for report in reports:
    for location, description in report.rewrites:
        print(f"  [{report.name}] {location}: {description}")

print("\noptimized layers:")
for node in current.nodes.values():
    kind = type(node.kind).__name__
    extras = []
    if getattr(node.kind, "relu", False):
        extras.append("fused-relu")
    if getattr(node.kind, "sum_edge", None):
        extras.append(f"fused-sum({node.kind.sum_edge})")
    if getattr(node.kind, "stride", None) == (2, 2):
        extras.append("stride-2")
    print(f"  {node.name:10s} {kind:12s} {' '.join(extras)}")
