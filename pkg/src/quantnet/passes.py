"""Semantics-preserving graph rewrites and the pipeline driver.

Four passes, applied by default in this order:

1. ``fold_batchnorm``      - absorb inference-mode batch norm into the
                             preceding convolution's weights and bias.
2. ``fuse_conv_relu``      - absorb zero-slope ReLU into the producing
                             convolution / inner product.
3. ``remove_sparsity``     - when an activation is read only by 1x1 stride-2
                             convolutions, push the striding into its
                             producers so only the needed half is computed.
4. ``fuse_conv_eltwise_sum`` - absorb a two-operand element-wise sum (and a
                             trailing zero-slope ReLU) into the convolution
                             producing one operand.

Every pass takes a valid graph and returns a new graph plus a report of node
and multiply-accumulate counts; inputs are never mutated.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .graph import (
    BatchNorm,
    Convolution,
    EltwiseSum,
    Graph,
    InnerProduct,
    Node,
    Pooling,
    ReLU,
    infer_shapes,
    topo_order,
)

__all__ = [
    "DEFAULT_PASSES",
    "PASSES",
    "PassReport",
    "count_macs",
    "fold_batchnorm",
    "fuse_conv_eltwise_sum",
    "fuse_conv_relu",
    "node_macs",
    "optimize_pipeline",
    "remove_sparsity",
]


@dataclass
class PassReport:
    name: str
    nodes_before: int
    nodes_after: int
    macs_before: int
    macs_after: int
    rewrites: list[tuple[str, str]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "pass": self.name,
            "nodes_before": self.nodes_before,
            "nodes_after": self.nodes_after,
            "macs_before": self.macs_before,
            "macs_after": self.macs_after,
            "rewrites": [{"location": loc, "description": desc} for loc, desc in self.rewrites],
        }


def node_macs(g: Graph, name: str, shapes=None) -> int:
    """Multiply-accumulate count of one node (contractions and BN scaling)."""
    if shapes is None:
        shapes = infer_shapes(g)
    node = g.nodes[name]
    k = node.kind
    if isinstance(k, Convolution):
        out = shapes[node.outputs[0]]
        x = shapes[node.inputs[0]]
        return out.volume() * x.c * k.kernel[0] * k.kernel[1]
    if isinstance(k, InnerProduct):
        x = shapes[node.inputs[0]]
        return x.n * k.features * (x.c * x.h * x.w)
    if isinstance(k, BatchNorm):
        return shapes[node.outputs[0]].volume()
    return 0


def count_macs(g: Graph) -> int:
    shapes = infer_shapes(g)
    return sum(node_macs(g, name, shapes) for name in g.nodes)


def _finish(name: str, before: Graph, after: Graph, rewrites: list[tuple[str, str]]) -> PassReport:
    return PassReport(
        name,
        nodes_before=len(before.nodes),
        nodes_after=len(after.nodes),
        macs_before=count_macs(before),
        macs_after=count_macs(after),
        rewrites=rewrites,
    )


def _drop_unused_weights(g: Graph) -> None:
    used: set[str] = set()
    for node in g.nodes.values():
        k = node.kind
        if isinstance(k, (Convolution, InnerProduct)):
            used.add(k.weight)
            if k.bias is not None:
                used.add(k.bias)
        elif isinstance(k, BatchNorm):
            used.update([k.mean, k.var, k.scale, k.shift])
    for name in list(g.weights):
        if name not in used:
            del g.weights[name]


def _fresh_name(g: Graph, base: str, taken: set[str] | None = None) -> str:
    taken = taken or set()
    existing = set(g.nodes) | set(g.weights) | {e for n in g.nodes.values() for e in n.outputs}
    existing |= taken
    if base not in existing:
        return base
    i = 1
    while f"{base}_{i}" in existing:
        i += 1
    return f"{base}_{i}"


def fold_batchnorm(g: Graph) -> tuple[Graph, PassReport]:
    """Fold each batch norm into the convolution that feeds it.

    With per-channel factor s = scale / sqrt(var + eps), the convolution's
    weights become s*w and its bias s*(b - mean) + shift.  A convolution
    without a bias gains a zero one first.  Batch norms whose input is not a
    dedicated convolution output are left untouched and noted in the report.
    """
    out = g.copy()
    rewrites: list[tuple[str, str]] = []
    for name in topo_order(g):
        node = out.nodes.get(name)
        if node is None or not isinstance(node.kind, BatchNorm):
            continue
        bn = node.kind
        producers = out.producer_map()
        consumers = out.consumer_map()
        prod = producers.get(node.inputs[0])
        foldable = (
            prod is not None
            and isinstance(prod.kind, Convolution)
            and not prod.kind.relu
            and prod.kind.sum_edge is None
            and [c.name for c in consumers[node.inputs[0]]] == [name]
        )
        if not foldable:
            rewrites.append((name, "skipped: input is not a dedicated convolution output"))
            continue
        conv = prod.kind
        shared = any(
            n.name != prod.name
            and isinstance(n.kind, (Convolution, InnerProduct))
            and conv.weight in (n.kind.weight, n.kind.bias)
            for n in out.nodes.values()
        )
        scale = out.weights[bn.scale].astype(np.float64)
        denom = np.sqrt(out.weights[bn.var].astype(np.float64) + bn.eps)
        factor = scale / denom
        w = out.weights[conv.weight].astype(np.float64)
        b = (
            out.weights[conv.bias].astype(np.float64)
            if conv.bias is not None
            else np.zeros(conv.channels, dtype=np.float64)
        )
        new_w = (factor[:, None, None, None] * w).astype(np.float32)
        new_b = (factor * (b - out.weights[bn.mean].astype(np.float64))
                 + out.weights[bn.shift].astype(np.float64)).astype(np.float32)

        w_name = conv.weight
        if shared:
            w_name = _fresh_name(out, conv.weight + "_folded")
            conv.weight = w_name
        out.weights[w_name] = new_w
        if conv.bias is None:
            conv.bias = _fresh_name(out, prod.name + "_b")
        out.weights[conv.bias] = new_b

        prod.outputs = list(node.outputs)
        del out.nodes[name]
        rewrites.append((prod.name, f"folded batchnorm {name} into convolution"))
    if any(not desc.startswith("skipped") for _, desc in rewrites):
        _drop_unused_weights(out)
    return out, _finish("fold_batchnorm", g, out, rewrites)


def fuse_conv_relu(g: Graph) -> tuple[Graph, PassReport]:
    """Absorb zero-slope ReLU nodes into their producing affine layer.

    Fires only when the ReLU is the sole consumer of a convolution or
    inner-product output; leaky slopes are never fused.
    """
    out = g.copy()
    rewrites: list[tuple[str, str]] = []
    for name in topo_order(g):
        node = out.nodes.get(name)
        if node is None or not isinstance(node.kind, ReLU) or node.kind.slope != 0.0:
            continue
        producers = out.producer_map()
        consumers = out.consumer_map()
        prod = producers.get(node.inputs[0])
        if prod is None or not isinstance(prod.kind, (Convolution, InnerProduct)):
            continue
        if prod.kind.relu:
            continue
        if [c.name for c in consumers[node.inputs[0]]] != [name]:
            continue
        prod.kind.relu = True
        prod.outputs = list(node.outputs)
        del out.nodes[name]
        rewrites.append((prod.name, f"fused relu {name} into {prod.name}"))
    return out, _finish("fuse_conv_relu", g, out, rewrites)


def fuse_conv_eltwise_sum(g: Graph) -> tuple[Graph, PassReport]:
    """Absorb two-operand element-wise sums into a producing convolution.

    The convolution keeps its own input and gains the other operand as a
    fused sum applied after the bias; a zero-slope ReLU that solely consumes
    the sum is absorbed at the same time.  When both operands come from
    eligible convolutions, the one later in topological order wins.
    """
    out = g.copy()
    rewrites: list[tuple[str, str]] = []
    for name in topo_order(g):
        node = out.nodes.get(name)
        if node is None or not isinstance(node.kind, EltwiseSum) or len(node.inputs) != 2:
            continue
        if node.inputs[0] == node.inputs[1]:
            continue
        producers = out.producer_map()
        consumers = out.consumer_map()
        order = topo_order(out)
        candidates = []
        for e in node.inputs:
            prod = producers.get(e)
            if (
                prod is not None
                and isinstance(prod.kind, Convolution)
                and prod.kind.sum_edge is None
                and not prod.kind.relu
                and [c.name for c in consumers[e]] == [name]
            ):
                candidates.append(prod)
        if not candidates:
            continue
        conv_node = max(candidates, key=lambda n: order.index(n.name))
        other_edge = next(e for e in node.inputs if e != conv_node.outputs[0])
        conv_node.kind.sum_edge = other_edge
        conv_node.inputs.append(other_edge)
        conv_node.outputs = list(node.outputs)
        del out.nodes[name]
        rewrites.append((conv_node.name, f"fused element-wise sum {name} into {conv_node.name}"))

        sum_out = conv_node.outputs[0]
        consumers = out.consumer_map()
        tail = consumers.get(sum_out, [])
        if (
            len(tail) == 1
            and isinstance(tail[0].kind, ReLU)
            and tail[0].kind.slope == 0.0
            and not conv_node.kind.relu
        ):
            relu_node = tail[0]
            conv_node.kind.relu = True
            conv_node.outputs = list(relu_node.outputs)
            del out.nodes[relu_node.name]
            rewrites.append((conv_node.name, f"fused relu {relu_node.name} into {conv_node.name}"))
    return out, _finish("fuse_conv_eltwise_sum", g, out, rewrites)


def _strided_consumers(g: Graph, edge: str):
    """All consumers, if every one is a 1x1 stride-2 unpadded convolution
    reading ``edge`` as its data input."""
    consumers = g.consumer_map().get(edge, [])
    if not consumers:
        return None
    for c in consumers:
        k = c.kind
        if not (
            isinstance(k, Convolution)
            and k.kernel == (1, 1)
            and k.stride == (2, 2)
            and k.pad == (0, 0)
            and c.inputs[0] == edge
            and k.sum_edge != edge
        ):
            return None
    return consumers


def _producer_region(g: Graph, edge: str):
    """Resolve which producers must emit the strided half of ``edge``.

    Walks upward through element-wise nodes (ReLU, element-wise sum) along
    sole-consumer edges.  Returns (convs to stride-double, inputs needing an
    inserted 1x1 stride-2 pooling as (edge, consumer) pairs), or None when no
    stride-1 convolution is available to restride.
    """
    producers = g.producer_map()
    consumers = g.consumer_map()
    head = producers.get(edge)
    if head is None:
        return None

    to_double: list[Node] = []
    to_pool: list[tuple[str, Node]] = []

    def conv_eligible(n: Node, via_edge: str, reader: Node) -> bool:
        return (
            isinstance(n.kind, Convolution)
            and n.kind.stride == (1, 1)
            and n.kind.sum_edge is None
            and [c.name for c in consumers[via_edge]] == [reader.name]
        )

    if isinstance(head.kind, Convolution):
        if head.kind.stride == (1, 1) and head.kind.sum_edge is None:
            return [head], []
        return None
    if not isinstance(head.kind, (ReLU, EltwiseSum)):
        return None

    region = {head.name}
    stack = [head]
    while stack:
        node = stack.pop()
        for e in node.inputs:
            prod = producers.get(e)
            if prod is None:
                to_pool.append((e, node))
                continue
            sole = [c.name for c in consumers[e]] == [node.name]
            if isinstance(prod.kind, (ReLU, EltwiseSum)) and sole and prod.name not in region:
                region.add(prod.name)
                stack.append(prod)
            elif conv_eligible(prod, e, node):
                to_double.append(prod)
            else:
                to_pool.append((e, node))
    if not to_double:
        return None
    return to_double, to_pool


def remove_sparsity(g: Graph) -> tuple[Graph, PassReport]:
    """Push striding above activations read only by 1x1 stride-2 convolutions.

    Matched producer convolutions double their stride so only the consumed
    half of the activation is computed, the 1x1 consumers drop to stride 1,
    and any other input of the producing element-wise region gets a 1x1
    stride-2 max pooling inserted to match.  Since a 1x1 window selects a
    single element, the rewrite is value-preserving.
    """
    out = g.copy()
    rewrites: list[tuple[str, str]] = []
    changed = True
    while changed:
        changed = False
        for edge in out.edges():
            strided = _strided_consumers(out, edge)
            if strided is None:
                continue
            region = _producer_region(out, edge)
            if region is None:
                continue
            to_double, to_pool = region
            for conv_node in to_double:
                k = conv_node.kind
                k.stride = (k.stride[0] * 2, k.stride[1] * 2)
                rewrites.append((conv_node.name, "doubled producer stride to emit the consumed half"))
            taken: set[str] = set()
            for pool_edge, reader in to_pool:
                pool_name = _fresh_name(out, f"{pool_edge}_halve", taken)
                taken.add(pool_name)
                new_edge = _fresh_name(out, f"{pool_edge}_half", taken)
                taken.add(new_edge)
                out.nodes[pool_name] = Node(
                    pool_name,
                    Pooling(mode="max", kernel=(1, 1), stride=(2, 2)),
                    [pool_edge],
                    [new_edge],
                )
                reader.inputs = [new_edge if e == pool_edge else e for e in reader.inputs]
                if isinstance(reader.kind, Convolution) and reader.kind.sum_edge == pool_edge:
                    reader.kind.sum_edge = new_edge
                rewrites.append((pool_name, f"inserted 1x1 stride-2 pooling on {pool_edge}"))
            for c in strided:
                c.kind.stride = (1, 1)
                rewrites.append((c.name, "consumer now reads the pre-strided half at stride 1"))
            changed = True
            break
    return out, _finish("remove_sparsity", g, out, rewrites)


PASSES = {
    "fold_batchnorm": fold_batchnorm,
    "fuse_conv_relu": fuse_conv_relu,
    "remove_sparsity": remove_sparsity,
    "fuse_conv_eltwise_sum": fuse_conv_eltwise_sum,
}

DEFAULT_PASSES = ["fold_batchnorm", "fuse_conv_relu", "remove_sparsity", "fuse_conv_eltwise_sum"]


def optimize_pipeline(
    g: Graph, passes: list[str] | None = None
) -> tuple[Graph, list[PassReport]]:
    """Apply the named passes in order; ``None`` means the default pipeline."""
    if passes is None:
        passes = list(DEFAULT_PASSES)
    unknown = [p for p in passes if p not in PASSES]
    if unknown:
        raise ValueError(f"unknown pass name(s): {unknown}; known: {sorted(PASSES)}")
    reports: list[PassReport] = []
    current = g
    for name in passes:
        current, report = PASSES[name](current)
        reports.append(report)
    return current, reports
