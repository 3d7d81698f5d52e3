"""Typed DAG representation of a small CNN.

A :class:`Graph` holds named layer nodes connected by named edges (tensors),
a weight store of float32 arrays, and free-form metadata.  Graphs are treated
as immutable after construction: optimization passes copy first, and weight
arrays are replaced rather than mutated.
"""

from __future__ import annotations

import copy
import re
from dataclasses import dataclass, field
from typing import NamedTuple, TYPE_CHECKING, Union

import numpy as np

if TYPE_CHECKING:  # pragma: no cover
    from .calibrate import CalibrationTable

__all__ = [
    "BatchNorm",
    "Convolution",
    "CycleError",
    "DanglingEdgeError",
    "DanglingWeightError",
    "EdgeShape",
    "EltwiseSum",
    "Graph",
    "GraphError",
    "InnerProduct",
    "Input",
    "LayerKind",
    "Node",
    "Pooling",
    "ReLU",
    "ShapeError",
    "Softmax",
    "graphs_equal",
    "infer_shapes",
    "topo_order",
]

_NAME_RE = re.compile(r"^[A-Za-z0-9_.\-/]+$")


class GraphError(Exception):
    """Base class for graph construction and validation failures."""


class CycleError(GraphError):
    """The node connectivity contains a cycle."""


class ShapeError(GraphError):
    """Tensor shapes are inconsistent along an edge."""


class DanglingEdgeError(GraphError):
    """A node consumes an edge that no node produces."""


class DanglingWeightError(GraphError):
    """A layer references a weight tensor missing from the weight store."""


class EdgeShape(NamedTuple):
    """NCHW shape of one edge; inner-product edges use h = w = 1."""

    n: int
    c: int
    h: int
    w: int

    def volume(self) -> int:
        return self.n * self.c * self.h * self.w


@dataclass
class Input:
    shape: tuple[int, int, int, int]


@dataclass
class Convolution:
    channels: int
    kernel: tuple[int, int]
    stride: tuple[int, int] = (1, 1)
    pad: tuple[int, int] = (0, 0)
    relu: bool = False
    sum_edge: str | None = None
    weight: str = ""
    bias: str | None = None


@dataclass
class BatchNorm:
    """Inference-mode batch norm with fixed per-channel statistics.

    ``mean``/``var``/``scale``/``shift`` name per-channel tensors in the
    graph's weight store.
    """

    mean: str
    var: str
    scale: str
    shift: str
    eps: float = 1e-5


@dataclass
class ReLU:
    slope: float = 0.0


@dataclass
class EltwiseSum:
    pass


@dataclass
class Pooling:
    mode: str  # "max" | "avg"
    kernel: tuple[int, int]
    stride: tuple[int, int]


@dataclass
class InnerProduct:
    features: int
    relu: bool = False
    weight: str = ""
    bias: str | None = None


@dataclass
class Softmax:
    pass


LayerKind = Union[
    Input, Convolution, BatchNorm, ReLU, EltwiseSum, Pooling, InnerProduct, Softmax
]


@dataclass
class Node:
    name: str
    kind: LayerKind
    inputs: list[str]
    outputs: list[str]


@dataclass
class Graph:
    name: str = "model"
    nodes: dict[str, Node] = field(default_factory=dict)
    weights: dict[str, np.ndarray] = field(default_factory=dict)
    metadata: dict[str, str] = field(default_factory=dict)
    quant: "CalibrationTable | None" = None

    def add(
        self,
        name: str,
        kind: LayerKind,
        inputs: list[str] | tuple[str, ...] = (),
        outputs: list[str] | tuple[str, ...] = (),
    ) -> Node:
        if name in self.nodes:
            raise GraphError(f"duplicate node name {name!r}")
        node = Node(name, kind, list(inputs), list(outputs))
        self.nodes[name] = node
        return node

    def edges(self) -> list[str]:
        """All produced edge names, in node declaration order."""
        seen: list[str] = []
        for node in self.nodes.values():
            for e in node.outputs:
                if e not in seen:
                    seen.append(e)
        return seen

    def producer_map(self) -> dict[str, Node]:
        producers: dict[str, Node] = {}
        for node in self.nodes.values():
            for e in node.outputs:
                if e in producers:
                    raise GraphError(
                        f"edge {e!r} produced by both {producers[e].name!r} and {node.name!r}"
                    )
                producers[e] = node
        return producers

    def consumer_map(self) -> dict[str, list[Node]]:
        consumers: dict[str, list[Node]] = {e: [] for e in self.edges()}
        for node in self.nodes.values():
            for e in node.inputs:
                consumers.setdefault(e, []).append(node)
        return consumers

    def input_nodes(self) -> list[Node]:
        return [n for n in self.nodes.values() if isinstance(n.kind, Input)]

    def terminal_edges(self) -> list[str]:
        consumers = self.consumer_map()
        return [e for e in self.edges() if not consumers.get(e)]

    def copy(self) -> "Graph":
        """Structural copy; weight arrays are shared and must not be mutated."""
        g = Graph(self.name, {}, dict(self.weights), dict(self.metadata), self.quant)
        for node in self.nodes.values():
            g.nodes[node.name] = Node(
                node.name, copy.copy(node.kind), list(node.inputs), list(node.outputs)
            )
        return g

    def validate(self) -> None:
        validate_graph(self)


def validate_graph(g: Graph) -> None:
    """Check structural invariants, acyclicity and end-to-end shapes."""
    if not g.input_nodes():
        raise GraphError("graph has no input node")
    for node in g.nodes.values():
        if not _NAME_RE.match(node.name):
            raise GraphError(f"invalid node name {node.name!r}")
        for e in node.inputs + node.outputs:
            if not _NAME_RE.match(e):
                raise GraphError(f"invalid edge name {e!r} on node {node.name!r}")
        if not node.outputs:
            raise GraphError(f"node {node.name!r} has no output edge")

    producers = g.producer_map()
    for node in g.nodes.values():
        for e in node.inputs:
            if e not in producers:
                raise DanglingEdgeError(f"node {node.name!r} consumes unproduced edge {e!r}")

    edge_names = set(producers)
    clash = edge_names & set(g.weights)
    if clash:
        raise GraphError(f"names used for both edges and weight tensors: {sorted(clash)}")

    for node in g.nodes.values():
        k = node.kind
        refs: list[str] = []
        if isinstance(k, (Convolution, InnerProduct)):
            refs.append(k.weight)
            if k.bias is not None:
                refs.append(k.bias)
            if isinstance(k, Convolution) and k.sum_edge is not None:
                if k.sum_edge not in node.inputs:
                    raise GraphError(
                        f"fused sum edge {k.sum_edge!r} of {node.name!r} missing from its inputs"
                    )
        elif isinstance(k, BatchNorm):
            refs.extend([k.mean, k.var, k.scale, k.shift])
        for r in refs:
            if r not in g.weights:
                raise DanglingWeightError(f"node {node.name!r} references missing weight {r!r}")
    for name, arr in g.weights.items():
        if not np.all(np.isfinite(arr)):
            raise GraphError(f"weight tensor {name!r} contains non-finite values")

    topo_order(g)  # cycle check
    infer_shapes(g)  # shape consistency end to end


def topo_order(g: Graph) -> list[str]:
    """Topological node order, ties broken by declaration order."""
    producers = g.producer_map()
    names = list(g.nodes)
    placed: set[str] = set()
    order: list[str] = []
    remaining = set(names)
    while remaining:
        progressed = False
        for name in names:
            if name not in remaining:
                continue
            node = g.nodes[name]
            deps = {producers[e].name for e in node.inputs if e in producers}
            if deps <= placed:
                order.append(name)
                placed.add(name)
                remaining.remove(name)
                progressed = True
        if not progressed:
            raise CycleError(f"cycle through nodes {sorted(remaining)}")
    return order


def _conv_extent(size: int, kernel: int, stride: int, pad: int, where: str) -> int:
    span = size + 2 * pad - kernel
    if span < 0:
        raise ShapeError(f"{where}: kernel {kernel} exceeds padded input extent {size + 2 * pad}")
    return span // stride + 1


def infer_shapes(g: Graph, batch: int | None = None) -> dict[str, EdgeShape]:
    """Assign an NCHW shape to every edge, checking per-layer consistency.

    ``batch`` overrides the batch dimension declared on the input nodes.
    """
    shapes: dict[str, EdgeShape] = {}
    for name in topo_order(g):
        node = g.nodes[name]
        k = node.kind
        if isinstance(k, Input):
            s = EdgeShape(*k.shape)
            if batch is not None:
                s = s._replace(n=batch)
            out = s
        elif isinstance(k, Convolution):
            x = shapes[node.inputs[0]]
            w = g.weights[k.weight]
            if w.ndim != 4 or w.shape[0] != k.channels or w.shape[1] != x.c:
                raise ShapeError(
                    f"conv {name!r}: weight shape {w.shape} does not match "
                    f"{k.channels} output / {x.c} input channels"
                )
            if (w.shape[2], w.shape[3]) != tuple(k.kernel):
                raise ShapeError(f"conv {name!r}: weight kernel {w.shape[2:]} != {k.kernel}")
            if k.bias is not None and g.weights[k.bias].shape != (k.channels,):
                raise ShapeError(f"conv {name!r}: bias length != {k.channels}")
            oh = _conv_extent(x.h, k.kernel[0], k.stride[0], k.pad[0], f"conv {name!r}")
            ow = _conv_extent(x.w, k.kernel[1], k.stride[1], k.pad[1], f"conv {name!r}")
            out = EdgeShape(x.n, k.channels, oh, ow)
            if k.sum_edge is not None and shapes[k.sum_edge] != out:
                raise ShapeError(
                    f"conv {name!r}: fused sum edge {k.sum_edge!r} shape "
                    f"{shapes[k.sum_edge]} != output shape {out}"
                )
        elif isinstance(k, BatchNorm):
            x = shapes[node.inputs[0]]
            for ref in (k.mean, k.var, k.scale, k.shift):
                if g.weights[ref].shape != (x.c,):
                    raise ShapeError(
                        f"batchnorm {name!r}: {ref!r} length {g.weights[ref].shape} "
                        f"!= channel count {x.c}"
                    )
            if np.any(g.weights[k.var] < 0) or not k.eps > 0:
                raise ShapeError(f"batchnorm {name!r}: variance must be >= 0 and eps > 0")
            out = x
        elif isinstance(k, (ReLU, Softmax)):
            out = shapes[node.inputs[0]]
        elif isinstance(k, EltwiseSum):
            if len(node.inputs) < 2:
                raise ShapeError(f"eltwise sum {name!r} needs at least two inputs")
            first = shapes[node.inputs[0]]
            for e in node.inputs[1:]:
                if shapes[e] != first:
                    raise ShapeError(
                        f"eltwise sum {name!r}: operand {e!r} shape {shapes[e]} != {first}"
                    )
            out = first
        elif isinstance(k, Pooling):
            if k.mode not in ("max", "avg"):
                raise ShapeError(f"pooling {name!r}: unknown mode {k.mode!r}")
            x = shapes[node.inputs[0]]
            oh = _conv_extent(x.h, k.kernel[0], k.stride[0], 0, f"pooling {name!r}")
            ow = _conv_extent(x.w, k.kernel[1], k.stride[1], 0, f"pooling {name!r}")
            out = EdgeShape(x.n, x.c, oh, ow)
        elif isinstance(k, InnerProduct):
            x = shapes[node.inputs[0]]
            w = g.weights[k.weight]
            flat = x.c * x.h * x.w
            if w.shape != (k.features, flat):
                raise ShapeError(
                    f"inner product {name!r}: weight shape {w.shape} != ({k.features}, {flat})"
                )
            if k.bias is not None and g.weights[k.bias].shape != (k.features,):
                raise ShapeError(f"inner product {name!r}: bias length != {k.features}")
            out = EdgeShape(x.n, k.features, 1, 1)
        else:  # pragma: no cover - parser rejects unknown kinds first
            raise GraphError(f"unsupported layer kind {type(k).__name__}")
        for e in node.outputs:
            shapes[e] = out
    return shapes


def graphs_equal(a: Graph, b: Graph) -> bool:
    """Structural equality: node order and content, weights, metadata, quant info."""
    if a.name != b.name or list(a.nodes) != list(b.nodes):
        return False
    for na, nb in zip(a.nodes.values(), b.nodes.values()):
        if na.name != nb.name or na.inputs != nb.inputs or na.outputs != nb.outputs:
            return False
        if type(na.kind) is not type(nb.kind) or na.kind != nb.kind:
            return False
    if set(a.weights) != set(b.weights):
        return False
    for name in a.weights:
        wa, wb = a.weights[name], b.weights[name]
        if wa.shape != wb.shape or not np.array_equal(wa, wb):
            return False
    if a.metadata != b.metadata:
        return False
    if (a.quant is None) != (b.quant is None):
        return False
    if a.quant is not None and b.quant is not None:
        if a.quant.entries != b.quant.entries or a.quant.fallback_edges != b.quant.fallback_edges:
            return False
    return True
