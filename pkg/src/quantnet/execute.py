"""Dual-path inference: FP32 reference kernels and a mixed-precision INT8 path.

The FP32 path runs every layer with direct float32 kernels.  The INT8 path
plans per-layer precision from a calibration table: convolutions and inner
products whose inputs are quantizable run on 8-bit integer operands with a
wide integer accumulator, integer bias addition, optional fused element-wise
sum at the accumulator boundary, and a fused ReLU applied on the dequantized
value before output requantization.  Layers whose inputs fall back run the
exact same FP32 kernels as the reference path.
"""

from __future__ import annotations

import hashlib
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .calibrate import CalibrationTable, WEIGHT_BITS, BIAS_BITS, ACTIVATION_BITS, _quant_input_edges
from .graph import (
    BatchNorm,
    Convolution,
    EltwiseSum,
    Graph,
    InnerProduct,
    Input,
    Pooling,
    ReLU,
    ShapeError,
    Softmax,
    infer_shapes,
    topo_order,
)
from .quant import AccumulatorOverflow, QuantParams, QuantTensor, dequantize, qadd, quantize

__all__ = [
    "ExecutionPlan",
    "LayerQuant",
    "PlanError",
    "PlanStep",
    "RunReport",
    "compare_runs",
    "plan",
    "run_fp32",
    "run_int8",
]

_ACC_LO = -(1 << 31)
_ACC_HI = (1 << 31) - 1


class PlanError(Exception):
    """The calibration table is inconsistent with the graph."""


@dataclass(frozen=True)
class LayerQuant:
    """Resolved factors for one INT8 layer step."""

    qx: float
    qw: float
    qb: float
    qy: float | None  # None: output stays FP32
    qsum: float | None  # factor of the fused sum operand, if any


@dataclass
class PlanStep:
    op: str  # "layer" | "quantize" | "dequantize"
    node: str | None = None
    precision: str = "fp32"
    edge: str | None = None
    factor: float | None = None
    lq: LayerQuant | None = None


@dataclass
class ExecutionPlan:
    """Immutable, shareable execution recipe produced by :func:`plan`."""

    steps: list[PlanStep]
    edge_repr: dict[str, str]  # edge -> "q8" | "fp32"
    qweights: dict[str, tuple[np.ndarray, np.ndarray | None]]
    table: CalibrationTable | None

    def precision_of(self, node: str) -> str:
        for step in self.steps:
            if step.op == "layer" and step.node == node:
                return step.precision
        raise KeyError(node)


@dataclass
class RunReport:
    outputs: dict[str, np.ndarray]
    per_layer: list[dict] = field(default_factory=list)
    latency_ms: float = 0.0
    throughput_ips: float = 0.0
    batch: int = 0

    def outputs_digest(self) -> str:
        h = hashlib.sha256()
        for edge in sorted(self.outputs):
            h.update(edge.encode())
            h.update(np.ascontiguousarray(self.outputs[edge], dtype="<f4").tobytes())
        return h.hexdigest()

    def to_dict(self) -> dict:
        return {
            "outputs_digest": self.outputs_digest(),
            "latency_ms": self.latency_ms,
            "throughput_ips": self.throughput_ips,
            "per_layer": self.per_layer,
        }


# ---------------------------------------------------------------------------
# FP32 kernels (shared verbatim by both paths)
# ---------------------------------------------------------------------------

def _conv2d(x: np.ndarray, w: np.ndarray, stride, pad) -> np.ndarray:
    """Direct NCHW convolution accumulated over kernel offsets."""
    n, _, h, wd = x.shape
    oc, _, kh, kw = w.shape
    sh, sw = stride
    ph, pw = pad
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (wd + 2 * pw - kw) // sw + 1
    acc = np.zeros((n, oc, oh, ow), dtype=x.dtype)
    for u in range(kh):
        for v in range(kw):
            window = x[:, :, u : u + sh * (oh - 1) + 1 : sh, v : v + sw * (ow - 1) + 1 : sw]
            acc += np.einsum("nchw,oc->nohw", window, w[:, :, u, v])
    return acc


def _pool2d(x: np.ndarray, mode: str, kernel, stride) -> np.ndarray:
    n, c, h, w = x.shape
    kh, kw = kernel
    sh, sw = stride
    oh = (h - kh) // sh + 1
    ow = (w - kw) // sw + 1
    windows = [
        x[:, :, u : u + sh * (oh - 1) + 1 : sh, v : v + sw * (ow - 1) + 1 : sw]
        for u in range(kh)
        for v in range(kw)
    ]
    if mode == "max":
        return np.maximum.reduce(windows)
    return (np.add.reduce(windows) / (kh * kw)).astype(x.dtype)


def _relu(x: np.ndarray, slope: float = 0.0) -> np.ndarray:
    if slope == 0.0:
        return np.maximum(x, 0)
    return np.where(x >= 0, x, slope * x).astype(x.dtype)


def _softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - np.max(x, axis=1, keepdims=True)
    e = np.exp(shifted)
    return (e / np.sum(e, axis=1, keepdims=True)).astype(x.dtype)


def _eval_fp32(node, g: Graph, bufs: dict[str, np.ndarray]) -> np.ndarray:
    k = node.kind
    if isinstance(k, Convolution):
        x = bufs[node.inputs[0]]
        y = _conv2d(x, g.weights[k.weight], k.stride, k.pad)
        if k.bias is not None:
            y = y + g.weights[k.bias][None, :, None, None]
        if k.sum_edge is not None:
            y = y + bufs[k.sum_edge]
        if k.relu:
            y = _relu(y)
        return y
    if isinstance(k, InnerProduct):
        x = bufs[node.inputs[0]]
        flat = x.reshape(x.shape[0], -1)
        # einsum keeps per-row summation order independent of the batch size,
        # which BLAS matmul does not guarantee; bitwise determinism needs it.
        y = np.einsum("nf,of->no", flat, g.weights[k.weight])
        if k.bias is not None:
            y = y + g.weights[k.bias]
        if k.relu:
            y = _relu(y)
        return y.reshape(y.shape[0], y.shape[1], 1, 1)
    if isinstance(k, BatchNorm):
        x = bufs[node.inputs[0]]
        factor = (g.weights[k.scale] / np.sqrt(g.weights[k.var] + np.float32(k.eps))).astype(
            np.float32
        )
        return (x - g.weights[k.mean][None, :, None, None]) * factor[None, :, None, None] + \
            g.weights[k.shift][None, :, None, None]
    if isinstance(k, ReLU):
        return _relu(bufs[node.inputs[0]], k.slope)
    if isinstance(k, EltwiseSum):
        total = bufs[node.inputs[0]]
        for e in node.inputs[1:]:
            total = total + bufs[e]
        return total
    if isinstance(k, Pooling):
        return _pool2d(bufs[node.inputs[0]], k.mode, k.kernel, k.stride)
    if isinstance(k, Softmax):
        return _softmax(bufs[node.inputs[0]])
    raise ShapeError(f"cannot execute layer kind {type(k).__name__}")


# ---------------------------------------------------------------------------
# Integer kernels
# ---------------------------------------------------------------------------

def _conv2d_int(x: np.ndarray, w: np.ndarray, stride, pad) -> np.ndarray:
    """Direct convolution on int64 operands with an int64 accumulator."""
    n, _, h, wd = x.shape
    oc, _, kh, kw = w.shape
    sh, sw = stride
    ph, pw = pad
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (wd + 2 * pw - kw) // sw + 1
    acc = np.zeros((n, oc, oh, ow), dtype=np.int64)
    for u in range(kh):
        for v in range(kw):
            window = x[:, :, u : u + sh * (oh - 1) + 1 : sh, v : v + sw * (ow - 1) + 1 : sw]
            acc += np.einsum("nchw,oc->nohw", window, w[:, :, u, v])
    return acc


def _check_acc(acc: np.ndarray, layer: str) -> None:
    if acc.size and (acc.min() < _ACC_LO or acc.max() > _ACC_HI):
        raise AccumulatorOverflow(f"accumulator overflow in layer {layer!r}")


# ---------------------------------------------------------------------------
# Planning
# ---------------------------------------------------------------------------

def _entry(table: CalibrationTable, name: str):
    return table.entries.get(name) if table is not None else None


def plan(g: Graph, table: CalibrationTable | None = None) -> ExecutionPlan:
    """Assign a precision to every layer and insert precision boundary steps.

    Convolutions and inner products run INT8 when the table quantizes their
    weights and every activation they read; fallback edges and missing
    entries force FP32.  A quantize step is inserted where an FP32 edge feeds
    an INT8 layer, a dequantize step where a quantized edge feeds an FP32
    layer.
    """
    order = topo_order(g)
    producers = g.producer_map()
    consumer_nodes = g.consumer_map()

    precision: dict[str, str] = {}
    for name in order:
        node = g.nodes[name]
        tag = "fp32"
        if isinstance(node.kind, (Convolution, InnerProduct)) and table is not None:
            xedges = _quant_input_edges(node)
            w_entry = _entry(table, node.kind.weight)
            entries_ok = w_entry is not None and all(
                _entry(table, e) is not None for e in xedges
            )
            fallback = any(e in table.fallback_edges for e in xedges)
            if entries_ok and not fallback:
                if w_entry.precision != WEIGHT_BITS:
                    raise PlanError(
                        f"layer {name!r}: weight entry has p={w_entry.precision}, expected {WEIGHT_BITS}"
                    )
                for e in xedges:
                    if _entry(table, e).precision != ACTIVATION_BITS:
                        raise PlanError(
                            f"layer {name!r}: activation entry {e!r} has "
                            f"p={_entry(table, e).precision}, expected {ACTIVATION_BITS}"
                        )
                if node.kind.bias is not None:
                    b_entry = _entry(table, node.kind.bias)
                    if b_entry is None or b_entry.precision != BIAS_BITS:
                        raise PlanError(f"layer {name!r}: missing or malformed bias entry")
                tag = "int8"
        precision[name] = tag

    def wants_q8(consumer, edge: str) -> bool:
        return precision[consumer.name] == "int8" and edge in _quant_input_edges(consumer)

    edge_repr: dict[str, str] = {}
    for edge in g.edges():
        prod = producers[edge]
        q8 = (
            precision[prod.name] == "int8"
            and _entry(table, edge) is not None
            and any(wants_q8(c, edge) for c in consumer_nodes.get(edge, []))
        )
        edge_repr[edge] = "q8" if q8 else "fp32"

    steps: list[PlanStep] = []
    qweights: dict[str, tuple[np.ndarray, np.ndarray | None]] = {}
    available: dict[str, set[str]] = {}
    for name in order:
        node = g.nodes[name]
        if isinstance(node.kind, Input):
            steps.append(PlanStep("layer", node=name, precision="fp32"))
            available[node.outputs[0]] = {"fp32"}
            continue
        needs = []
        for e in node.inputs:
            needs.append((e, "q8" if wants_q8(node, e) else "fp32"))
        for e, want in needs:
            have = available.setdefault(e, {edge_repr[e]})
            if want not in have:
                if want == "q8":
                    entry = _entry(table, e)
                    if entry is None:  # pragma: no cover - guarded by precision tagging
                        raise PlanError(f"layer {name!r}: no activation entry for edge {e!r}")
                    steps.append(PlanStep("quantize", edge=e, factor=entry.factor))
                else:
                    steps.append(PlanStep("dequantize", edge=e))
                have.add(want)

        lq = None
        if precision[name] == "int8":
            k = node.kind
            qx = _entry(table, node.inputs[0]).factor
            qw = _entry(table, k.weight).factor
            qb = _entry(table, k.bias).factor if k.bias is not None else qw * qx
            out_edge = node.outputs[0]
            out_entry = _entry(table, out_edge)
            qy = out_entry.factor if (edge_repr[out_edge] == "q8" and out_entry) else None
            qsum = None
            if isinstance(k, Convolution) and k.sum_edge is not None:
                qsum = _entry(table, k.sum_edge).factor
            lq = LayerQuant(qx=qx, qw=qw, qb=qb, qy=qy, qsum=qsum)
            zw = quantize(g.weights[k.weight], qw, WEIGHT_BITS).data
            zb = (
                quantize(g.weights[k.bias], qb, BIAS_BITS).data
                if k.bias is not None
                else None
            )
            qweights[name] = (zw, zb)
        steps.append(PlanStep("layer", node=name, precision=precision[name], lq=lq))
        available[node.outputs[0]] = {edge_repr[node.outputs[0]]}
    return ExecutionPlan(steps, edge_repr, qweights, table)


# ---------------------------------------------------------------------------
# Execution
# ---------------------------------------------------------------------------

def _check_input(g: Graph, x: np.ndarray) -> np.ndarray:
    inputs = g.input_nodes()
    if len(inputs) != 1:
        raise ShapeError(f"executor requires exactly one input node, found {len(inputs)}")
    declared = inputs[0].kind.shape
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 4 or x.shape[1:] != tuple(declared[1:]):
        raise ShapeError(
            f"input shape {x.shape} does not match declared {tuple(declared)} "
            "(batch dimension is free)"
        )
    return x


def _split_batches(x: np.ndarray, threads: int) -> list[np.ndarray]:
    if threads <= 1 or x.shape[0] <= 1:
        return [x]
    return [c for c in np.array_split(x, min(threads, x.shape[0])) if c.shape[0]]


def _merge_chunks(chunks: list[dict[str, np.ndarray]]) -> dict[str, np.ndarray]:
    if len(chunks) == 1:
        return chunks[0]
    return {e: np.concatenate([c[e] for c in chunks]) for e in chunks[0]}


def _run(g: Graph, x: np.ndarray, forward, threads: int, keep_all: bool) -> RunReport:
    x = _check_input(g, x)
    shapes = infer_shapes(g, batch=x.shape[0])
    from .passes import node_macs  # late import: passes layers on the graph IR

    timings: dict[str, float] = {}
    precisions: dict[str, str] = {}
    start = time.perf_counter()
    parts = _split_batches(x, threads)
    if len(parts) == 1:
        buf_sets = [forward(parts[0], timings, precisions)]
    else:
        with ThreadPoolExecutor(max_workers=len(parts)) as pool:
            buf_sets = list(pool.map(lambda chunk: forward(chunk, timings, precisions), parts))
    latency_ms = (time.perf_counter() - start) * 1000.0

    bufs = _merge_chunks(buf_sets)
    keep = set(bufs) if keep_all else set(g.terminal_edges())
    outputs = {e: bufs[e] for e in keep}
    per_layer = [
        {
            "name": name,
            "precision": precisions.get(name, "fp32"),
            "time_ms": timings.get(name, 0.0),
            "macs": node_macs(g, name, shapes),
        }
        for name in topo_order(g)
    ]
    return RunReport(
        outputs=outputs,
        per_layer=per_layer,
        latency_ms=latency_ms,
        throughput_ips=x.shape[0] * 1000.0 / latency_ms if latency_ms > 0 else 0.0,
        batch=x.shape[0],
    )


def run_fp32(g: Graph, x: np.ndarray, threads: int = 1, keep_all: bool = False) -> RunReport:
    """Reference float32 forward pass."""

    def forward(chunk: np.ndarray, timings, precisions) -> dict[str, np.ndarray]:
        bufs: dict[str, np.ndarray] = {}
        for name in topo_order(g):
            node = g.nodes[name]
            t0 = time.perf_counter()
            if isinstance(node.kind, Input):
                out = chunk
            else:
                out = _eval_fp32(node, g, bufs)
            bufs[node.outputs[0]] = out.astype(np.float32, copy=False)
            timings[name] = timings.get(name, 0.0) + (time.perf_counter() - t0) * 1000.0
        return bufs

    return _run(g, x, forward, threads, keep_all)


def _int8_affine(node, g: Graph, ex: ExecutionPlan, lq: LayerQuant, q8, fp32) -> None:
    k = node.kind
    zx, qx = q8[node.inputs[0]]
    zw, zb = ex.qweights[node.name]
    if isinstance(k, Convolution):
        acc = _conv2d_int(zx, zw, k.stride, k.pad)
        if zb is not None:
            acc = acc + zb[None, :, None, None]
    else:
        flat = zx.reshape(zx.shape[0], -1)
        acc = flat @ zw.T
        if zb is not None:
            acc = acc + zb
        acc = acc.reshape(acc.shape[0], acc.shape[1], 1, 1)
    _check_acc(acc, node.name)

    carried = QuantTensor(acc, QuantParams(lq.qw * lq.qx, BIAS_BITS))
    if isinstance(k, Convolution) and k.sum_edge is not None:
        zs, qs = q8[k.sum_edge]
        operand = QuantTensor(zs, QuantParams(qs, ACTIVATION_BITS))
        carried = qadd(carried, operand, BIAS_BITS)
    y = dequantize(carried)
    if k.relu:
        y = np.maximum(y, 0)

    out_edge = node.outputs[0]
    if lq.qy is not None and ex.edge_repr[out_edge] == "q8":
        q8[out_edge] = (quantize(y, lq.qy, ACTIVATION_BITS).data, lq.qy)
    else:
        fp32[out_edge] = y.astype(np.float32)


def run_int8(ex: ExecutionPlan, g: Graph, x: np.ndarray, threads: int = 1,
             keep_all: bool = False) -> RunReport:
    """Mixed-precision forward pass following a calibrated execution plan."""

    def forward(chunk: np.ndarray, timings, precisions) -> dict[str, np.ndarray]:
        fp32: dict[str, np.ndarray] = {}
        q8: dict[str, tuple[np.ndarray, float]] = {}
        for step in ex.steps:
            if step.op == "quantize":
                t0 = time.perf_counter()
                q8[step.edge] = (
                    quantize(fp32[step.edge], step.factor, ACTIVATION_BITS).data,
                    step.factor,
                )
                key = f"quantize:{step.edge}"
            elif step.op == "dequantize":
                t0 = time.perf_counter()
                z, q = q8[step.edge]
                fp32[step.edge] = (q * z).astype(np.float32)
                key = f"dequantize:{step.edge}"
            else:
                node = g.nodes[step.node]
                precisions[node.name] = step.precision
                t0 = time.perf_counter()
                key = node.name
                if isinstance(node.kind, Input):
                    fp32[node.outputs[0]] = chunk
                elif step.precision == "int8":
                    _int8_affine(node, g, ex, step.lq, q8, fp32)
                else:
                    fp32[node.outputs[0]] = _eval_fp32(node, g, fp32).astype(
                        np.float32, copy=False
                    )
            timings[key] = timings.get(key, 0.0) + (time.perf_counter() - t0) * 1000.0
        bufs = dict(fp32)
        if keep_all:
            for edge, (z, q) in q8.items():
                bufs.setdefault(edge, (q * z).astype(np.float32))
        return bufs

    return _run(g, x, forward, threads, keep_all)


# ---------------------------------------------------------------------------
# Comparison
# ---------------------------------------------------------------------------

def _topk_accuracy(logits: np.ndarray, labels: np.ndarray, k: int) -> float:
    flat = logits.reshape(logits.shape[0], -1)
    top = np.argsort(-flat, axis=1, kind="stable")[:, :k]
    return float(np.mean(np.any(top == labels[:, None], axis=1)))


def compare_runs(a: RunReport, b: RunReport, metric: str = "elementwise",
                 labels: np.ndarray | None = None) -> dict:
    """Compare two runs elementwise or by top-k label agreement.

    Top-k metrics evaluate both reports' single output tensor against
    ``labels`` and report the accuracy delta in percentage points.
    """
    if set(a.outputs) != set(b.outputs):
        raise ValueError(f"output edges differ: {sorted(a.outputs)} vs {sorted(b.outputs)}")
    if metric == "elementwise":
        per_edge = {}
        for edge in sorted(a.outputs):
            ta, tb = a.outputs[edge], b.outputs[edge]
            if ta.shape != tb.shape:
                raise ValueError(f"edge {edge!r} shapes differ: {ta.shape} vs {tb.shape}")
            diff = np.abs(ta.astype(np.float64) - tb.astype(np.float64))
            per_edge[edge] = {
                "max_abs_diff": float(diff.max()) if diff.size else 0.0,
                "mean_abs_diff": float(diff.mean()) if diff.size else 0.0,
            }
        overall = max((v["max_abs_diff"] for v in per_edge.values()), default=0.0)
        return {"metric": "elementwise", "per_edge": per_edge, "max_abs_diff": overall}
    if metric in ("top1", "top5"):
        if labels is None:
            raise ValueError("top-k comparison requires labels")
        if len(a.outputs) != 1:
            raise ValueError("top-k comparison requires a single output edge")
        k = 1 if metric == "top1" else 5
        edge = next(iter(a.outputs))
        labels = np.asarray(labels)
        for side in (a, b):
            if side.outputs[edge].shape[0] != labels.shape[0]:
                raise ValueError(
                    f"label count {labels.shape[0]} != sample count "
                    f"{side.outputs[edge].shape[0]}"
                )
        acc_a = _topk_accuracy(a.outputs[edge], labels, k)
        acc_b = _topk_accuracy(b.outputs[edge], labels, k)
        return {
            "metric": metric,
            "accuracy_a": acc_a,
            "accuracy_b": acc_b,
            "delta_pp": (acc_a - acc_b) * 100.0,
        }
    raise ValueError(f"unknown metric {metric!r}")
