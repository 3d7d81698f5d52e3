"""Max-abs calibration: sample tensor extrema, assign factors, emit the model.

Calibration runs on the optimized FP32 graph.  Every activation edge is
sampled over a dataset for its running max-abs / min; weights and biases are
sampled once from the weight store.  Non-negative activations get 8-bit
entries, weights 7-bit, biases a 31-bit entry whose factor is pinned to
q_weight * q_input so integer bias addition is exact in the accumulator.
Activations that can go negative and feed a convolution or inner product
force that layer back to FP32.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .graph import Convolution, Graph, InnerProduct, topo_order
from .quant import compute_qfactor

__all__ = [
    "CalibrationTable",
    "EmptyDatasetError",
    "IncompleteStatsError",
    "QuantEntry",
    "TensorStats",
    "build_table",
    "collect_stats",
    "emit_quantized_model",
]

ACTIVATION_BITS = 8
WEIGHT_BITS = 7
BIAS_BITS = 31

ROLE_BITS = {"activation": ACTIVATION_BITS, "weight": WEIGHT_BITS, "bias": BIAS_BITS}
ROLE_BY_BITS = {bits: role for role, bits in ROLE_BITS.items()}


class EmptyDatasetError(Exception):
    """The calibration dataset yielded no batches."""


class IncompleteStatsError(Exception):
    """Statistics are missing for a tensor the table needs."""


@dataclass
class TensorStats:
    """Observed extrema for one named tensor (edge or weight-store entry)."""

    name: str
    max_abs: float = 0.0
    min_value: float = float("inf")
    samples_seen: int = 0

    def update(self, values: np.ndarray, count: int | None = None) -> None:
        if values.size == 0:
            return
        self.max_abs = max(self.max_abs, float(np.max(np.abs(values))))
        self.min_value = min(self.min_value, float(np.min(values)))
        if count is None:
            count = int(values.shape[0]) if values.ndim else 1
        self.samples_seen += count


@dataclass(frozen=True)
class QuantEntry:
    name: str
    precision: int
    factor: float
    role: str  # "activation" | "weight" | "bias"


@dataclass
class CalibrationTable:
    """Per-tensor quantization assignments plus FP32 fallback edges."""

    entries: dict[str, QuantEntry] = field(default_factory=dict)
    fallback_edges: set[str] = field(default_factory=set)

    def get(self, name: str) -> QuantEntry | None:
        return self.entries.get(name)

    def add(self, entry: QuantEntry) -> None:
        self.entries[entry.name] = entry


def _quant_input_edges(node) -> list[str]:
    """Activation edges a conv / inner-product layer reads."""
    edges = [node.inputs[0]]
    k = node.kind
    if isinstance(k, Convolution) and k.sum_edge is not None:
        edges.append(k.sum_edge)
    return edges


def collect_stats(g: Graph, batches) -> dict[str, TensorStats]:
    """Run FP32 forward passes over ``batches`` and merge per-edge extrema.

    ``batches`` is an iterable of NCHW float arrays matching the graph input.
    Weight and bias statistics come from the weight store, once.
    """
    from .execute import run_fp32  # layered on top of the executor

    stats: dict[str, TensorStats] = {}
    for name, arr in g.weights.items():
        s = TensorStats(name)
        s.update(np.asarray(arr), count=1)
        stats[name] = s

    seen = 0
    for batch in batches:
        batch = np.asarray(batch, dtype=np.float32)
        report = run_fp32(g, batch, keep_all=True)
        for edge, values in report.outputs.items():
            stats.setdefault(edge, TensorStats(edge)).update(values)
        seen += 1
    if seen == 0:
        raise EmptyDatasetError("calibration dataset contained no batches")
    return stats


def build_table(g: Graph, stats: dict[str, TensorStats]) -> CalibrationTable:
    """Assign per-role precisions and factors from collected statistics."""
    table = CalibrationTable()
    order = topo_order(g)
    affine = [
        g.nodes[n] for n in order if isinstance(g.nodes[n].kind, (Convolution, InnerProduct))
    ]

    for node in affine:
        for e in _quant_input_edges(node):
            if e not in stats:
                raise IncompleteStatsError(f"no statistics for edge {e!r} feeding {node.name!r}")
            if stats[e].min_value < 0:
                table.fallback_edges.add(e)

    for edge in g.edges():
        s = stats.get(edge)
        if s is None:
            raise IncompleteStatsError(f"no statistics for edge {edge!r}")
        if s.min_value >= 0:
            table.add(
                QuantEntry(edge, ACTIVATION_BITS, compute_qfactor(s.max_abs, ACTIVATION_BITS), "activation")
            )

    for node in affine:
        if any(e in table.fallback_edges for e in _quant_input_edges(node)):
            continue  # layer runs FP32; nothing to assign
        k = node.kind
        if k.weight not in stats:
            raise IncompleteStatsError(f"no statistics for weight {k.weight!r}")
        w_entry = QuantEntry(
            k.weight, WEIGHT_BITS, compute_qfactor(stats[k.weight].max_abs, WEIGHT_BITS), "weight"
        )
        table.add(w_entry)
        if k.bias is not None:
            x_entry = table.get(node.inputs[0])
            assert x_entry is not None  # inputs not in fallback have entries
            table.add(QuantEntry(k.bias, BIAS_BITS, w_entry.factor * x_entry.factor, "bias"))
    return table


def emit_quantized_model(g: Graph, table: CalibrationTable) -> tuple[str, dict[str, bytes]]:
    """Serialize the graph with its quantization assignments attached.

    Weights stay FP32 in the blob; they are quantized at load time from the
    recorded factors, so one blob format serves both precisions.
    """
    from .model_io import serialize_model

    annotated = g.copy()
    annotated.quant = table
    return serialize_model(annotated)
