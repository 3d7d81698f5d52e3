"""Line-oriented text model format with a separate float32 weight blob.

Document grammar (UTF-8, one directive per line, ``#`` starts a comment)::

    model <name>
    meta <key> <value...>
    layer <name> <kind> inputs=<e1,e2|-> outputs=<e1> [key=value ...]
    weights <file> <tensor-name>@<offset>:<d0>x<d1>...
    quant <tensor-name> q=<decimal> p=<int>
    fallback <edge-name>

The weight blob is raw little-endian 32-bit floats with offsets counted in
elements and no header.  ``quant`` and ``fallback`` lines appear only on
calibrated models.  Serialization is deterministic, so identical graphs
always produce identical bytes.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .calibrate import CalibrationTable, QuantEntry, ROLE_BY_BITS
from .graph import (
    BatchNorm,
    Convolution,
    EltwiseSum,
    Graph,
    GraphError,
    InnerProduct,
    Input,
    Node,
    Pooling,
    ReLU,
    Softmax,
)

__all__ = [
    "ParseError",
    "UnknownLayerError",
    "load_model",
    "parse_model",
    "read_blob",
    "save_model",
    "serialize_model",
    "write_blob",
]


class ParseError(GraphError):
    """Malformed model document; carries the offending line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class UnknownLayerError(ParseError):
    """The document names a layer kind this toolkit does not support."""


_KIND_TOKENS = {
    "input": Input,
    "conv": Convolution,
    "batchnorm": BatchNorm,
    "relu": ReLU,
    "eltwise_sum": EltwiseSum,
    "pool": Pooling,
    "inner_product": InnerProduct,
    "softmax": Softmax,
}
_TOKEN_BY_KIND = {cls: tok for tok, cls in _KIND_TOKENS.items()}


def _parse_hw(text: str, line: int) -> tuple[int, int]:
    parts = text.split("x")
    if len(parts) != 2:
        raise ParseError(f"expected <h>x<w>, got {text!r}", line)
    try:
        return int(parts[0]), int(parts[1])
    except ValueError:
        raise ParseError(f"expected integers in {text!r}", line) from None


def _parse_shape(text: str, line: int) -> tuple[int, ...]:
    try:
        dims = tuple(int(p) for p in text.split("x"))
    except ValueError:
        raise ParseError(f"bad shape {text!r}", line) from None
    if not dims or any(d < 1 for d in dims):
        raise ParseError(f"shape dimensions must be positive: {text!r}", line)
    return dims


def _parse_bool(text: str, line: int) -> bool:
    if text == "true":
        return True
    if text == "false":
        return False
    raise ParseError(f"expected true/false, got {text!r}", line)


def _kv_pairs(tokens: list[str], line: int) -> dict[str, str]:
    pairs: dict[str, str] = {}
    for tok in tokens:
        if "=" not in tok:
            raise ParseError(f"expected key=value, got {tok!r}", line)
        key, value = tok.split("=", 1)
        if key in pairs:
            raise ParseError(f"duplicate key {key!r}", line)
        pairs[key] = value
    return pairs


def _take(pairs: dict[str, str], key: str, line: int, default: str | None = None) -> str:
    if key in pairs:
        return pairs.pop(key)
    if default is not None:
        return default
    raise ParseError(f"missing required key {key!r}", line)


def _build_kind(token: str, pairs: dict[str, str], line: int):
    if token == "input":
        shape = _parse_shape(_take(pairs, "shape", line), line)
        if len(shape) != 4:
            raise ParseError(f"input shape must be NxCxHxW, got {shape}", line)
        return Input(shape)
    if token == "conv":
        kind = Convolution(
            channels=int(_take(pairs, "channels", line)),
            kernel=_parse_hw(_take(pairs, "kernel", line), line),
            stride=_parse_hw(_take(pairs, "stride", line, "1x1"), line),
            pad=_parse_hw(_take(pairs, "pad", line, "0x0"), line),
            relu=_parse_bool(_take(pairs, "relu", line, "false"), line),
            weight=_take(pairs, "weight", line),
        )
        if "bias" in pairs:
            kind.bias = pairs.pop("bias")
        if "sum" in pairs:
            kind.sum_edge = pairs.pop("sum")
        return kind
    if token == "batchnorm":
        return BatchNorm(
            mean=_take(pairs, "mean", line),
            var=_take(pairs, "var", line),
            scale=_take(pairs, "scale", line),
            shift=_take(pairs, "shift", line),
            eps=float(_take(pairs, "eps", line, "1e-05")),
        )
    if token == "relu":
        return ReLU(slope=float(_take(pairs, "slope", line, "0.0")))
    if token == "eltwise_sum":
        return EltwiseSum()
    if token == "pool":
        return Pooling(
            mode=_take(pairs, "mode", line),
            kernel=_parse_hw(_take(pairs, "kernel", line), line),
            stride=_parse_hw(_take(pairs, "stride", line), line),
        )
    if token == "inner_product":
        kind = InnerProduct(
            features=int(_take(pairs, "features", line)),
            relu=_parse_bool(_take(pairs, "relu", line, "false"), line),
            weight=_take(pairs, "weight", line),
        )
        if "bias" in pairs:
            kind.bias = pairs.pop("bias")
        return kind
    if token == "softmax":
        return Softmax()
    raise UnknownLayerError(f"unknown layer kind {token!r}", line)


def parse_model(text: str, blobs: dict[str, bytes] | None = None) -> Graph:
    """Parse a model document into a validated :class:`Graph`.

    ``blobs`` maps weight-blob file names referenced by ``weights`` lines to
    their raw bytes; :func:`load_model` fills it from disk.
    """
    g = Graph()
    saw_model = False
    weight_refs: list[tuple[str, str, int, tuple[int, ...], int]] = []
    quant_lines: list[tuple[str, float, int, int]] = []
    fallback_edges: list[str] = []

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        head = tokens[0]
        if head == "model":
            if len(tokens) != 2:
                raise ParseError("expected: model <name>", lineno)
            if saw_model:
                raise ParseError("duplicate model header", lineno)
            g.name = tokens[1]
            saw_model = True
        elif head == "meta":
            if len(tokens) < 3:
                raise ParseError("expected: meta <key> <value...>", lineno)
            g.metadata[tokens[1]] = " ".join(tokens[2:])
        elif head == "layer":
            if len(tokens) < 3:
                raise ParseError("expected: layer <name> <kind> ...", lineno)
            name, kind_token = tokens[1], tokens[2]
            if kind_token not in _KIND_TOKENS:
                raise UnknownLayerError(f"unknown layer kind {kind_token!r}", lineno)
            pairs = _kv_pairs(tokens[3:], lineno)
            inputs_text = _take(pairs, "inputs", lineno)
            outputs_text = _take(pairs, "outputs", lineno)
            inputs = [] if inputs_text == "-" else inputs_text.split(",")
            outputs = outputs_text.split(",")
            kind = _build_kind(kind_token, pairs, lineno)
            if pairs:
                raise ParseError(f"unknown keys for {kind_token}: {sorted(pairs)}", lineno)
            if name in g.nodes:
                raise ParseError(f"duplicate layer name {name!r}", lineno)
            g.add(name, kind, inputs, outputs)
        elif head == "weights":
            if len(tokens) != 3:
                raise ParseError("expected: weights <file> <name>@<offset>:<shape>", lineno)
            file = tokens[1]
            ref = tokens[2]
            if "@" not in ref or ":" not in ref:
                raise ParseError(f"bad weight reference {ref!r}", lineno)
            name, rest = ref.split("@", 1)
            offset_text, shape_text = rest.split(":", 1)
            try:
                offset = int(offset_text)
            except ValueError:
                raise ParseError(f"bad offset {offset_text!r}", lineno) from None
            weight_refs.append((file, name, offset, _parse_shape(shape_text, lineno), lineno))
        elif head == "quant":
            if len(tokens) != 4:
                raise ParseError("expected: quant <name> q=<decimal> p=<int>", lineno)
            pairs = _kv_pairs(tokens[2:], lineno)
            try:
                q = float(_take(pairs, "q", lineno))
                p = int(_take(pairs, "p", lineno))
            except ValueError:
                raise ParseError("bad quant parameters", lineno) from None
            if p not in ROLE_BY_BITS:
                raise ParseError(f"unsupported quant precision p={p}", lineno)
            if not q > 0:
                raise ParseError(f"quant factor must be positive, got {q}", lineno)
            quant_lines.append((tokens[1], q, p, lineno))
        elif head == "fallback":
            if len(tokens) != 2:
                raise ParseError("expected: fallback <edge-name>", lineno)
            fallback_edges.append(tokens[1])
        else:
            raise ParseError(f"unknown directive {head!r}", lineno)

    if not saw_model:
        raise ParseError("missing model header", 1)

    for file, name, offset, shape, lineno in weight_refs:
        if name in g.weights:
            raise ParseError(f"duplicate weight tensor {name!r}", lineno)
        if blobs is None or file not in blobs:
            raise ParseError(f"weight blob {file!r} not provided", lineno)
        count = int(np.prod(shape))
        data = blobs[file]
        end = (offset + count) * 4
        if end > len(data):
            raise ParseError(
                f"weight {name!r} extends past end of blob {file!r} "
                f"({end} > {len(data)} bytes)",
                lineno,
            )
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset * 4)
        g.weights[name] = arr.reshape(shape).astype(np.float32)

    if quant_lines or fallback_edges:
        table = CalibrationTable()
        edge_names = {e for n in g.nodes.values() for e in n.outputs}
        for name, q, p, lineno in quant_lines:
            if name not in edge_names and name not in g.weights:
                raise ParseError(f"quant line names unknown tensor {name!r}", lineno)
            table.add(QuantEntry(name, p, q, ROLE_BY_BITS[p]))
        for edge in fallback_edges:
            if edge not in edge_names:
                raise ParseError(f"fallback line names unknown edge {edge!r}")
            table.fallback_edges.add(edge)
        g.quant = table

    g.validate()
    return g


def _fmt_hw(hw: tuple[int, int]) -> str:
    return f"{hw[0]}x{hw[1]}"


def _fmt_bool(value: bool) -> str:
    return "true" if value else "false"


def _layer_line(node: Node) -> str:
    k = node.kind
    token = _TOKEN_BY_KIND[type(k)]
    inputs = ",".join(node.inputs) if node.inputs else "-"
    outputs = ",".join(node.outputs)
    parts = [f"layer {node.name} {token} inputs={inputs} outputs={outputs}"]
    if isinstance(k, Input):
        parts.append(f"shape={'x'.join(str(d) for d in k.shape)}")
    elif isinstance(k, Convolution):
        parts.append(f"channels={k.channels}")
        parts.append(f"kernel={_fmt_hw(k.kernel)}")
        parts.append(f"stride={_fmt_hw(k.stride)}")
        parts.append(f"pad={_fmt_hw(k.pad)}")
        parts.append(f"relu={_fmt_bool(k.relu)}")
        parts.append(f"weight={k.weight}")
        if k.bias is not None:
            parts.append(f"bias={k.bias}")
        if k.sum_edge is not None:
            parts.append(f"sum={k.sum_edge}")
    elif isinstance(k, BatchNorm):
        parts.append(f"mean={k.mean}")
        parts.append(f"var={k.var}")
        parts.append(f"scale={k.scale}")
        parts.append(f"shift={k.shift}")
        parts.append(f"eps={k.eps!r}")
    elif isinstance(k, ReLU):
        parts.append(f"slope={k.slope!r}")
    elif isinstance(k, Pooling):
        parts.append(f"mode={k.mode}")
        parts.append(f"kernel={_fmt_hw(k.kernel)}")
        parts.append(f"stride={_fmt_hw(k.stride)}")
    elif isinstance(k, InnerProduct):
        parts.append(f"features={k.features}")
        parts.append(f"relu={_fmt_bool(k.relu)}")
        parts.append(f"weight={k.weight}")
        if k.bias is not None:
            parts.append(f"bias={k.bias}")
    return " ".join(parts)


def _ordered_weight_names(g: Graph) -> list[str]:
    """Weight tensors in first-reference order, then leftovers sorted."""
    ordered: list[str] = []
    for node in g.nodes.values():
        k = node.kind
        refs: list[str] = []
        if isinstance(k, (Convolution, InnerProduct)):
            refs = [k.weight] + ([k.bias] if k.bias is not None else [])
        elif isinstance(k, BatchNorm):
            refs = [k.mean, k.var, k.scale, k.shift]
        for r in refs:
            if r in g.weights and r not in ordered:
                ordered.append(r)
    for name in sorted(g.weights):
        if name not in ordered:
            ordered.append(name)
    return ordered


def serialize_model(g: Graph, blob_name: str | None = None) -> tuple[str, dict[str, bytes]]:
    """Serialize a graph to (document text, {blob name: blob bytes}).

    Output is deterministic: nodes in declaration order, weights in
    first-reference order, factors printed as shortest round-trip decimals.
    """
    if blob_name is None:
        blob_name = f"{g.name}.bin"
    lines = [f"model {g.name}"]
    for key, value in g.metadata.items():
        lines.append(f"meta {key} {value}")
    for node in g.nodes.values():
        lines.append(_layer_line(node))

    blob = bytearray()
    offset = 0
    for name in _ordered_weight_names(g):
        arr = np.ascontiguousarray(g.weights[name], dtype="<f4")
        shape_text = "x".join(str(d) for d in arr.shape)
        lines.append(f"weights {blob_name} {name}@{offset}:{shape_text}")
        blob.extend(arr.tobytes())
        offset += arr.size

    if g.quant is not None:
        for entry in g.quant.entries.values():
            lines.append(f"quant {entry.name} q={entry.factor!r} p={entry.precision}")
        for edge in sorted(g.quant.fallback_edges):
            lines.append(f"fallback {edge}")

    return "\n".join(lines) + "\n", {blob_name: bytes(blob)}


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def save_model(g: Graph, path: str | Path) -> None:
    """Write the document and its blob next to each other, atomically."""
    path = Path(path)
    text, blobs = serialize_model(g, blob_name=path.stem + ".bin")
    for name, data in blobs.items():
        _atomic_write(path.parent / name, data)
    _atomic_write(path, text.encode("utf-8"))


def load_model(path: str | Path, weights_path: str | Path | None = None) -> Graph:
    """Read a document, resolving blob references relative to it.

    ``weights_path`` overrides every blob reference with one file.
    """
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    blobs: dict[str, bytes] = {}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if line.startswith("weights "):
            tokens = line.split()
            if len(tokens) >= 2 and tokens[1] not in blobs:
                source = Path(weights_path) if weights_path is not None else path.parent / tokens[1]
                if not source.exists():
                    raise ParseError(f"weight blob file not found: {source}")
                blobs[tokens[1]] = source.read_bytes()
    return parse_model(text, blobs)


def write_blob(path: str | Path, arr: np.ndarray) -> None:
    """Write one tensor in the weight-blob encoding (little-endian float32)."""
    _atomic_write(Path(path), np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_blob(path: str | Path, shape: tuple[int, ...] | None = None) -> np.ndarray:
    """Read a raw little-endian float32 tensor, optionally reshaped."""
    arr = np.frombuffer(Path(path).read_bytes(), dtype="<f4").astype(np.float32)
    if shape is not None:
        arr = arr.reshape(shape)
    return arr
