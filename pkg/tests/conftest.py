"""Shared fixture builders for the test suite."""

from __future__ import annotations

import numpy as np

import quantnet as qn


def pack_blob(weights: dict[str, np.ndarray]) -> tuple[bytes, list[str]]:
    """Pack arrays into one blob; returns (bytes, weights-directive lines)."""
    blob = bytearray()
    lines = []
    offset = 0
    for name, arr in weights.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        shape = "x".join(str(d) for d in arr.shape)
        lines.append(f"weights model.bin {name}@{offset}:{shape}")
        blob.extend(arr.tobytes())
        offset += arr.size
    return bytes(blob), lines


def build_model(body: str, weights: dict[str, np.ndarray] | None = None) -> qn.Graph:
    """Parse a model document body, auto-appending weights lines for ``weights``."""
    weights = weights or {}
    blob, lines = pack_blob(weights)
    text = body.strip() + "\n" + "\n".join(lines) + ("\n" if lines else "")
    return qn.parse_model(text, {"model.bin": blob})


def random_bn_params(g: qn.Graph, prefix: str, channels: int, rng) -> dict:
    g.weights[f"{prefix}_mean"] = rng.normal(0, 0.1, channels).astype(np.float32)
    g.weights[f"{prefix}_var"] = rng.uniform(0.5, 1.5, channels).astype(np.float32)
    g.weights[f"{prefix}_scale"] = rng.uniform(0.5, 1.5, channels).astype(np.float32)
    g.weights[f"{prefix}_shift"] = rng.normal(0, 0.1, channels).astype(np.float32)
    return dict(
        mean=f"{prefix}_mean",
        var=f"{prefix}_var",
        scale=f"{prefix}_scale",
        shift=f"{prefix}_shift",
        eps=1e-5,
    )


def conv_bn_relu_graph(seed: int = 0, channels: int = 4, size: int = 8,
                       kernel: int = 3, with_bias: bool = True) -> qn.Graph:
    """Input -> Convolution -> BatchNorm -> ReLU with random parameters."""
    rng = np.random.default_rng(seed)
    in_c = max(1, channels - 1)
    g = qn.Graph("convbnrelu")
    g.add("in0", qn.Input((1, in_c, size, size)), [], ["x"])
    g.weights["w"] = rng.normal(0, 0.3, (channels, in_c, kernel, kernel)).astype(np.float32)
    bias = None
    if with_bias:
        g.weights["b"] = rng.normal(0, 0.1, channels).astype(np.float32)
        bias = "b"
    pad = kernel // 2
    g.add("conv", qn.Convolution(channels, (kernel, kernel), (1, 1), (pad, pad),
                                 weight="w", bias=bias), ["x"], ["c"])
    g.add("bn", qn.BatchNorm(**random_bn_params(g, "bn", channels, rng)), ["c"], ["n"])
    g.add("act", qn.ReLU(), ["n"], ["y"])
    g.validate()
    return g


def resnet_fixture(seed: int = 0) -> qn.Graph:
    """Two residual blocks; the second downsamples via two 1x1 stride-2 convs.

    Block A: conv-bn-relu, conv-bn, element-wise sum with the block input,
    ReLU.  Block B: bottleneck whose shortcut and first convolution are both
    1x1 stride-2 reads of block A's output.
    """
    rng = np.random.default_rng(seed)
    g = qn.Graph("resblocks")

    def w(name, *shape, scale=0.25):
        g.weights[name] = rng.normal(0, scale, shape).astype(np.float32)
        return name

    g.add("in0", qn.Input((1, 4, 8, 8)), [], ["x0"])
    g.add("a1", qn.Convolution(4, (3, 3), (1, 1), (1, 1), weight=w("a1_w", 4, 4, 3, 3)),
          ["x0"], ["a1c"])
    g.add("a1_bn", qn.BatchNorm(**random_bn_params(g, "a1bn", 4, rng)), ["a1c"], ["a1n"])
    g.add("a1_relu", qn.ReLU(), ["a1n"], ["a1r"])
    g.add("a2", qn.Convolution(4, (3, 3), (1, 1), (1, 1), weight=w("a2_w", 4, 4, 3, 3)),
          ["a1r"], ["a2c"])
    g.add("a2_bn", qn.BatchNorm(**random_bn_params(g, "a2bn", 4, rng)), ["a2c"], ["a2n"])
    g.add("a_sum", qn.EltwiseSum(), ["a2n", "x0"], ["asum"])
    g.add("a_relu", qn.ReLU(), ["asum"], ["xA"])

    g.add("b1", qn.Convolution(8, (1, 1), (2, 2), (0, 0), weight=w("b1_w", 8, 4, 1, 1)),
          ["xA"], ["b1c"])
    g.add("b1_bn", qn.BatchNorm(**random_bn_params(g, "b1bn", 8, rng)), ["b1c"], ["b1n"])
    g.add("b2a", qn.Convolution(4, (1, 1), (2, 2), (0, 0), weight=w("b2a_w", 4, 4, 1, 1)),
          ["xA"], ["b2ac"])
    g.add("b2a_bn", qn.BatchNorm(**random_bn_params(g, "b2abn", 4, rng)), ["b2ac"], ["b2an"])
    g.add("b2a_relu", qn.ReLU(), ["b2an"], ["b2ar"])
    g.add("b2b", qn.Convolution(4, (3, 3), (1, 1), (1, 1), weight=w("b2b_w", 4, 4, 3, 3)),
          ["b2ar"], ["b2bc"])
    g.add("b2b_bn", qn.BatchNorm(**random_bn_params(g, "b2bbn", 4, rng)), ["b2bc"], ["b2bn_"])
    g.add("b2b_relu", qn.ReLU(), ["b2bn_"], ["b2br"])
    g.add("b2c", qn.Convolution(8, (1, 1), (1, 1), (0, 0), weight=w("b2c_w", 8, 4, 1, 1)),
          ["b2br"], ["b2cc"])
    g.add("b2c_bn", qn.BatchNorm(**random_bn_params(g, "b2cbn", 8, rng)), ["b2cc"], ["b2cn"])
    g.add("b_sum", qn.EltwiseSum(), ["b2cn", "b1n"], ["bsum"])
    g.add("b_relu", qn.ReLU(), ["bsum"], ["xB"])
    g.validate()
    return g


def tiny_classifier(seed: int = 0) -> qn.Graph:
    """conv-bn-relu x2 with pooling, then an inner product and softmax."""
    rng = np.random.default_rng(seed)
    g = qn.Graph("tinycls")
    g.add("in0", qn.Input((1, 3, 8, 8)), [], ["img"])
    g.weights["c1_w"] = rng.normal(0, 0.3, (8, 3, 3, 3)).astype(np.float32)
    g.add("conv1", qn.Convolution(8, (3, 3), (1, 1), (1, 1), weight="c1_w"), ["img"], ["c1"])
    g.add("bn1", qn.BatchNorm(**random_bn_params(g, "bn1", 8, rng)), ["c1"], ["n1"])
    g.add("relu1", qn.ReLU(), ["n1"], ["r1"])
    g.add("pool1", qn.Pooling("max", (2, 2), (2, 2)), ["r1"], ["p1"])
    g.weights["c2_w"] = rng.normal(0, 0.3, (16, 8, 3, 3)).astype(np.float32)
    g.add("conv2", qn.Convolution(16, (3, 3), (1, 1), (1, 1), weight="c2_w"), ["p1"], ["c2"])
    g.add("bn2", qn.BatchNorm(**random_bn_params(g, "bn2", 16, rng)), ["c2"], ["n2"])
    g.add("relu2", qn.ReLU(), ["n2"], ["r2"])
    g.add("pool2", qn.Pooling("avg", (2, 2), (2, 2)), ["r2"], ["p2"])
    g.weights["fc_w"] = rng.normal(0, 0.3, (10, 64)).astype(np.float32)
    g.weights["fc_b"] = rng.normal(0, 0.1, 10).astype(np.float32)
    g.add("fc", qn.InnerProduct(10, weight="fc_w", bias="fc_b"), ["p2"], ["logits"])
    g.add("prob", qn.Softmax(), ["logits"], ["probs"])
    g.validate()
    return g
