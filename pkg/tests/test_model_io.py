from pathlib import Path

import numpy as np
import pytest

import quantnet as qn
from quantnet.calibrate import CalibrationTable, QuantEntry
from quantnet.model_io import ParseError, UnknownLayerError

from conftest import build_model, pack_blob

FIXTURES = Path(__file__).parent / "fixtures"


def test_minimal_input_only_document():
    g = qn.parse_model("model tiny\nlayer in0 input inputs=- outputs=x shape=1x1x2x2\n")
    assert list(g.nodes) == ["in0"]
    assert g.name == "tiny"


def test_missing_weight_blob_entry_is_dangling():
    text = (
        "model m\n"
        "layer in0 input inputs=- outputs=x shape=1x2x4x4\n"
        "layer c conv inputs=x outputs=y channels=2 kernel=1x1 relu=false weight=w\n"
    )
    with pytest.raises(qn.DanglingWeightError):
        qn.parse_model(text)


def test_unknown_layer_kind_reports_line():
    text = "model m\nlayer in0 input inputs=- outputs=x shape=1x1x2x2\nlayer d dropout inputs=x outputs=y\n"
    with pytest.raises(UnknownLayerError) as err:
        qn.parse_model(text)
    assert err.value.line == 3


def test_syntax_error_reports_line():
    with pytest.raises(ParseError) as err:
        qn.parse_model("model m\nlayer broken\n")
    assert err.value.line == 2


def test_unknown_directive_rejected():
    with pytest.raises(ParseError):
        qn.parse_model("model m\nbogus directive here\n")


def test_missing_model_header():
    with pytest.raises(ParseError):
        qn.parse_model("layer in0 input inputs=- outputs=x shape=1x1x2x2\n")


def test_golden_block_round_trip():
    g = qn.load_model(FIXTURES / "golden_block.model")
    assert len(g.nodes) == 10
    text, blobs = qn.serialize_model(g)
    again = qn.parse_model(text, blobs)
    assert qn.graphs_equal(g, again)


def test_parse_serialize_parse_is_parse():
    g = qn.load_model(FIXTURES / "golden_block.model")
    text1, blobs1 = qn.serialize_model(g)
    g2 = qn.parse_model(text1, blobs1)
    text2, blobs2 = qn.serialize_model(g2)
    assert text1 == text2
    assert blobs1 == blobs2


def test_serialize_deterministic():
    g = qn.load_model(FIXTURES / "golden_block.model")
    assert qn.serialize_model(g) == qn.serialize_model(g)


def test_metadata_preserved_verbatim():
    g = qn.load_model(FIXTURES / "golden_block.model")
    assert g.metadata == {"source": "hand-written", "layout": "nchw"}
    text, blobs = qn.serialize_model(g)
    assert "meta source hand-written" in text
    assert qn.parse_model(text, blobs).metadata == g.metadata


def test_empty_weights_graph_serializes_with_empty_blob():
    g = qn.parse_model("model empty\nlayer in0 input inputs=- outputs=x shape=1x1x2x2\n")
    text, blobs = qn.serialize_model(g)
    assert blobs == {"empty.bin": b""}
    assert "weights" not in text


def test_comments_and_blank_lines_ignored():
    g = qn.parse_model(
        "# a full-line comment\n\nmodel m  # trailing comment\n"
        "layer in0 input inputs=- outputs=x shape=1x1x2x2\n"
    )
    assert g.name == "m"


def test_weight_reference_past_blob_end():
    text = (
        "model m\n"
        "layer in0 input inputs=- outputs=x shape=1x2x4x4\n"
        "layer c conv inputs=x outputs=y channels=2 kernel=1x1 relu=false weight=w\n"
        "weights model.bin w@0:2x2x1x1\n"
    )
    with pytest.raises(ParseError):
        qn.parse_model(text, {"model.bin": b"\x00" * 8})


def test_quant_and_fallback_lines_round_trip():
    g = build_model(
        """
        model q
        layer in0 input inputs=- outputs=x shape=1x2x4x4
        layer c conv inputs=x outputs=y channels=2 kernel=1x1 relu=true weight=w bias=b
        """,
        {"w": np.ones((2, 2, 1, 1), np.float32), "b": np.zeros(2, np.float32)},
    )
    table = CalibrationTable()
    table.add(QuantEntry("x", 8, 0.007843137254901961, "activation"))
    table.add(QuantEntry("w", 7, 0.007874015748031496, "weight"))
    table.add(QuantEntry("b", 31, 6.175955709375351e-05, "bias"))
    table.fallback_edges.add("y")
    g.quant = table
    text, blobs = qn.serialize_model(g)
    assert text.count("quant ") == 3
    assert "fallback y" in text
    again = qn.parse_model(text, blobs)
    assert again.quant is not None
    assert again.quant.entries == table.entries  # exact float round trip via repr()
    assert again.quant.fallback_edges == {"y"}


def test_quant_line_unknown_tensor_rejected():
    text = (
        "model m\nlayer in0 input inputs=- outputs=x shape=1x1x2x2\n"
        "quant ghost q=0.5 p=8\n"
    )
    with pytest.raises(ParseError):
        qn.parse_model(text)


def test_quant_line_bad_precision_rejected():
    text = (
        "model m\nlayer in0 input inputs=- outputs=x shape=1x1x2x2\n"
        "quant x q=0.5 p=9\n"
    )
    with pytest.raises(ParseError):
        qn.parse_model(text)


def test_save_and_load_round_trip(tmp_path):
    g = qn.load_model(FIXTURES / "golden_block.model")
    qn.save_model(g, tmp_path / "copy.model")
    assert (tmp_path / "copy.bin").exists()
    again = qn.load_model(tmp_path / "copy.model")
    assert qn.graphs_equal(g, again)


def test_load_with_weights_override(tmp_path):
    g = build_model(
        """
        model m
        layer in0 input inputs=- outputs=x shape=1x1x2x2
        layer c conv inputs=x outputs=y channels=1 kernel=1x1 relu=false weight=w
        """,
        {"w": np.full((1, 1, 1, 1), 3.0, np.float32)},
    )
    qn.save_model(g, tmp_path / "m.model")
    override = np.full((1, 1, 1, 1), 9.0, np.float32)
    blob, _ = pack_blob({"w": override})
    (tmp_path / "other.bin").write_bytes(blob)
    loaded = qn.load_model(tmp_path / "m.model", weights_path=tmp_path / "other.bin")
    assert loaded.weights["w"][0, 0, 0, 0] == 9.0
