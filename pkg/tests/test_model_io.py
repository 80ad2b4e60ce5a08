"""Serialization tests: round trips at every stage, corruption detection."""

from __future__ import annotations

import json
from pathlib import Path

import pytest

from quantflow import GraphError, graphs_equal, load_model, run_int, save_model
from quantflow.engine import quantize_input
from quantflow.model_io import ChecksumError, ModelFormatError


def test_round_trip_every_stage(toy_pipeline, tmp_path):
    g, _, _, gq, gl = toy_pipeline(0)
    for label, graph in (("float", g), ("quantized", gq), ("lowered", gl)):
        json_path, bin_path = save_model(graph, str(tmp_path), name=label)
        assert Path(json_path).exists() and Path(bin_path).exists()
        back = load_model(json_path)
        assert graphs_equal(graph, back), f"{label} graph did not survive the round trip"


def test_round_trip_preserves_integer_execution(toy_pipeline, tmp_path):
    _, _, images, _, gl = toy_pipeline(1)
    json_path, _ = save_model(gl, str(tmp_path))
    back = load_model(json_path)
    x = quantize_input(gl, images[0])
    _, trace_a = run_int(gl, x)
    _, trace_b = run_int(back, x)
    assert [e.checksum for e in trace_a.entries] == [e.checksum for e in trace_b.entries]


def test_save_is_byte_deterministic(toy_pipeline, tmp_path):
    _, _, _, gq, _ = toy_pipeline(2)
    j1, b1 = save_model(gq, str(tmp_path / "a"))
    j2, b2 = save_model(gq, str(tmp_path / "b"))
    assert Path(j1).read_bytes() == Path(j2).read_bytes()
    assert Path(b1).read_bytes() == Path(b2).read_bytes()


def test_corrupted_blob_is_rejected(toy_pipeline, tmp_path):
    _, _, _, gq, _ = toy_pipeline(0)
    json_path, bin_path = save_model(gq, str(tmp_path))
    raw = bytearray(Path(bin_path).read_bytes())
    raw[len(raw) // 2] ^= 0xFF
    Path(bin_path).write_bytes(bytes(raw))
    with pytest.raises(ChecksumError):
        load_model(json_path)


def test_truncated_blob_is_rejected(toy_pipeline, tmp_path):
    _, _, _, gq, _ = toy_pipeline(0)
    json_path, bin_path = save_model(gq, str(tmp_path))
    raw = Path(bin_path).read_bytes()
    Path(bin_path).write_bytes(raw[: len(raw) - 8])
    with pytest.raises(ModelFormatError):
        load_model(json_path)


def test_unknown_kind_in_manifest_is_rejected(toy_pipeline, tmp_path):
    g, _, _, _, _ = toy_pipeline(0)
    json_path, _ = save_model(g, str(tmp_path))
    doc = json.loads(Path(json_path).read_text())
    doc["nodes"][1]["kind"] = "winograd_conv"
    Path(json_path).write_text(json.dumps(doc))
    with pytest.raises(GraphError, match="unknown kind"):
        load_model(json_path)


def test_out_hw_attrs_restore_as_tuples(toy_pipeline, tmp_path):
    g, _, _, _, _ = toy_pipeline(3)
    json_path, _ = save_model(g, str(tmp_path))
    back = load_model(json_path)
    for n in back.nodes:
        if "out_hw" in n.attrs:
            assert isinstance(n.attrs["out_hw"], tuple)
