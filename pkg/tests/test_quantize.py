"""Calibration and fake-quant stage tests."""

from __future__ import annotations

import numpy as np
import pytest

from quantflow import BitWidthPlan, GraphError, QuantTensor, quantize_graph, synth_images, toy_model
from quantflow.lowering import output_scale


def test_uniform_plan_covers_every_conv():
    g = toy_model(seed=0)
    plan = BitWidthPlan.uniform(g, weight_bits=5, activation_bits=6)
    plan.validate(g)
    assert set(plan.weight_bits) == {n.id for n in g.conv_nodes()}
    assert all(b == 5 for b in plan.weight_bits.values())
    assert plan.activation_bits == 6 and plan.input_bits == 8


def test_plan_validation_errors():
    g = toy_model(seed=0)
    with pytest.raises(GraphError, match="missing weight bits"):
        BitWidthPlan({}).validate(g)
    plan = BitWidthPlan.uniform(g)
    plan.weight_bits["ghost_conv"] = 4
    with pytest.raises(GraphError, match="not in the graph"):
        plan.validate(g)
    plan = BitWidthPlan.uniform(g)
    plan.weight_bits[g.conv_nodes()[0].id] = 0
    with pytest.raises(GraphError, match=r"outside \[1, 16\]"):
        plan.validate(g)
    plan = BitWidthPlan.uniform(g)
    plan.activation_bits = 1  # activations need a zero code, so 2 is the floor
    with pytest.raises(GraphError, match=r"outside \[2, 16\]"):
        plan.validate(g)


def test_plan_json_round_trip(tmp_path):
    plan = BitWidthPlan({"a": 3, "b": 6}, activation_bits=4, input_bits=8)
    path = tmp_path / "plan.json"
    plan.to_json(path)
    back = BitWidthPlan.from_json(path)
    assert back.weight_bits == plan.weight_bits
    assert back.activation_bits == 4 and back.input_bits == 8


def test_quantize_graph_produces_quantized_stage(toy_pipeline):
    g, plan, _, gq, _ = toy_pipeline(0)
    assert gq.stage == "quantized"
    gq.validate()
    for n in gq.conv_nodes():
        w = gq.tensors[n.weight_ref]
        assert isinstance(w, QuantTensor)
        assert w.bit_width == plan.weight_bits[n.id]
        assert n.attrs["weight_bits"] == plan.weight_bits[n.id]
    for n in gq.nodes:
        if n.kind in ("input", "activation_quant"):
            assert n.attrs["scale"] is not None and n.attrs["scale"] > 0
            assert n.attrs["bit_width"] is not None
    assert not gq.input_node.attrs["signed"], "input pixels are unsigned"


def test_quantize_graph_leaves_float_graph_untouched(toy_pipeline):
    g, plan, images, _, _ = toy_pipeline(4)
    before = {k: np.array(v, copy=True) for k, v in g.tensors.items()}
    quantize_graph(g, plan, images)
    for k, v in g.tensors.items():
        np.testing.assert_array_equal(v, before[k])
    assert g.stage == "float"


def test_calibration_takes_max_over_all_images():
    g = toy_model(seed=2)
    ch, hw = g.input_node.out_ch(), g.input_node.out_hw()
    small = synth_images(1, ch, hw, seed=0, scale=0.1)
    big = synth_images(1, ch, hw, seed=1, scale=10.0)
    plan = BitWidthPlan.uniform(g)
    scale_small = quantize_graph(g, plan, small).input_node.attrs["scale"]
    scale_both = quantize_graph(g, plan, np.concatenate([small, big])).input_node.attrs["scale"]
    scale_big = quantize_graph(g, plan, big).input_node.attrs["scale"]
    assert scale_both == scale_big > scale_small


def test_residual_groups_share_one_scale(toy_pipeline):
    shared = 0
    for seed in range(12):
        _, _, _, gq, _ = toy_pipeline(seed)
        for n in gq.nodes:
            if n.kind != "residual_add":
                continue
            scales = {output_scale(gq, src) for src in n.inputs}
            assert len(scales) == 1, f"{n.id} branches disagree: {scales}"
            shared += 1
    assert shared > 0, "no residual adds in the sampled seeds"


def test_quantize_graph_rejects_wrong_stage(toy_pipeline):
    _, plan, images, gq, _ = toy_pipeline(0)
    with pytest.raises(GraphError, match="expects a float graph"):
        quantize_graph(gq, plan, images)


def test_quantize_graph_rejects_bad_calibration_shape():
    g = toy_model(seed=0)
    plan = BitWidthPlan.uniform(g)
    with pytest.raises(GraphError, match=r"\[N, C, H, W\]"):
        quantize_graph(g, plan, np.zeros((3, 4)))
