"""Backbone topology tests: conv census, block structure, spatial chain."""

from __future__ import annotations

from collections import Counter

import pytest

from quantflow import GraphError, backbone_conv_ids, build_backbone, count_macs, count_params, graphs_equal


@pytest.fixture(scope="module")
def backbone():
    return build_backbone(240)


def test_backbone_validates(backbone):
    backbone.validate()
    assert backbone.stage == "float"
    assert backbone.input_resolution == 240


def test_conv_census(backbone):
    kinds = Counter(n.kind for n in backbone.nodes)
    assert len(backbone.conv_nodes()) == 52
    assert kinds["conv2d"] == 1
    assert kinds["depthwise_conv2d"] == 17
    assert kinds["pointwise_conv2d"] == 34
    assert kinds["batch_norm"] == 52
    assert kinds["activation_quant"] == 52
    assert kinds["residual_add"] == 10


def test_seventeen_blocks_first_without_expansion(backbone):
    blocks = sorted({n.id.split("_")[0] for n in backbone.conv_nodes() if n.id.startswith("b")})
    assert blocks == [f"b{i:02d}" for i in range(1, 18)]
    b01 = [n.id for n in backbone.conv_nodes() if n.id.startswith("b01")]
    assert b01 == ["b01_dw", "b01_pw"]
    for b in blocks[1:]:
        assert f"{b}_expand" in {n.id for n in backbone.conv_nodes()}


def test_first_depthwise_has_288_weights(backbone):
    w = backbone.tensors[backbone.node("b01_dw").weight_ref]
    assert w.shape == (32, 3, 3)
    assert w.size == 288
    assert count_params(backbone)["b01_dw"] == 288


def test_conv_id_helper_matches_graph_order(backbone):
    assert backbone_conv_ids() == [n.id for n in backbone.conv_nodes()]


def test_spatial_chain_halves_five_times(backbone):
    assert backbone.input_node.out_hw() == (240, 240)
    assert backbone.node("conv0").out_hw() == (120, 120)
    assert backbone.node("b02_dw").out_hw() == (60, 60)
    assert backbone.node("b04_dw").out_hw() == (30, 30)
    assert backbone.node("b07_dw").out_hw() == (15, 15)
    assert backbone.node("b14_dw").out_hw() == (8, 8)  # odd size rounds up via padding
    assert backbone.node("conv_last").out_hw() == (8, 8)
    assert backbone.node("conv_last").out_ch() == 1280
    stride2 = [n.id for n in backbone.conv_nodes() if n.attrs["stride"] == 2]
    assert stride2 == ["conv0", "b02_dw", "b04_dw", "b07_dw", "b14_dw"]


def test_macs_are_params_times_output_pixels(backbone):
    params = count_params(backbone)
    macs = count_macs(backbone)
    assert set(params) == set(macs) == {n.id for n in backbone.conv_nodes()}
    for n in backbone.conv_nodes():
        assert macs[n.id] == params[n.id] * n.out_pixels()


def test_resolution_validation():
    with pytest.raises(GraphError, match="divisible by 16"):
        build_backbone(250)
    with pytest.raises(GraphError, match=">= 32"):
        build_backbone(16)
    g = build_backbone(64)
    g.validate()
    assert g.node("conv_last").out_hw() == (2, 2)


def test_backbone_is_deterministic():
    assert graphs_equal(build_backbone(64, seed=0), build_backbone(64, seed=0))
    assert not graphs_equal(build_backbone(64, seed=0), build_backbone(64, seed=1))
