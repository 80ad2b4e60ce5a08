"""MobileNetV2-style feature extractor used as the reference workload.

Width multiplier is pinned at 1.0; the standard schedule then yields exactly
52 conv layers (stem + 2 in the first block + 16 blocks of 3 + final 1x1)
and 10 residual adds. The first block omits the expansion conv, so its
depthwise filter bank is the famously tiny 288-parameter layer.
"""

from __future__ import annotations

import numpy as np

from .graph import CONV_KINDS, Graph, GraphError, LayerNode, conv_out_hw

__all__ = ["BLOCK_SETTINGS", "build_backbone", "backbone_conv_ids", "count_params", "count_macs"]

# (expand_ratio, out_channels, repeats, first_stride)
BLOCK_SETTINGS = (
    (1, 16, 1, 1),
    (6, 24, 2, 2),
    (6, 32, 3, 2),
    (6, 64, 4, 2),
    (6, 96, 3, 1),
    (6, 160, 3, 2),
    (6, 320, 1, 1),
)

STEM_CHANNELS = 32
HEAD_CHANNELS = 1280


class _Builder:
    def __init__(self, rng: np.random.Generator, resolution: int):
        self.rng = rng
        self.nodes: list[LayerNode] = []
        self.tensors: dict[str, np.ndarray] = {}
        self.resolution = resolution

    def add(self, node: LayerNode) -> str:
        self.nodes.append(node)
        return node.id

    def conv_unit(
        self,
        cid: str,
        src: str,
        kind: str,
        in_ch: int,
        out_ch: int,
        in_hw: tuple[int, int],
        kernel: int,
        stride: int,
        padding: int,
        signed_act: bool,
    ) -> tuple[str, tuple[int, int]]:
        """conv -> batch_norm -> activation_quant; returns (quantizer id, out_hw)."""
        out_hw = conv_out_hw(in_hw, kernel, stride, padding)
        if kind == "depthwise_conv2d":
            wshape = (out_ch, kernel, kernel)
            fan_in = kernel * kernel
        else:
            wshape = (out_ch, in_ch, kernel, kernel)
            fan_in = in_ch * kernel * kernel
        w = self.rng.normal(0.0, np.sqrt(2.0 / fan_in), size=wshape)
        self.tensors[f"{cid}_w"] = np.ascontiguousarray(w)
        shape_attrs = dict(in_ch=in_ch, out_ch=out_ch, in_hw=in_hw, out_hw=out_hw)
        self.add(
            LayerNode(
                cid,
                kind,
                [src],
                dict(kernel=kernel, stride=stride, padding=padding, **shape_attrs),
                weight_ref=f"{cid}_w",
            )
        )
        bn_attrs = dict(in_ch=out_ch, out_ch=out_ch, in_hw=out_hw, out_hw=out_hw)
        self.tensors[f"{cid}_gamma"] = self.rng.uniform(0.5, 1.5, out_ch)
        self.tensors[f"{cid}_beta"] = self.rng.normal(0.0, 0.1, out_ch)
        self.tensors[f"{cid}_mean"] = self.rng.normal(0.0, 0.1, out_ch)
        self.tensors[f"{cid}_var"] = self.rng.uniform(0.5, 1.5, out_ch)
        self.add(
            LayerNode(
                f"{cid}_bn",
                "batch_norm",
                [cid],
                dict(
                    gamma_ref=f"{cid}_gamma",
                    beta_ref=f"{cid}_beta",
                    mean_ref=f"{cid}_mean",
                    var_ref=f"{cid}_var",
                    eps=1e-5,
                    **bn_attrs,
                ),
            )
        )
        act = self.add(
            LayerNode(
                f"{cid}_act",
                "activation_quant",
                [f"{cid}_bn"],
                dict(bit_width=None, signed=signed_act, scale=None, **bn_attrs),
            )
        )
        return act, out_hw


def build_backbone(input_resolution: int = 240, seed: int = 0) -> Graph:
    """Build the float-stage backbone at the given input resolution.

    Resolution must be >= 32 and divisible by 16; the five stride-2 stages
    take 240 -> 120 -> 60 -> 30 -> 15 -> 8 (odd sizes round up via padding).
    """
    if input_resolution < 32 or input_resolution % 16:
        raise GraphError(f"input_resolution must be >= 32 and divisible by 16, got {input_resolution}")
    rng = np.random.default_rng(seed)
    b = _Builder(rng, input_resolution)
    hw = (input_resolution, input_resolution)
    b.add(LayerNode("input", "input", [], dict(in_ch=3, out_ch=3, in_hw=hw, out_hw=hw, bit_width=None, signed=False, scale=None)))

    src, hw = b.conv_unit("conv0", "input", "conv2d", 3, STEM_CHANNELS, hw, kernel=3, stride=2, padding=1, signed_act=False)
    in_ch = STEM_CHANNELS

    block = 0
    for expand, out_ch, repeats, first_stride in BLOCK_SETTINGS:
        for rep in range(repeats):
            block += 1
            bid = f"b{block:02d}"
            stride = first_stride if rep == 0 else 1
            block_in, block_in_ch, block_in_hw = src, in_ch, hw
            mid_ch = in_ch * expand
            if expand != 1:
                src, hw = b.conv_unit(f"{bid}_expand", src, "pointwise_conv2d", in_ch, mid_ch, hw, 1, 1, 0, signed_act=False)
            src, hw = b.conv_unit(f"{bid}_dw", src, "depthwise_conv2d", mid_ch, mid_ch, hw, 3, stride, 1, signed_act=False)
            # projection is linear: signed quantizer, no ReLU
            src, hw = b.conv_unit(f"{bid}_pw", src, "pointwise_conv2d", mid_ch, out_ch, hw, 1, 1, 0, signed_act=True)
            if stride == 1 and block_in_ch == out_ch:
                if block_in_hw != hw:
                    raise GraphError(f"{bid}: residual shapes diverged")
                src = b.add(
                    LayerNode(
                        f"{bid}_add",
                        "residual_add",
                        [block_in, src],
                        dict(in_ch=out_ch, out_ch=out_ch, in_hw=hw, out_hw=hw),
                    )
                )
            in_ch = out_ch

    src, hw = b.conv_unit("conv_last", src, "pointwise_conv2d", in_ch, HEAD_CHANNELS, hw, 1, 1, 0, signed_act=False)
    b.add(LayerNode("output", "output", [src], dict(in_ch=HEAD_CHANNELS, out_ch=HEAD_CHANNELS, in_hw=hw, out_hw=hw)))

    g = Graph(stage="float", nodes=b.nodes, tensors=b.tensors, input_resolution=input_resolution)
    n_conv = len(g.conv_nodes())
    n_add = sum(1 for n in g.nodes if n.kind == "residual_add")
    if n_conv != 52 or n_add != 10:
        raise GraphError(f"schedule produced {n_conv} convs / {n_add} adds, expected 52 / 10")
    g.validate()
    return g


def backbone_conv_ids() -> list[str]:
    """Conv-layer ids in graph order, without building the graph."""
    ids = ["conv0"]
    block = 0
    for expand, _, repeats, _ in BLOCK_SETTINGS:
        for _ in range(repeats):
            block += 1
            bid = f"b{block:02d}"
            if expand != 1:
                ids.append(f"{bid}_expand")
            ids += [f"{bid}_dw", f"{bid}_pw"]
    ids.append("conv_last")
    return ids


def count_params(g: Graph) -> dict[str, int]:
    """Weight-element count per conv layer (batch-norm params excluded)."""
    out: dict[str, int] = {}
    for n in g.conv_nodes():
        a = n.attrs
        k = a["kernel"]
        if n.kind == "depthwise_conv2d":
            out[n.id] = a["out_ch"] * k * k
        else:
            out[n.id] = a["out_ch"] * a["in_ch"] * k * k
    return out


def count_macs(g: Graph) -> dict[str, int]:
    """Multiply-accumulates per conv layer: params * output pixels."""
    params = count_params(g)
    return {n.id: params[n.id] * n.out_pixels() for n in g.conv_nodes()}
