"""Random small models and images for randomized pipeline tests.

The generator aims for coverage, not realism: depthwise and pointwise convs,
optional batch norm with negative scales (exercising the sign-flip fold),
signed and unsigned quantizers, deliberately zeroed weight channels, strides,
and residual chains that share producers transitively. Shapes stay tiny so a
few hundred end-to-end checks run in seconds.
"""

from __future__ import annotations

import numpy as np

from .graph import Graph, GraphError, LayerNode, conv_out_hw
from .quantize import BitWidthPlan

__all__ = ["synth_images", "toy_model", "random_plan"]


def synth_images(n: int, ch: int, hw: tuple[int, int], seed: int = 0, scale: float = 1.0) -> np.ndarray:
    """Uniform [0, scale) images, shape [n, ch, h, w]."""
    rng = np.random.default_rng(seed)
    return rng.uniform(0.0, scale, size=(n, ch) + tuple(hw))


class _ToyBuilder:
    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.nodes: list[LayerNode] = []
        self.tensors: dict[str, np.ndarray] = {}
        self.n_convs = 0

    def conv_unit(self, src: str, in_ch: int, in_hw: tuple[int, int], out_ch: int | None = None) -> tuple[str, int, tuple[int, int]]:
        """conv [+ batch_norm] + activation_quant; returns (act id, out_ch, out_hw)."""
        rng = self.rng
        cid = f"conv{self.n_convs}"
        self.n_convs += 1
        depthwise = out_ch is None and in_ch > 1 and rng.random() < 0.25
        if depthwise:
            kind, kernel, out_ch = "depthwise_conv2d", 3, in_ch
        elif rng.random() < 0.4:
            kind, kernel = "pointwise_conv2d", 1
            out_ch = out_ch or int(rng.integers(1, 7))
        else:
            kind, kernel = "conv2d", int(rng.choice([1, 3]))
            if kind == "conv2d" and kernel == 1:
                kind = "pointwise_conv2d"
            out_ch = out_ch or int(rng.integers(1, 7))
        stride = 2 if min(in_hw) >= 4 and rng.random() < 0.3 else 1
        padding = kernel // 2 if rng.random() < 0.8 else 0
        if min(in_hw) + 2 * padding < kernel:
            padding = kernel // 2
        out_hw = conv_out_hw(in_hw, kernel, stride, padding)

        if kind == "depthwise_conv2d":
            wshape: tuple[int, ...] = (out_ch, kernel, kernel)
            fan_in = kernel * kernel
        else:
            wshape = (out_ch, in_ch, kernel, kernel)
            fan_in = in_ch * kernel * kernel
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=wshape)
        if out_ch > 1 and rng.random() < 0.1:
            w[rng.integers(0, out_ch)] = 0.0  # exercise the zero-channel path
        self.tensors[f"{cid}_w"] = np.ascontiguousarray(w)
        shape_attrs = dict(in_ch=in_ch, out_ch=out_ch, in_hw=tuple(in_hw), out_hw=out_hw)
        self.nodes.append(
            LayerNode(cid, kind, [src], dict(kernel=kernel, stride=stride, padding=padding, **shape_attrs), weight_ref=f"{cid}_w")
        )
        head = cid
        post_attrs = dict(in_ch=out_ch, out_ch=out_ch, in_hw=out_hw, out_hw=out_hw)
        if rng.random() < 0.8:
            sign = np.where(rng.random(out_ch) < 0.25, -1.0, 1.0)
            self.tensors[f"{cid}_gamma"] = rng.uniform(0.3, 1.5, out_ch) * sign
            self.tensors[f"{cid}_beta"] = rng.normal(0.0, 0.2, out_ch)
            self.tensors[f"{cid}_mean"] = rng.normal(0.0, 0.3, out_ch)
            self.tensors[f"{cid}_var"] = rng.uniform(0.5, 1.5, out_ch)
            self.nodes.append(
                LayerNode(
                    f"{cid}_bn",
                    "batch_norm",
                    [head],
                    dict(
                        gamma_ref=f"{cid}_gamma",
                        beta_ref=f"{cid}_beta",
                        mean_ref=f"{cid}_mean",
                        var_ref=f"{cid}_var",
                        eps=1e-5,
                        **post_attrs,
                    ),
                )
            )
            head = f"{cid}_bn"
        signed = bool(rng.random() < 0.35)
        self.nodes.append(
            LayerNode(f"{cid}_act", "activation_quant", [head], dict(bit_width=None, signed=signed, scale=None, **post_attrs))
        )
        return f"{cid}_act", out_ch, out_hw


def toy_model(seed: int = 0) -> Graph:
    """A random float-stage model: a handful of conv units, maybe residuals."""
    rng = np.random.default_rng(seed)
    hw: tuple[int, int] = (int(rng.integers(6, 13)),) * 2
    ch = int(rng.integers(1, 5))
    b = _ToyBuilder(rng)
    b.nodes.append(
        LayerNode("input", "input", [], dict(in_ch=ch, out_ch=ch, in_hw=hw, out_hw=hw, bit_width=None, signed=False, scale=None))
    )
    src, ch, hw = b.conv_unit("input", ch, hw)
    n_adds = 0
    for _ in range(int(rng.integers(1, 4))):
        if rng.random() < 0.5:
            # residual block: one or two units, add the block input back when
            # the body lands on the same shape (strides can break that)
            block_in, block_ch, block_hw = src, ch, hw
            src, ch, hw = b.conv_unit(src, ch, hw)
            if (ch, hw) != (block_ch, block_hw) or rng.random() < 0.5:
                src, ch, hw = b.conv_unit(src, ch, hw, out_ch=block_ch)
            if (ch, hw) == (block_ch, block_hw):
                b.nodes.append(
                    LayerNode(
                        f"add{n_adds}",
                        "residual_add",
                        [block_in, src],
                        dict(in_ch=ch, out_ch=ch, in_hw=hw, out_hw=hw),
                    )
                )
                src = f"add{n_adds}"
                n_adds += 1
        else:
            src, ch, hw = b.conv_unit(src, ch, hw)
    b.nodes.append(LayerNode("output", "output", [src], dict(in_ch=ch, out_ch=ch, in_hw=hw, out_hw=hw)))
    g = Graph(stage="float", nodes=b.nodes, tensors=b.tensors, input_resolution=hw[0])
    g.validate()
    return g


def random_plan(g: Graph, seed: int = 0) -> BitWidthPlan:
    """Random per-layer weight widths (1..8) and one activation width (2..8)."""
    rng = np.random.default_rng(seed)
    weight_bits = {n.id: int(rng.integers(1, 9)) for n in g.conv_nodes()}
    return BitWidthPlan(weight_bits, activation_bits=int(rng.integers(2, 9)), input_bits=int(rng.integers(4, 9)))
