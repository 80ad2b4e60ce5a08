"""Reference demonstration of FIFO starvation on a fork-join pipeline.

The workload is a residual block whose body is a six-stage chain of convs,
each needing 750,000 cycles per frame when fully folded, behind a stem conv
that forks to the chain and to the residual shortcut. At 187.5 MHz with
generous FIFOs the pipeline runs at exactly 250 frames per second (the
bottleneck's rate). Shrinking the shortcut FIFO to one token caps the number
of pixels in flight inside the body at one per round trip, so every body
stage idles most of the time and throughput collapses several-fold, without
any change to the compute resources.
"""

from __future__ import annotations

import numpy as np

from .folding import FoldingPlan
from .graph import Graph, LayerNode, conv_out_hw
from .lowering import streamline_to_integer
from .pipeline_sim import FifoConfig, simulate
from .quantize import BitWidthPlan, quantize_graph

__all__ = ["DEMO_CLOCK_MHZ", "SHORTCUT_EDGE", "build_demo_graph", "demo_plan", "run_demo"]

DEMO_CLOCK_MHZ = 187.5
SHORTCUT_EDGE = ("conv0_act", "add0")

_RES = 20  # 400 pixels per frame
_NARROW, _WIDE = 25, 75  # 25 * 75 * 400 = 750,000 cycles fully folded


def _conv_unit(
    nodes: list[LayerNode],
    tensors: dict[str, np.ndarray],
    rng: np.random.Generator,
    cid: str,
    src: str,
    in_ch: int,
    out_ch: int,
    in_hw: tuple[int, int],
    kernel: int,
    signed_act: bool,
) -> str:
    out_hw = conv_out_hw(in_hw, kernel, 1, kernel // 2)
    kind = "pointwise_conv2d" if kernel == 1 else "conv2d"
    fan_in = in_ch * kernel * kernel
    tensors[f"{cid}_w"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(out_ch, in_ch, kernel, kernel))
    shape = dict(in_ch=in_ch, out_ch=out_ch, in_hw=in_hw, out_hw=out_hw)
    nodes.append(LayerNode(cid, kind, [src], dict(kernel=kernel, stride=1, padding=kernel // 2, **shape), weight_ref=f"{cid}_w"))
    post = dict(in_ch=out_ch, out_ch=out_ch, in_hw=out_hw, out_hw=out_hw)
    nodes.append(LayerNode(f"{cid}_act", "activation_quant", [cid], dict(bit_width=None, signed=signed_act, scale=None, **post)))
    return f"{cid}_act"


def build_demo_graph(seed: int = 0) -> Graph:
    """Stem conv forking to a six-conv body and a residual shortcut, lowered."""
    rng = np.random.default_rng(seed)
    hw = (_RES, _RES)
    nodes: list[LayerNode] = [
        LayerNode("input", "input", [], dict(in_ch=3, out_ch=3, in_hw=hw, out_hw=hw, bit_width=None, signed=False, scale=None))
    ]
    tensors: dict[str, np.ndarray] = {}
    src = _conv_unit(nodes, tensors, rng, "conv0", "input", 3, _NARROW, hw, kernel=3, signed_act=False)
    fork = src
    ch = _NARROW
    for i in range(1, 7):
        out_ch = _WIDE if ch == _NARROW else _NARROW
        src = _conv_unit(nodes, tensors, rng, f"body{i}", src, ch, out_ch, hw, kernel=1, signed_act=(i == 6))
        ch = out_ch
    nodes.append(LayerNode("add0", "residual_add", [fork, src], dict(in_ch=ch, out_ch=ch, in_hw=hw, out_hw=hw)))
    nodes.append(LayerNode("output", "output", ["add0"], dict(in_ch=ch, out_ch=ch, in_hw=hw, out_hw=hw)))
    g = Graph(stage="float", nodes=nodes, tensors=tensors, input_resolution=_RES)
    g.validate()
    images = rng.uniform(0.0, 1.0, size=(2, 3) + hw)
    gq = quantize_graph(g, BitWidthPlan.uniform(g, 8, 8), images)
    return streamline_to_integer(gq)


def demo_plan(g: Graph) -> FoldingPlan:
    """Fully folded plan: every body conv takes exactly 750,000 cycles."""
    return FoldingPlan.unit(g, clock_mhz=DEMO_CLOCK_MHZ)


def run_demo(frames: int = 5, shortcut_depth: int = 1, seed: int = 0) -> dict:
    """Simulate the demo twice: deep FIFOs, then a starved shortcut."""
    g = build_demo_graph(seed)
    plan = demo_plan(g)
    deep = simulate(g, plan, FifoConfig.deep(g), frames=frames)
    starved_fifo = FifoConfig.deep(g).override(SHORTCUT_EDGE, shortcut_depth)
    starved = simulate(g, plan, starved_fifo, frames=frames)
    return {
        "clock_mhz": DEMO_CLOCK_MHZ,
        "bottleneck_node": deep.bottleneck_node,
        "bottleneck_cycles": deep.bottleneck_cycles,
        "deep_fps": deep.steady_state_fps,
        "deep_cycles_per_frame": deep.cycles_per_frame,
        "starved_fps": starved.steady_state_fps,
        "starved_cycles_per_frame": starved.cycles_per_frame,
        "shortcut_edge": SHORTCUT_EDGE,
        "shortcut_depth": shortcut_depth,
        "slowdown": starved.cycles_per_frame / deep.cycles_per_frame,
        "starved_stall_cycles": dict(sorted(starved.stall_cycles.items())),
        "shortcut_peak": starved.fifo_peaks[SHORTCUT_EDGE],
    }
