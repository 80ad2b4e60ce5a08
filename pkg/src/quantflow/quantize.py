"""Post-training quantization of a float graph.

One forward pass per calibration image collects per-quantizer activation
maxima; weights get per-channel symmetric scales from their own maxima.
The result is a quantized-stage graph whose tensors are QuantTensors and
whose activation quantizers carry a concrete (scale, bit_width, signed)
triple, with residual chains already forced onto one shared scale.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .engine import run_float
from .graph import CONV_KINDS, Graph, GraphError
from .lowering import align_residual_scales
from .qtensor import calibration_scale, quantize_per_channel

__all__ = ["BitWidthPlan", "quantize_graph"]


@dataclass
class BitWidthPlan:
    """Weight bits per conv node plus one shared activation width."""

    weight_bits: dict[str, int] = field(default_factory=dict)
    activation_bits: int = 8
    input_bits: int = 8

    @classmethod
    def uniform(cls, g: Graph, weight_bits: int = 8, activation_bits: int = 8) -> "BitWidthPlan":
        return cls({n.id: weight_bits for n in g.conv_nodes()}, activation_bits)

    def validate(self, g: Graph) -> None:
        convs = {n.id for n in g.conv_nodes()}
        missing = sorted(convs - set(self.weight_bits))
        if missing:
            raise GraphError(f"plan is missing weight bits for {missing}")
        unknown = sorted(set(self.weight_bits) - convs)
        if unknown:
            raise GraphError(f"plan names convs not in the graph: {unknown}")
        for cid, bits in self.weight_bits.items():
            if not 1 <= int(bits) <= 16:
                raise GraphError(f"{cid}: weight bits {bits} outside [1, 16]")
        for name, bits in (("activation", self.activation_bits), ("input", self.input_bits)):
            if not 2 <= int(bits) <= 16:
                raise GraphError(f"{name} bits {bits} outside [2, 16]")

    def to_json(self, path: str | Path) -> None:
        payload = {
            "weight_bits": {k: int(v) for k, v in sorted(self.weight_bits.items())},
            "activation_bits": int(self.activation_bits),
            "input_bits": int(self.input_bits),
        }
        Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")

    @classmethod
    def from_json(cls, path: str | Path) -> "BitWidthPlan":
        payload = json.loads(Path(path).read_text())
        return cls(
            {str(k): int(v) for k, v in payload["weight_bits"].items()},
            int(payload["activation_bits"]),
            int(payload.get("input_bits", 8)),
        )


def _activation_maxima(g: Graph, images: np.ndarray) -> dict[str, float]:
    """Per-quantizer max|x| (signed) or max(x, 0) (unsigned) over the set."""
    maxima: dict[str, float] = {}
    input_max = 0.0
    for img in images:
        _, trace = run_float(g, img)
        input_max = max(input_max, float(np.abs(img).max()))
        for n in g.nodes:
            if n.kind != "activation_quant":
                continue
            pre = trace.outputs[n.inputs[0]]
            m = float(np.abs(pre).max()) if n.attrs["signed"] else float(np.maximum(pre, 0.0).max())
            maxima[n.id] = max(maxima.get(n.id, 0.0), m)
    maxima["__input__"] = input_max
    return maxima


def quantize_graph(g: Graph, plan: BitWidthPlan, calib_images: np.ndarray) -> Graph:
    """Lower a float graph to the quantized stage under a bit-width plan."""
    if g.stage != "float":
        raise GraphError(f"quantize_graph expects a float graph, got {g.stage}")
    calib_images = np.asarray(calib_images, dtype=np.float64)
    if calib_images.ndim != 4 or calib_images.shape[0] < 1:
        raise GraphError("calibration images must be a non-empty [N, C, H, W] array")
    plan.validate(g)
    maxima = _activation_maxima(g, calib_images)

    q = g.copy()
    for n in q.conv_nodes():
        bits = int(plan.weight_bits[n.id])
        n.attrs["weight_bits"] = bits
        q.tensors[n.weight_ref] = quantize_per_channel(q.tensors[n.weight_ref], bits)
    for n in q.nodes:
        if n.kind == "input":
            n.attrs["bit_width"] = int(plan.input_bits)
            n.attrs["signed"] = False
            n.attrs["scale"] = calibration_scale(maxima["__input__"], int(plan.input_bits), signed=False)
        elif n.kind == "activation_quant":
            n.attrs["bit_width"] = int(plan.activation_bits)
            n.attrs["scale"] = calibration_scale(
                maxima[n.id], int(plan.activation_bits), signed=bool(n.attrs["signed"])
            )
    q.stage = "quantized"
    q = align_residual_scales(q)
    q.validate()
    return q
