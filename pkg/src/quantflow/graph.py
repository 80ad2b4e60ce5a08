"""Layer graph shared by every pipeline stage.

A Graph is a topologically ordered list of nodes plus a tensor store. The
same container carries the float model, the fake-quant model, and the fully
lowered integer streaming graph; ``stage`` says which invariants hold.
"""

from __future__ import annotations

import copy as _copy
from dataclasses import dataclass, field
from typing import Any, Iterator

import numpy as np

from .qtensor import QuantTensor

__all__ = ["LayerNode", "Graph", "GraphError", "KINDS", "STAGES", "conv_out_hw"]

KINDS = frozenset(
    {
        "input",
        "output",
        "conv2d",
        "depthwise_conv2d",
        "pointwise_conv2d",
        "batch_norm",
        "activation_quant",
        "residual_add",
        "im2col",
        "matvec",
        "multithreshold",
    }
)

CONV_KINDS = frozenset({"conv2d", "depthwise_conv2d", "pointwise_conv2d"})

STAGES = ("float", "quantized", "lowered")

# the only kinds allowed to survive streamlining
INTEGER_KINDS = frozenset({"input", "output", "im2col", "matvec", "multithreshold", "residual_add"})


class GraphError(ValueError):
    """Structural problem in a graph: bad wiring, shapes, or stage mismatch."""


def conv_out_hw(in_hw: tuple[int, int], kernel: int, stride: int, padding: int) -> tuple[int, int]:
    h = (in_hw[0] + 2 * padding - kernel) // stride + 1
    w = (in_hw[1] + 2 * padding - kernel) // stride + 1
    if h < 1 or w < 1:
        raise GraphError(f"kernel {kernel}/stride {stride} collapses {in_hw} below 1x1")
    return (h, w)


@dataclass
class LayerNode:
    """One operation. Shape bookkeeping lives in attrs:

    in_ch/out_ch, in_hw/out_hw   every node
    kernel/stride/padding        convs and im2col
    bit_width/signed/scale       activation_quant (scale None until calibrated)
    out_lo/out_hi                integer value range on the output edge (lowered)
    """

    id: str
    kind: str
    inputs: list[str]
    attrs: dict[str, Any] = field(default_factory=dict)
    weight_ref: str | None = None

    def out_hw(self) -> tuple[int, int]:
        return tuple(self.attrs["out_hw"])

    def out_ch(self) -> int:
        return int(self.attrs["out_ch"])

    def out_pixels(self) -> int:
        h, w = self.out_hw()
        return h * w


@dataclass
class Graph:
    """Ordered nodes + tensor store. Nodes must be listed topologically."""

    stage: str
    nodes: list[LayerNode]
    tensors: dict[str, Any] = field(default_factory=dict)
    input_resolution: int | None = None

    def __post_init__(self) -> None:
        self._index = {n.id: n for n in self.nodes}
        if len(self._index) != len(self.nodes):
            raise GraphError("duplicate node ids")

    def node(self, node_id: str) -> LayerNode:
        try:
            return self._index[node_id]
        except KeyError:
            raise GraphError(f"no node {node_id!r}") from None

    def __iter__(self) -> Iterator[LayerNode]:
        return iter(self.nodes)

    def producers(self, node_id: str) -> list[LayerNode]:
        return [self.node(i) for i in self.node(node_id).inputs]

    def consumers(self, node_id: str) -> list[LayerNode]:
        return [n for n in self.nodes if node_id in n.inputs]

    def edges(self) -> list[tuple[str, str]]:
        return [(src, n.id) for n in self.nodes for src in n.inputs]

    @property
    def input_node(self) -> LayerNode:
        return self._only_kind("input")

    @property
    def output_node(self) -> LayerNode:
        return self._only_kind("output")

    def _only_kind(self, kind: str) -> LayerNode:
        found = [n for n in self.nodes if n.kind == kind]
        if len(found) != 1:
            raise GraphError(f"expected exactly one {kind} node, found {len(found)}")
        return found[0]

    def conv_nodes(self) -> list[LayerNode]:
        return [n for n in self.nodes if n.kind in CONV_KINDS]

    def copy(self) -> "Graph":
        g = Graph(
            stage=self.stage,
            nodes=[LayerNode(n.id, n.kind, list(n.inputs), _copy.deepcopy(n.attrs), n.weight_ref) for n in self.nodes],
            tensors=dict(self.tensors),  # tensor payloads are immutable, share them
            input_resolution=self.input_resolution,
        )
        return g

    # -- validation ----------------------------------------------------------

    def validate(self) -> None:
        if self.stage not in STAGES:
            raise GraphError(f"unknown stage {self.stage!r}")
        seen: set[str] = set()
        self.input_node
        self.output_node
        for n in self.nodes:
            if n.kind not in KINDS:
                raise GraphError(f"{n.id}: unknown kind {n.kind!r}")
            for src in n.inputs:
                if src not in seen:
                    raise GraphError(f"{n.id}: input {src!r} missing or out of topological order")
            seen.add(n.id)
            self._validate_node(n)
        if self.stage == "lowered":
            bad = [n.id for n in self.nodes if n.kind not in INTEGER_KINDS]
            if bad:
                raise GraphError(f"lowered graph contains non-integer kinds: {bad}")
        if self.stage == "float":
            bad = [n.id for n in self.nodes if n.kind in ("im2col", "matvec", "multithreshold")]
            if bad:
                raise GraphError(f"float graph contains lowered kinds: {bad}")

    def _validate_node(self, n: LayerNode) -> None:
        a = n.attrs
        arity = {"input": 0, "residual_add": 2}.get(n.kind, 1)
        if len(n.inputs) != arity:
            raise GraphError(f"{n.id}: {n.kind} expects {arity} inputs, got {len(n.inputs)}")
        if n.kind != "output" and ("out_ch" not in a or "out_hw" not in a):
            raise GraphError(f"{n.id}: missing shape attrs")
        for src_node in self.producers(n.id):
            if src_node.kind == "output":
                raise GraphError(f"{n.id}: reads from output node")
        if n.kind in CONV_KINDS:
            self._validate_conv(n)
        elif n.kind == "im2col":
            src = self.producers(n.id)[0]
            expect = conv_out_hw(src.out_hw(), a["kernel"], a["stride"], a["padding"])
            if tuple(a["out_hw"]) != expect:
                raise GraphError(f"{n.id}: out_hw {a['out_hw']} != computed {expect}")
        elif n.kind == "matvec":
            if n.weight_ref is None or n.weight_ref not in self.tensors:
                raise GraphError(f"{n.id}: matvec weight tensor missing")
        elif n.kind == "multithreshold":
            if n.weight_ref is not None and n.weight_ref not in self.tensors:
                raise GraphError(f"{n.id}: threshold tensor missing")
        elif n.kind == "batch_norm":
            for key in ("gamma_ref", "beta_ref", "mean_ref", "var_ref"):
                if a.get(key) not in self.tensors:
                    raise GraphError(f"{n.id}: batch_norm missing {key}")
            src = self.producers(n.id)[0]
            if src.out_ch() != n.out_ch():
                raise GraphError(f"{n.id}: channel mismatch with producer")
        elif n.kind == "activation_quant":
            if a.get("signed") is None:
                raise GraphError(f"{n.id}: activation_quant needs signed")
            if self.stage != "float" and (a.get("bit_width") is None or a.get("scale") is None):
                raise GraphError(f"{n.id}: uncalibrated quantizer in {self.stage} graph")
        elif n.kind == "residual_add":
            p0, p1 = self.producers(n.id)
            if p0.out_ch() != p1.out_ch() or p0.out_hw() != p1.out_hw():
                raise GraphError(f"{n.id}: residual branches disagree on shape")
        if n.kind not in ("input", "output", "residual_add") and n.inputs:
            src = self.producers(n.id)[0]
            if n.kind in CONV_KINDS or n.kind == "im2col":
                if src.out_ch() != int(a["in_ch"]):
                    raise GraphError(f"{n.id}: in_ch {a['in_ch']} != producer out_ch {src.out_ch()}")
            elif n.kind not in ("matvec", "multithreshold"):
                if src.out_ch() != n.out_ch() or src.out_hw() != n.out_hw():
                    raise GraphError(f"{n.id}: shape must match producer for {n.kind}")

    def _validate_conv(self, n: LayerNode) -> None:
        a = n.attrs
        for key in ("kernel", "stride", "padding", "in_ch", "out_ch", "in_hw", "out_hw"):
            if key not in a:
                raise GraphError(f"{n.id}: conv missing attr {key}")
        if n.kind == "pointwise_conv2d" and a["kernel"] != 1:
            raise GraphError(f"{n.id}: pointwise kernel must be 1")
        if n.kind == "depthwise_conv2d" and a["in_ch"] != a["out_ch"]:
            raise GraphError(f"{n.id}: depthwise needs in_ch == out_ch")
        expect = conv_out_hw(tuple(a["in_hw"]), a["kernel"], a["stride"], a["padding"])
        if tuple(a["out_hw"]) != expect:
            raise GraphError(f"{n.id}: out_hw {a['out_hw']} != computed {expect}")
        if n.weight_ref is None or n.weight_ref not in self.tensors:
            raise GraphError(f"{n.id}: conv weight tensor missing")
        w = self.tensors[n.weight_ref]
        shape = w.shape
        if n.kind == "depthwise_conv2d":
            expect_shape = (a["out_ch"], a["kernel"], a["kernel"])
        else:
            expect_shape = (a["out_ch"], a["in_ch"], a["kernel"], a["kernel"])
        if tuple(shape) != expect_shape:
            raise GraphError(f"{n.id}: weight shape {shape} != {expect_shape}")
        if self.stage == "float":
            if isinstance(w, QuantTensor):
                raise GraphError(f"{n.id}: float graph holds quantized weights")
        elif not isinstance(w, QuantTensor):
            raise GraphError(f"{n.id}: {self.stage} graph holds float weights")


def graphs_equal(g1: Graph, g2: Graph) -> bool:
    """Bit-exact structural equality (ids, wiring, attrs, payloads, scales)."""
    if g1.stage != g2.stage or g1.input_resolution != g2.input_resolution:
        return False
    if len(g1.nodes) != len(g2.nodes) or set(g1.tensors) != set(g2.tensors):
        return False
    for n1, n2 in zip(g1.nodes, g2.nodes):
        if (n1.id, n1.kind, n1.inputs, n1.weight_ref) != (n2.id, n2.kind, n2.inputs, n2.weight_ref):
            return False
        if _attrs_key(n1.attrs) != _attrs_key(n2.attrs):
            return False
    for name, t1 in g1.tensors.items():
        t2 = g2.tensors[name]
        if isinstance(t1, QuantTensor) != isinstance(t2, QuantTensor):
            return False
        if isinstance(t1, QuantTensor):
            if (t1.bit_width, t1.signed, t1.channel_axis) != (t2.bit_width, t2.signed, t2.channel_axis):
                return False
            if not np.array_equal(t1.data, t2.data) or t1.scales.tobytes() != t2.scales.tobytes():
                return False
        else:
            if t1.dtype != t2.dtype or t1.shape != t2.shape or t1.tobytes() != t2.tobytes():
                return False
    return True


def _attrs_key(attrs: dict[str, Any]) -> list[tuple[str, Any]]:
    out = []
    for k in sorted(attrs):
        v = attrs[k]
        if isinstance(v, np.ndarray):
            v = (v.dtype.str, v.shape, v.tobytes())
        elif isinstance(v, (list, tuple)):
            v = tuple(v)
        out.append((k, v))
    return out
