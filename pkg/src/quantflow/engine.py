"""Three executors over the same graphs.

run_float      float stage; plain float64 ops, ReLU for unsigned quantizers.
run_reference  quantized stage; fake-quant oracle. Dequantized convs are
               evaluated exactly (integer accumulation times the scale
               product), and after batch-norm folding each quantizer applies
               the canonical per-channel affine to the raw accumulator, so
               its outputs are reproducible bit for bit by integer hardware.
run_int        lowered stage; integer-only im2col + matvec + thresholds.
               Deterministic, single-threaded, overflow-checked.

run_int and run_reference follow deliberately different routes (direct
convolution + rounded affine vs. im2col matmul + threshold counting); their
agreement is the main correctness oracle of the whole pipeline.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .graph import CONV_KINDS, Graph
from .lowering import (
    ThresholdUnit,
    align_residual_scales,
    bits_for_range,
    fold_batchnorm,
    multithreshold_eval,
    output_scale,
    quantizer_affine,
)
from .qtensor import QuantTensor, dequantize, quant_range, quantize_with_scale, round_half_even

__all__ = [
    "EngineError",
    "AccumulatorOverflowError",
    "TraceEntry",
    "ExecutionTrace",
    "ComparisonReport",
    "fnv1a64",
    "tensor_checksum",
    "run_float",
    "run_reference",
    "run_int",
    "quantize_input",
    "compare_engines",
]


class EngineError(ValueError):
    pass


class AccumulatorOverflowError(EngineError):
    """A matvec accumulator left its declared reachable range."""


# -- checksums -----------------------------------------------------------------

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_FNV_MASK = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: bytes) -> int:
    """FNV-1a 64-bit. Sequential by definition; fine for test-sized tensors."""
    h = _FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * _FNV_PRIME) & _FNV_MASK
    return h


def tensor_checksum(arr: np.ndarray) -> str:
    """Hex FNV-1a 64 over the little-endian int32 payload."""
    info = np.iinfo(np.int32)
    if arr.size and (arr.min() < info.min or arr.max() > info.max):
        raise EngineError("tensor does not fit the int32 payload format")
    return f"{fnv1a64(np.ascontiguousarray(arr, dtype='<i4').tobytes()):016x}"


@dataclass
class TraceEntry:
    node_id: str
    kind: str
    shape: tuple[int, ...]
    checksum: str | None
    walltime_s: float


@dataclass
class ExecutionTrace:
    engine: str
    entries: list[TraceEntry] = field(default_factory=list)
    outputs: dict[str, np.ndarray] | None = None
    int_outputs: dict[str, np.ndarray] | None = None

    def entry(self, node_id: str) -> TraceEntry:
        for e in self.entries:
            if e.node_id == node_id:
                return e
        raise KeyError(node_id)

    def to_dict(self) -> dict[str, Any]:
        return {
            "engine": self.engine,
            "nodes": [
                {
                    "id": e.node_id,
                    "kind": e.kind,
                    "shape": list(e.shape),
                    "checksum": e.checksum,
                    "walltime_s": e.walltime_s,
                }
                for e in self.entries
            ],
        }


# -- shared kernels --------------------------------------------------------------


def _direct_conv(x: np.ndarray, w: np.ndarray, stride: int, padding: int, depthwise: bool) -> np.ndarray:
    """Direct convolution by kernel-tap shifts; dtype follows the inputs."""
    k = w.shape[-1]
    h_out = (x.shape[1] + 2 * padding - k) // stride + 1
    w_out = (x.shape[2] + 2 * padding - k) // stride + 1
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    out_ch = w.shape[0]
    acc = np.zeros((out_ch, h_out, w_out), dtype=np.result_type(x, w))
    for ky in range(k):
        for kx in range(k):
            xs = xp[:, ky : ky + (h_out - 1) * stride + 1 : stride, kx : kx + (w_out - 1) * stride + 1 : stride]
            if depthwise:
                acc += w[:, ky, kx][:, None, None] * xs
            else:
                acc += np.einsum("oi,ihw->ohw", w[:, :, ky, kx], xs)
    return acc


def _im2col(x: np.ndarray, kernel: int, stride: int, padding: int) -> np.ndarray:
    """Patch matrix [pixels, in_ch * k * k], channel-major then ky, kx."""
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xp, (kernel, kernel), axis=(1, 2))[:, ::stride, ::stride]
    c, h_out, w_out = win.shape[0], win.shape[1], win.shape[2]
    return np.ascontiguousarray(win.transpose(1, 2, 0, 3, 4)).reshape(h_out * w_out, c * kernel * kernel)


def _bn_eval(g: Graph, node, z: np.ndarray) -> np.ndarray:
    a = g.tensors[node.attrs["gamma_ref"]] / np.sqrt(g.tensors[node.attrs["var_ref"]] + node.attrs["eps"])
    b = g.tensors[node.attrs["beta_ref"]] - g.tensors[node.attrs["mean_ref"]] * a
    return a[:, None, None] * z + b[:, None, None]


def _check_input(g: Graph, x: np.ndarray) -> None:
    n = g.input_node
    expect = (int(n.attrs["in_ch"]),) + tuple(n.attrs["in_hw"])
    if tuple(x.shape) != expect:
        raise EngineError(f"input shape {x.shape} != expected {expect}")


# -- executors -------------------------------------------------------------------


def run_float(g: Graph, x: np.ndarray) -> tuple[np.ndarray, ExecutionTrace]:
    """Float64 forward pass of a float-stage graph (quantizers act as ReLU/id)."""
    if g.stage != "float":
        raise EngineError(f"run_float expects a float graph, got {g.stage}")
    x = np.asarray(x, dtype=np.float64)
    _check_input(g, x)
    trace = ExecutionTrace(engine="float", outputs={})
    vals: dict[str, np.ndarray] = {}
    for n in g.nodes:
        t0 = time.perf_counter()
        if n.kind == "input":
            v = x
        elif n.kind in CONV_KINDS:
            v = _direct_conv(
                vals[n.inputs[0]],
                g.tensors[n.weight_ref],
                n.attrs["stride"],
                n.attrs["padding"],
                n.kind == "depthwise_conv2d",
            )
        elif n.kind == "batch_norm":
            v = _bn_eval(g, n, vals[n.inputs[0]])
        elif n.kind == "activation_quant":
            v = vals[n.inputs[0]] if n.attrs["signed"] else np.maximum(vals[n.inputs[0]], 0.0)
        elif n.kind == "residual_add":
            v = vals[n.inputs[0]] + vals[n.inputs[1]]
        elif n.kind == "output":
            v = vals[n.inputs[0]]
        else:
            raise EngineError(f"run_float cannot execute {n.kind}")
        vals[n.id] = v
        trace.entries.append(TraceEntry(n.id, n.kind, tuple(v.shape), None, time.perf_counter() - t0))
        trace.outputs[n.id] = v
    return vals[g.output_node.id], trace


def run_reference(g: Graph, x: np.ndarray) -> tuple[np.ndarray, ExecutionTrace]:
    """Fake-quant oracle on a quantized-stage graph.

    Every tensor between layers is an exact integer grid point (payload *
    scale). Convs accumulate those integers exactly; quantizers round the
    affine of the accumulator. Where the exact integer view is unavailable
    (an explicit batch_norm node, or a residual add over unaligned scales)
    the engine falls back to plain float64, which is the approximate oracle
    used by the folding/alignment tolerance checks.
    """
    if g.stage != "quantized":
        raise EngineError(f"run_reference expects a quantized graph, got {g.stage}")
    x = np.asarray(x, dtype=np.float64)
    _check_input(g, x)
    trace = ExecutionTrace(engine="reference", outputs={}, int_outputs={})
    floats: dict[str, np.ndarray] = {}
    ints: dict[str, np.ndarray | None] = {}
    accs: dict[str, np.ndarray] = {}
    for n in g.nodes:
        t0 = time.perf_counter()
        q: np.ndarray | None = None
        if n.kind == "input":
            scale = float(n.attrs["scale"])
            q = quantize_with_scale(x, scale, int(n.attrs["bit_width"]), bool(n.attrs["signed"]))
            v = q * scale
        elif n.kind in CONV_KINDS:
            src = n.inputs[0]
            w: QuantTensor = g.tensors[n.weight_ref]
            depthwise = n.kind == "depthwise_conv2d"
            if ints.get(src) is not None:
                acc = _direct_conv(ints[src], w.data, n.attrs["stride"], n.attrs["padding"], depthwise)
                s_z = w.scales * output_scale(g, src)
                accs[n.id] = acc
                v = acc * s_z[:, None, None]
            else:
                v = _direct_conv(floats[src], dequantize(w), n.attrs["stride"], n.attrs["padding"], depthwise)
        elif n.kind == "batch_norm":
            v = _bn_eval(g, n, floats[n.inputs[0]])
        elif n.kind == "activation_quant":
            src = n.inputs[0]
            bits, signed = int(n.attrs["bit_width"]), bool(n.attrs["signed"])
            scale = float(n.attrs["scale"])
            if "bn_a_ref" in n.attrs and src in accs:
                aff = quantizer_affine(g, n)
                lo, hi = quant_range(bits, signed)
                level = aff.a[:, None, None] * accs[src] + aff.b[:, None, None]
                q = np.clip(round_half_even(level), lo, hi).astype(np.int64)
            elif "bn_a_ref" in n.attrs:
                bn_a = g.tensors[n.attrs["bn_a_ref"]]
                bn_b = g.tensors[n.attrs["bn_b_ref"]]
                z = bn_a[:, None, None] * floats[src] + bn_b[:, None, None]
                q = quantize_with_scale(z, scale, bits, signed)
            else:
                q = quantize_with_scale(floats[src], scale, bits, signed)
            v = q * scale
        elif n.kind == "residual_add":
            a, b = n.inputs
            if (
                ints.get(a) is not None
                and ints.get(b) is not None
                and output_scale(g, a) == output_scale(g, b)
            ):
                q = ints[a] + ints[b]
                v = q * output_scale(g, a)
            else:
                v = floats[a] + floats[b]
        elif n.kind == "output":
            v = floats[n.inputs[0]]
            q = ints.get(n.inputs[0])
        else:
            raise EngineError(f"run_reference cannot execute {n.kind}")
        floats[n.id] = v
        ints[n.id] = q
        trace.entries.append(TraceEntry(n.id, n.kind, tuple(v.shape), None, time.perf_counter() - t0))
        trace.outputs[n.id] = v
        if q is not None:
            trace.int_outputs[n.id] = q
    return floats[g.output_node.id], trace


def quantize_input(g: Graph, x: np.ndarray) -> QuantTensor:
    """Quantize a float image with the graph's input quantizer."""
    n = g.input_node
    scale = float(n.attrs["scale"])
    q = quantize_with_scale(np.asarray(x, dtype=np.float64), scale, int(n.attrs["bit_width"]), bool(n.attrs["signed"]))
    return QuantTensor(q, np.float64(scale), int(n.attrs["bit_width"]), bool(n.attrs["signed"]), channel_axis=None)


def run_int(
    g: Graph,
    x: QuantTensor,
    keep_tensors: bool = False,
    with_checksums: bool = True,
) -> tuple[QuantTensor, ExecutionTrace]:
    """Integer-only forward pass of a lowered graph.

    Accumulates in int64, checks every matvec against its declared reachable
    bound, and records an FNV-1a checksum per node output. Repeated runs on
    the same inputs are byte-identical.
    """
    if g.stage != "lowered":
        raise EngineError(f"run_int expects a lowered graph, got {g.stage}")
    inode = g.input_node
    if x.bit_width != int(inode.attrs["bit_width"]) or x.signed != bool(inode.attrs["signed"]):
        raise EngineError("input tensor width/signedness does not match the graph input")
    _check_input(g, x.data)
    lo_in, hi_in = int(inode.attrs["out_lo"]), int(inode.attrs["out_hi"])
    if x.data.size and (x.data.min() < lo_in or x.data.max() > hi_in):
        raise EngineError(f"input payload outside [{lo_in}, {hi_in}]")
    trace = ExecutionTrace(engine="int", outputs={} if keep_tensors else None)
    vals: dict[str, np.ndarray] = {}
    for n in g.nodes:
        t0 = time.perf_counter()
        if n.kind == "input":
            v = x.data
        elif n.kind == "im2col":
            v = _im2col(vals[n.inputs[0]], n.attrs["kernel"], n.attrs["stride"], n.attrs["padding"])
        elif n.kind == "matvec":
            patches = vals[n.inputs[0]]
            w: QuantTensor = g.tensors[n.weight_ref]
            h_out, w_out = n.out_hw()
            if n.attrs["depthwise"]:
                k2 = int(n.attrs["fold_in"])
                per_ch = patches.reshape(patches.shape[0], -1, k2)
                acc = np.einsum("pck,ck->cp", per_ch, w.data).reshape(-1, h_out, w_out)
            else:
                acc = (patches @ w.data.T).T.reshape(-1, h_out, w_out)
            bound = int(n.attrs["acc_bound"])
            if acc.size and max(-int(acc.min()), int(acc.max())) > bound:
                raise AccumulatorOverflowError(f"{n.id}: |acc| exceeds declared bound {bound}")
            v = acc
        elif n.kind == "multithreshold":
            unit = ThresholdUnit(
                g.tensors[n.weight_ref],
                int(n.attrs["offset"]),
                int(n.attrs["bit_width"]),
                bool(n.attrs["signed"]),
                float(n.attrs["scale"]),
            )
            v = multithreshold_eval(vals[n.inputs[0]], unit)
        elif n.kind == "residual_add":
            v = vals[n.inputs[0]] + vals[n.inputs[1]]
        elif n.kind == "output":
            v = vals[n.inputs[0]]
        else:
            raise EngineError(f"run_int cannot execute {n.kind}")
        lo, hi = int(n.attrs["out_lo"]), int(n.attrs["out_hi"])
        if n.kind not in ("im2col",) and v.size and (v.min() < lo or v.max() > hi):
            raise EngineError(f"{n.id}: values left declared range [{lo}, {hi}]")
        vals[n.id] = v
        checksum = tensor_checksum(v) if with_checksums else None
        trace.entries.append(TraceEntry(n.id, n.kind, tuple(v.shape), checksum, time.perf_counter() - t0))
        if keep_tensors:
            trace.outputs[n.id] = v
    onode = g.output_node
    out_lo, out_hi = int(onode.attrs["out_lo"]), int(onode.attrs["out_hi"])
    out = QuantTensor(
        vals[onode.id],
        np.float64(onode.attrs["scale"]),
        bits_for_range(out_lo, out_hi),
        signed=out_lo < 0,
        channel_axis=None,
    )
    return out, trace


# -- cross-engine comparison -------------------------------------------------------


@dataclass
class NodeComparison:
    node_id: str
    n_elements: int
    mse: float
    max_abs_diff: int


@dataclass
class ComparisonReport:
    nodes: list[NodeComparison]
    max_mse: float
    bit_exact: bool
    n_compared: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "bit_exact": self.bit_exact,
            "max_mse": self.max_mse,
            "n_compared": self.n_compared,
            "nodes": [
                {"id": c.node_id, "elements": c.n_elements, "mse": c.mse, "max_abs_diff": c.max_abs_diff}
                for c in self.nodes
            ],
        }


def compare_engines(g_ref: Graph, g_low: Graph, x: np.ndarray) -> ComparisonReport:
    """Run both engines on one image and compare integer payloads node by node.

    The quantized graph is aligned and batch-norm-folded first (both passes
    are idempotent) so the reference evaluates the canonical affine, the only
    form the integer engine can reproduce exactly. Comparable nodes are the
    ones with an integer identity in both graphs: input, quantizers
    (activation_quant vs. the multithreshold that replaced it, same id),
    residual adds, and output. MSE must be exactly 0 for the lowering to be
    considered correct.
    """
    g_ref = fold_batchnorm(align_residual_scales(g_ref))
    _, ref_trace = run_reference(g_ref, x)
    out, int_trace = run_int(g_low, quantize_input(g_ref, x), keep_tensors=True)
    comparisons: list[NodeComparison] = []
    for n in g_low.nodes:
        ref_q = ref_trace.int_outputs.get(n.id)
        if ref_q is None or n.id not in int_trace.outputs:
            continue
        got = int_trace.outputs[n.id]
        if ref_q.shape != got.shape:
            raise EngineError(f"{n.id}: shape mismatch {ref_q.shape} vs {got.shape}")
        diff = got - ref_q
        comparisons.append(
            NodeComparison(
                node_id=n.id,
                n_elements=int(diff.size),
                mse=float(np.mean(diff.astype(np.float64) ** 2)) if diff.size else 0.0,
                max_abs_diff=int(np.abs(diff).max()) if diff.size else 0,
            )
        )
    if not comparisons:
        raise EngineError("no comparable nodes between the two graphs")
    max_mse = max(c.mse for c in comparisons)
    return ComparisonReport(comparisons, max_mse, max_mse == 0.0, len(comparisons))
