"""Passes that turn a calibrated fake-quant graph into an integer-only one.

The output graph contains nothing but input, im2col, matvec, multithreshold,
residual_add, and output nodes; every activation function, batch-norm, and
scale product has been absorbed into per-channel integer threshold arrays.

Canonical affine form: a quantizer that follows a (folded) conv evaluates
``clamp(round_half_even(a*acc + b), lo, hi)`` on the integer accumulator,
where ``a = (bn_scale * w_scale * in_scale) / out_scale`` and
``b = bn_bias / out_scale``, each combined in exactly that float64 order.
Threshold derivation binary-searches that same predicate, which is what makes
the integer engine agree with the reference engine bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import CONV_KINDS, Graph, GraphError, LayerNode
from .qtensor import QuantTensor, quant_range, round_half_even

__all__ = [
    "AffineSpec",
    "ThresholdUnit",
    "LoweringError",
    "compute_thresholds",
    "multithreshold_eval",
    "quantizer_affine",
    "fold_batchnorm",
    "align_residual_scales",
    "lower_conv_to_im2col_matvec",
    "streamline_to_integer",
    "output_scale",
    "edge_range",
    "bits_for_range",
]

# accumulators are modeled as 32-bit signed; lowering rejects anything wider
ACC_LIMIT = 2**31 - 1


class LoweringError(ValueError):
    pass


@dataclass(frozen=True)
class AffineSpec:
    """Per-channel ``a*acc + b`` in the output-level domain (scale divided in)."""

    a: np.ndarray
    b: np.ndarray

    def __post_init__(self) -> None:
        a = np.atleast_1d(np.asarray(self.a, dtype=np.float64))
        b = np.atleast_1d(np.asarray(self.b, dtype=np.float64))
        a, b = np.broadcast_arrays(a, b)
        if a.ndim != 1:
            raise LoweringError("affine arrays must be one-dimensional")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise LoweringError("affine parameters must be finite")
        if np.any(a <= 0):
            raise LoweringError("affine multiplier must be strictly positive (sign-fold batch norm first)")
        object.__setattr__(self, "a", np.ascontiguousarray(a))
        object.__setattr__(self, "b", np.ascontiguousarray(b))

    @property
    def channels(self) -> int:
        return self.a.shape[0]


@dataclass(frozen=True)
class ThresholdUnit:
    """Integer thresholds equivalent to quantizing an affine of the accumulator.

    thresholds  int64 [channels, 2^bit_width - 1], non-decreasing per channel
    offset      output = clamp(offset + count(acc >= T_k), lo, hi)
    """

    thresholds: np.ndarray
    offset: int
    bit_width: int
    signed: bool
    out_scale: float = 1.0

    def __post_init__(self) -> None:
        t = np.ascontiguousarray(self.thresholds, dtype=np.int64)
        if t.ndim != 2 or t.shape[1] != 2**self.bit_width - 1:
            raise LoweringError(f"thresholds must be [C, 2^{self.bit_width}-1], got {t.shape}")
        if np.any(np.diff(t, axis=1) < 0):
            raise LoweringError("thresholds must be non-decreasing per channel")
        object.__setattr__(self, "thresholds", t)
        t.setflags(write=False)

    @property
    def out_range(self) -> tuple[int, int]:
        return quant_range(self.bit_width, self.signed)


def compute_thresholds(
    aff: AffineSpec,
    acc_range: tuple[int, int],
    out_bits: int,
    out_signed: bool,
    out_scale: float = 1.0,
) -> ThresholdUnit:
    """Derive integer thresholds reproducing clamp(round_half_even(a*acc+b)).

    For each output level, binary search finds the smallest accumulator in
    acc_range that reaches it; the predicate is monotone because a > 0.
    Levels never reached map to acc_hi + 1. Adjacent thresholds tie when a
    step of one accumulator unit crosses several levels (a > 1), so the
    arrays are non-decreasing rather than strictly ascending.
    """
    acc_lo, acc_hi = int(acc_range[0]), int(acc_range[1])
    if acc_lo > acc_hi:
        raise LoweringError(f"empty accumulator range [{acc_lo}, {acc_hi}]")
    if out_bits == 1 and out_signed:
        raise LoweringError("signed binary output skips zero; offset+count units only express contiguous codes")
    out_lo, out_hi = quant_range(out_bits, out_signed)
    n_thresholds = 2**out_bits - 1
    offset = out_hi - n_thresholds
    a = aff.a[:, None]
    b = aff.b[:, None]
    levels = (offset + 1 + np.arange(n_thresholds, dtype=np.int64))[None, :]
    lo = np.full((aff.channels, n_thresholds), acc_lo, dtype=np.int64)
    hi = np.full_like(lo, acc_hi + 1)  # acc_hi + 1 == "never crossed in range"
    while np.any(searching := lo < hi):
        mid = (lo + hi) >> 1  # arithmetic shift floors correctly for negatives
        reached = round_half_even(a * mid + b) >= levels
        hi = np.where(searching & reached, mid, hi)
        lo = np.where(searching & ~reached, mid + 1, lo)
    return ThresholdUnit(lo, offset, out_bits, out_signed, out_scale)


def multithreshold_eval(acc: np.ndarray, unit: ThresholdUnit) -> np.ndarray:
    """Evaluate a threshold unit on integer accumulators, channel-first layout.

    Each element is located among its channel's thresholds by binary search
    (np.searchsorted); output = clamp(offset + count, output range).
    """
    acc = np.asarray(acc)
    if acc.dtype.kind != "i":
        raise LoweringError("multithreshold_eval expects integer accumulators")
    channels = unit.thresholds.shape[0]
    if acc.shape[0] != channels:
        raise LoweringError(f"accumulator has {acc.shape[0]} channels, unit has {channels}")
    lo, hi = unit.out_range
    flat = acc.reshape(channels, -1)
    counts = np.empty_like(flat)
    for c in range(channels):
        counts[c] = np.searchsorted(unit.thresholds[c], flat[c], side="right")
    return np.clip(unit.offset + counts, lo, hi).reshape(acc.shape).astype(np.int64)


# -- scale and range bookkeeping ----------------------------------------------


def output_scale(g: Graph, node_id: str) -> float:
    """Quantization scale on a node's output edge."""
    n = g.node(node_id)
    if n.kind in ("input", "activation_quant", "multithreshold"):
        scale = n.attrs.get("scale")
        if scale is None:
            raise LoweringError(f"{node_id}: no calibrated scale")
        return float(scale)
    if n.kind == "residual_add":
        return output_scale(g, n.inputs[0])  # producers share one scale by then
    if n.kind in ("output", "im2col"):  # both pass values through unchanged
        return output_scale(g, n.inputs[0])
    raise LoweringError(f"{node_id}: {n.kind} output is not in a quantized domain")


def edge_range(g: Graph, node_id: str) -> tuple[int, int]:
    """Inclusive integer range of values on a node's output edge."""
    n = g.node(node_id)
    if "out_lo" in n.attrs:
        return int(n.attrs["out_lo"]), int(n.attrs["out_hi"])
    if n.kind == "input":
        return quant_range(int(n.attrs["bit_width"]), bool(n.attrs["signed"]))
    if n.kind in ("activation_quant", "multithreshold"):
        return quant_range(int(n.attrs["bit_width"]), bool(n.attrs["signed"]))
    if n.kind == "residual_add":
        lo0, hi0 = edge_range(g, n.inputs[0])
        lo1, hi1 = edge_range(g, n.inputs[1])
        return lo0 + lo1, hi0 + hi1
    raise LoweringError(f"{node_id}: {n.kind} has no integer range")


def bits_for_range(lo: int, hi: int) -> int:
    """Smallest width holding [lo, hi]: unsigned when lo >= 0, else narrow signed."""
    if lo >= 0:
        return max(1, int(hi).bit_length())
    return max(-int(lo), int(hi)).bit_length() + 1


def _matvec_acc_range(w: np.ndarray, in_lo: int, in_hi: int) -> tuple[int, int]:
    """Interval bound of acc = W @ x over x in [in_lo, in_hi] (0 included via padding)."""
    wpos = np.where(w > 0, w, 0).sum(axis=-1)
    wneg = np.where(w < 0, w, 0).sum(axis=-1)
    hi = wpos * in_hi + wneg * in_lo
    lo = wpos * in_lo + wneg * in_hi
    return int(lo.min()), int(hi.max())


# -- graph passes --------------------------------------------------------------


def _bn_affine(g: Graph, bn: LayerNode) -> tuple[np.ndarray, np.ndarray]:
    gamma = np.asarray(g.tensors[bn.attrs["gamma_ref"]], dtype=np.float64)
    beta = np.asarray(g.tensors[bn.attrs["beta_ref"]], dtype=np.float64)
    mean = np.asarray(g.tensors[bn.attrs["mean_ref"]], dtype=np.float64)
    var = np.asarray(g.tensors[bn.attrs["var_ref"]], dtype=np.float64)
    a = gamma / np.sqrt(var + bn.attrs["eps"])
    b = beta - mean * a
    return a, b


def fold_batchnorm(g: Graph) -> Graph:
    """Absorb batch-norm into the affine of the following quantizer.

    Channels with negative bn scale get their conv weights negated instead,
    keeping every affine multiplier positive (threshold derivation needs a
    monotone predicate). Quantizers directly after a conv get the identity
    affine, so every conv-fed quantizer carries bn_a/bn_b afterwards. The
    stored affine excludes the weight/input/output scales; those are folded
    in at evaluation time from the current graph state, which keeps this
    pass idempotent and order-independent with respect to scale alignment.
    """
    if g.stage != "quantized":
        raise LoweringError(f"fold_batchnorm expects a quantized graph, got {g.stage}")
    g = g.copy()
    for bn in [n for n in g.nodes if n.kind == "batch_norm"]:
        conv = g.producers(bn.id)[0]
        if conv.kind not in CONV_KINDS:
            raise LoweringError(f"{bn.id}: batch_norm must follow a conv, not {conv.kind}")
        consumers = g.consumers(bn.id)
        if len(consumers) != 1 or consumers[0].kind != "activation_quant":
            raise LoweringError(f"{bn.id}: batch_norm must feed exactly one activation quantizer")
        a_bn, b_bn = _bn_affine(g, bn)
        if np.any(a_bn == 0):
            raise LoweringError(f"{bn.id}: zero batch-norm scale cannot be folded")
        flip = a_bn < 0
        if np.any(flip):
            w: QuantTensor = g.tensors[conv.weight_ref]
            data = w.data.copy()
            data[flip] = -data[flip]
            g.tensors[conv.weight_ref] = QuantTensor(
                data, w.scales, w.bit_width, w.signed, w.channel_axis, w.zero_channels
            )
            a_bn = np.abs(a_bn)
        act = consumers[0]
        act.inputs = [conv.id]
        g.tensors[f"{act.id}_bn_a"] = np.ascontiguousarray(a_bn)
        g.tensors[f"{act.id}_bn_b"] = np.ascontiguousarray(b_bn)
        act.attrs["bn_a_ref"] = f"{act.id}_bn_a"
        act.attrs["bn_b_ref"] = f"{act.id}_bn_b"
        g.nodes.remove(bn)
    g = Graph(g.stage, g.nodes, g.tensors, g.input_resolution)
    for act in [n for n in g.nodes if n.kind == "activation_quant"]:
        producer = g.producers(act.id)[0]
        if producer.kind not in CONV_KINDS and producer.kind != "matvec":
            raise LoweringError(f"{act.id}: quantizer must follow a conv, got {producer.kind}")
        if "bn_a_ref" not in act.attrs:
            ch = producer.out_ch()
            g.tensors[f"{act.id}_bn_a"] = np.ones(ch, dtype=np.float64)
            g.tensors[f"{act.id}_bn_b"] = np.zeros(ch, dtype=np.float64)
            act.attrs["bn_a_ref"] = f"{act.id}_bn_a"
            act.attrs["bn_b_ref"] = f"{act.id}_bn_b"
    g.validate()
    return g


def quantizer_affine(g: Graph, act: LayerNode) -> AffineSpec:
    """Assemble the canonical output-level affine for a conv-fed quantizer.

    The exact float64 chain is pinned: s_z = w_scale * in_scale, then
    a = (bn_a * s_z) / out_scale and b = bn_b / out_scale. The reference
    engine evaluates the identical chain, so thresholds derived from this
    spec match it bit for bit.
    """
    producer = g.producers(act.id)[0]
    w: QuantTensor = g.tensors[producer.weight_ref]
    s_in = output_scale(g, producer.inputs[0])
    s_out = float(act.attrs["scale"])
    bn_a = np.asarray(g.tensors[act.attrs["bn_a_ref"]], dtype=np.float64)
    bn_b = np.asarray(g.tensors[act.attrs["bn_b_ref"]], dtype=np.float64)
    s_z = w.scales * s_in
    return AffineSpec((bn_a * s_z) / s_out, bn_b / s_out)


def _scale_sources(g: Graph, node_id: str, out: set[str]) -> None:
    """Collect the quantizer nodes that define node_id's output scale."""
    n = g.node(node_id)
    if n.kind in ("activation_quant", "multithreshold"):
        out.add(n.id)
    elif n.kind == "residual_add":
        for src in n.inputs:
            _scale_sources(g, src, out)
    else:
        raise LoweringError(f"residual producer {n.id} ({n.kind}) has no output quantizer")


def align_residual_scales(g: Graph) -> Graph:
    """Give both producers of every residual add one shared scale (their max).

    Residual chains unify transitively. Changing a quantizer's scale moves
    its outputs by at most one step of the shared scale. Already-lowered
    threshold units cannot be re-scaled; they only pass the check when the
    graph is aligned already (which makes this pass idempotent).
    """
    if g.stage not in ("quantized", "lowered"):
        raise LoweringError(f"align_residual_scales expects quantized or lowered, got {g.stage}")
    g = g.copy()
    groups: list[set[str]] = []
    for add in [n for n in g.nodes if n.kind == "residual_add"]:
        sources: set[str] = set()
        for src in add.inputs:
            _scale_sources(g, src, sources)
        merged = sources
        for grp in groups[:]:
            if grp & merged:
                merged |= grp
                groups.remove(grp)
        groups.append(merged)
    for grp in groups:
        members = [g.node(i) for i in sorted(grp)]
        scales = [m.attrs.get("scale") for m in members]
        if any(s is None for s in scales):
            raise LoweringError("residual producer has no calibrated scale")
        shared = max(float(s) for s in scales)
        for m in members:
            if float(m.attrs["scale"]) != shared:
                if m.kind == "multithreshold":
                    raise LoweringError(f"{m.id}: lowered thresholds cannot be re-aligned to {shared}")
                m.attrs["scale"] = shared
    return g


def _lower_one_conv(g: Graph, conv: LayerNode, in_lo: int, in_hi: int) -> tuple[LayerNode, LayerNode]:
    a = conv.attrs
    k, in_ch = int(a["kernel"]), int(a["in_ch"])
    depthwise = conv.kind == "depthwise_conv2d"
    fold_in = k * k if depthwise else in_ch * k * k
    w: QuantTensor = g.tensors[conv.weight_ref]
    wmat = w.data.reshape(w.data.shape[0], -1)  # [out_ch, fold_in], in_ch-major then ky,kx
    im2col = LayerNode(
        f"{conv.id}_im2col",
        "im2col",
        list(conv.inputs),
        dict(
            kernel=k,
            stride=int(a["stride"]),
            padding=int(a["padding"]),
            depthwise=depthwise,
            fold_in=fold_in,
            in_ch=in_ch,
            out_ch=in_ch * k * k,
            in_hw=tuple(a["in_hw"]),
            out_hw=tuple(a["out_hw"]),
            out_lo=in_lo,
            out_hi=in_hi,
        ),
    )
    acc_lo, acc_hi = _matvec_acc_range(wmat, in_lo, in_hi)
    if max(abs(acc_lo), abs(acc_hi)) > ACC_LIMIT:
        raise LoweringError(f"{conv.id}: accumulator range [{acc_lo}, {acc_hi}] exceeds 32-bit")
    g.tensors[f"{conv.id}_wmat"] = QuantTensor(
        wmat, w.scales, w.bit_width, w.signed, channel_axis=0, zero_channels=w.zero_channels
    )
    matvec = LayerNode(
        conv.id,  # keeps folding-plan and bit-plan keys stable across lowering
        "matvec",
        [im2col.id],
        dict(
            depthwise=depthwise,
            fold_in=fold_in,
            in_ch=fold_in,
            out_ch=int(a["out_ch"]),
            in_hw=tuple(a["out_hw"]),
            out_hw=tuple(a["out_hw"]),
            out_lo=acc_lo,
            out_hi=acc_hi,
            acc_bound=max(abs(acc_lo), abs(acc_hi)),
            acc_bits=bits_for_range(acc_lo, acc_hi),
            weight_bits=w.bit_width,
        ),
        weight_ref=f"{conv.id}_wmat",
    )
    return im2col, matvec


def lower_conv_to_im2col_matvec(g: Graph) -> Graph:
    """Replace every conv with an im2col + matvec pair (ids stay on the matvec).

    The im2col node pads with integer zero; the matvec accumulates in the
    widest interval reachable from its input range, which lowering verifies
    fits the modeled 32-bit accumulator.
    """
    if g.stage != "quantized":
        raise LoweringError(f"lower_conv expects a quantized graph, got {g.stage}")
    g = g.copy()
    new_nodes: list[LayerNode] = []
    for n in g.nodes:
        if n.kind in CONV_KINDS:
            in_lo, in_hi = edge_range(g, n.inputs[0])
            im2col, matvec = _lower_one_conv(g, n, in_lo, in_hi)
            new_nodes += [im2col, matvec]
        else:
            new_nodes.append(n)
    return Graph(g.stage, new_nodes, g.tensors, g.input_resolution)


def streamline_to_integer(g: Graph) -> Graph:
    """Run the whole lowering pipeline; idempotent on already-lowered graphs.

    Order: align residual scales, fold batch norm, lower convs, then derive
    one threshold unit per quantizer. Afterwards only integer node kinds
    remain and every edge carries an explicit integer range.
    """
    if g.stage == "lowered":
        g.validate()
        return g.copy()
    g = align_residual_scales(g)
    g = fold_batchnorm(g)
    g = lower_conv_to_im2col_matvec(g)
    nodes: list[LayerNode] = []
    for n in g.nodes:
        if n.kind == "activation_quant":
            matvec = g.producers(n.id)[0]
            if matvec.kind != "matvec":
                raise LoweringError(f"{n.id}: quantizer does not follow a matvec after lowering")
            bits, signed = int(n.attrs["bit_width"]), bool(n.attrs["signed"])
            s_out = float(n.attrs["scale"])
            aff = quantizer_affine(g, n)
            g.tensors.pop(n.attrs["bn_a_ref"])
            g.tensors.pop(n.attrs["bn_b_ref"])
            acc_lo, acc_hi = int(matvec.attrs["out_lo"]), int(matvec.attrs["out_hi"])
            unit = compute_thresholds(aff, (acc_lo, acc_hi), bits, signed, s_out)
            out_lo, out_hi = unit.out_range
            g.tensors[f"{n.id}_thr"] = unit.thresholds
            nodes.append(
                LayerNode(
                    n.id,
                    "multithreshold",
                    list(n.inputs),
                    dict(
                        offset=unit.offset,
                        bit_width=bits,
                        signed=signed,
                        scale=s_out,
                        in_ch=matvec.out_ch(),
                        out_ch=matvec.out_ch(),
                        in_hw=tuple(n.attrs["in_hw"]),
                        out_hw=tuple(n.attrs["out_hw"]),
                        out_lo=out_lo,
                        out_hi=out_hi,
                    ),
                    weight_ref=f"{n.id}_thr",
                )
            )
        elif n.kind == "residual_add":
            s0 = output_scale(g, n.inputs[0])
            s1 = output_scale(g, n.inputs[1])
            if s0 != s1:
                raise LoweringError(f"{n.id}: residual scales {s0} != {s1}; align first")
            lo0, hi0 = edge_range(g, n.inputs[0])
            lo1, hi1 = edge_range(g, n.inputs[1])
            n.attrs.update(scale=s0, out_lo=lo0 + lo1, out_hi=hi0 + hi1)
            nodes.append(n)
        elif n.kind == "input":
            lo, hi = quant_range(int(n.attrs["bit_width"]), bool(n.attrs["signed"]))
            n.attrs.update(out_lo=lo, out_hi=hi)
            nodes.append(n)
        elif n.kind == "output":
            src = n.inputs[0]
            lo, hi = edge_range(g, src)
            n.attrs.update(out_lo=lo, out_hi=hi, scale=output_scale(g, src))
            nodes.append(n)
        elif n.kind in ("im2col", "matvec"):
            nodes.append(n)
        else:
            raise LoweringError(f"cannot streamline {n.id} of kind {n.kind}")
    out = Graph("lowered", nodes, g.tensors, g.input_resolution)
    out.validate()
    return out
