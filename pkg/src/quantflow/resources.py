"""FPGA resource and energy estimates for a folded streaming graph.

The model is deliberately coarse: compute LUTs scale with lane count and
operand widths, flip-flops track LUTs by a fixed pipelining ratio, memories
pack into 18 Kb block-RAM units by total bit count, and a multiply earns a
DSP once its operand-width product crosses a threshold. Shallow FIFOs stay
in shift-register LUTs. Absolute numbers are only as good as the fitted
coefficients; relative comparisons between folds are the intended use.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

from .lowering import bits_for_range

if TYPE_CHECKING:
    from .folding import FoldingPlan
    from .graph import Graph

__all__ = [
    "CostModelConfig",
    "ResourceBudget",
    "ResourceReport",
    "EnergyReport",
    "matvec_luts",
    "threshold_luts",
    "fifo_resources",
    "stream_width_bits",
    "estimate_resources",
    "energy_metrics",
]


@dataclass(frozen=True)
class CostModelConfig:
    """Fitted coefficients of the cost model.

    lut_per_mac        LUTs per PE*SIMD lane pair, per weight-bit * act-bit
    lut_per_threshold  LUTs per PE comparator, per threshold * accumulator bit
    ff_per_lut         pipeline flip-flops per compute LUT
    dsp_bit_product    weight_bits * act_bits at or above which a lane uses a DSP
    srl_max_depth      deepest FIFO still built from shift-register LUTs
    srl_max_bits       largest FIFO (depth * width) still built from SRLs
    bram_width/depth   geometry of one block-RAM unit (18 Kb: 18 x 1024)
    """

    lut_per_mac: float = 1.1
    lut_per_threshold: float = 2.2
    ff_per_lut: float = 1.0
    dsp_bit_product: int = 17
    srl_max_depth: int = 32
    srl_max_bits: int = 2048
    bram_width: int = 18
    bram_depth: int = 1024

    @property
    def bram_bits(self) -> int:
        return self.bram_width * self.bram_depth


@dataclass(frozen=True)
class ResourceBudget:
    """A ZCU104-class midrange part (block RAM counted in 18 Kb units)."""

    luts: int = 230400
    ffs: int = 460800
    brams: int = 624
    dsps: int = 1728

    def utilization(self, report: "ResourceReport") -> dict[str, float]:
        return {
            "luts": report.luts / self.luts,
            "ffs": report.ffs / self.ffs,
            "brams": report.brams / self.brams,
            "dsps": report.dsps / self.dsps,
        }


@dataclass
class ResourceReport:
    luts: int = 0
    ffs: int = 0
    brams: int = 0
    dsps: int = 0
    per_node: dict[str, dict[str, int]] = field(default_factory=dict)

    def add(self, node_id: str, luts: int = 0, ffs: int = 0, brams: int = 0, dsps: int = 0) -> None:
        entry = self.per_node.setdefault(node_id, {"luts": 0, "ffs": 0, "brams": 0, "dsps": 0})
        entry["luts"] += luts
        entry["ffs"] += ffs
        entry["brams"] += brams
        entry["dsps"] += dsps
        self.luts += luts
        self.ffs += ffs
        self.brams += brams
        self.dsps += dsps

    def fits(self, budget: ResourceBudget) -> bool:
        return (
            self.luts <= budget.luts
            and self.ffs <= budget.ffs
            and self.brams <= budget.brams
            and self.dsps <= budget.dsps
        )

    def to_dict(self) -> dict:
        return {
            "luts": self.luts,
            "ffs": self.ffs,
            "brams": self.brams,
            "dsps": self.dsps,
            "per_node": self.per_node,
        }


def matvec_luts(pe: int, simd: int, weight_bits: int, act_bits: int, cfg: CostModelConfig) -> int:
    """Compute fabric for PE*SIMD multiply lanes at the given operand widths."""
    return math.ceil(cfg.lut_per_mac * pe * simd * weight_bits * act_bits)


def threshold_luts(pe: int, out_bits: int, acc_bits: int, cfg: CostModelConfig) -> int:
    """PE comparator banks, each scanning 2^out_bits - 1 thresholds of acc_bits."""
    return math.ceil(cfg.lut_per_threshold * pe * (2**out_bits - 1) * acc_bits)


def _bram_units(total_bits: int, cfg: CostModelConfig) -> int:
    return math.ceil(total_bits / cfg.bram_bits)


def _ffs_for(luts: int, cfg: CostModelConfig) -> int:
    return math.ceil(cfg.ff_per_lut * luts)


def fifo_resources(width_bits: int, depth: int, cfg: CostModelConfig) -> tuple[int, int]:
    """(luts, brams) for one stream FIFO; small ones live in SRL LUTs."""
    if depth <= cfg.srl_max_depth and depth * width_bits <= cfg.srl_max_bits:
        return width_bits * math.ceil(depth / 32), 0
    return math.ceil(0.1 * width_bits), _bram_units(depth * width_bits, cfg)


def stream_width_bits(g: "Graph", node_id: str) -> int:
    """Bits per stream beat on a node's output edge: lanes * payload bits.

    Lane count is the producer's parallelism-independent token shape: one
    pixel of out_ch values. Payload bits come from the declared edge range.
    """
    n = g.node(node_id)
    bits = bits_for_range(int(n.attrs["out_lo"]), int(n.attrs["out_hi"]))
    return n.out_ch() * bits


def estimate_resources(
    g: "Graph",
    plan: "FoldingPlan",
    fifo_depths: dict[tuple[str, str], int] | None = None,
    cfg: CostModelConfig | None = None,
) -> ResourceReport:
    """Resource estimate of a folded lowered graph, plus its FIFOs if given."""
    from .folding import FoldingError  # one-way import at call time

    cfg = cfg or CostModelConfig()
    if g.stage != "lowered":
        raise FoldingError(f"estimate_resources expects a lowered graph, got {g.stage}", cause="plan")
    plan.validate(g)
    report = ResourceReport()
    for n in g.nodes:
        if n.kind == "matvec":
            pe, simd = plan.folds[n.id]
            feeder = g.producers(n.id)[0]
            in_bits = bits_for_range(int(feeder.attrs["out_lo"]), int(feeder.attrs["out_hi"]))
            w_bits = int(n.attrs["weight_bits"])
            w = g.tensors[n.weight_ref]
            luts = matvec_luts(pe, simd, w_bits, in_bits, cfg)
            dsps = pe * simd if w_bits * in_bits >= cfg.dsp_bit_product else 0
            report.add(
                n.id,
                luts=luts,
                ffs=_ffs_for(luts, cfg),
                brams=_bram_units(int(w.data.size) * w_bits, cfg),
                dsps=dsps,
            )
        elif n.kind == "multithreshold":
            producer = g.producers(n.id)[0]
            pe = plan.pe(producer.id) if producer.kind == "matvec" else 1
            bits = int(n.attrs["bit_width"])
            acc_bits = int(producer.attrs.get("acc_bits", 32))
            # threshold words live in distributed RAM inside the comparator LUTs
            luts = threshold_luts(pe, bits, acc_bits, cfg)
            report.add(n.id, luts=luts, ffs=_ffs_for(luts, cfg))
    if fifo_depths:
        for (src, dst), depth in sorted(fifo_depths.items()):
            luts, brams = fifo_resources(stream_width_bits(g, src), depth, cfg)
            report.add(f"fifo:{src}->{dst}", luts=luts, ffs=_ffs_for(luts, cfg), brams=brams)
    return report


@dataclass(frozen=True)
class EnergyReport:
    fps: float
    power_w: float

    @property
    def fps_per_watt(self) -> float:
        return self.fps / self.power_w


def energy_metrics(fps: float, power_w: float) -> EnergyReport:
    """Frames per second per watt; the efficiency figure used for comparisons."""
    if power_w <= 0 or not math.isfinite(power_w):
        raise ValueError(f"power must be positive and finite, got {power_w}")
    if fps < 0 or not math.isfinite(fps):
        raise ValueError(f"fps must be non-negative and finite, got {fps}")
    return EnergyReport(fps, power_w)
