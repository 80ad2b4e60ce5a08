"""Folding: how many hardware lanes each streaming node gets.

A matvec with PE output lanes and SIMD input lanes needs
(fold_in / SIMD) * (out_ch / PE) cycles per output pixel. Its im2col feeder
runs at fold_in / SIMD cycles per pixel and its threshold unit at
out_ch / PE, so one (PE, SIMD) choice per matvec fixes the whole trio, and
every other node kind streams one pixel per cycle. Because each choice only
constrains its own trio, picking the cheapest feasible fold per matvec is
also the jointly cheapest plan.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .graph import Graph, LayerNode
from .resources import CostModelConfig, ResourceBudget, matvec_luts, threshold_luts

__all__ = [
    "FoldingError",
    "FoldingPlan",
    "divisors",
    "node_cycles",
    "max_node_cycles",
    "theoretical_fps",
    "fold_cost",
    "fold_graph",
]

DEFAULT_CLOCK_MHZ = 187.5


class FoldingError(ValueError):
    def __init__(self, message: str, cause: str = "latency", node_id: str | None = None):
        super().__init__(message)
        self.cause = cause
        self.node_id = node_id


@dataclass
class FoldingPlan:
    """(PE, SIMD) per matvec node plus the stream clock."""

    folds: dict[str, tuple[int, int]] = field(default_factory=dict)
    clock_mhz: float = DEFAULT_CLOCK_MHZ

    def pe(self, node_id: str) -> int:
        return self.folds[node_id][0]

    def simd(self, node_id: str) -> int:
        return self.folds[node_id][1]

    @property
    def clock_hz(self) -> float:
        return self.clock_mhz * 1e6

    def validate(self, g: Graph) -> None:
        matvecs = {n.id: n for n in g.nodes if n.kind == "matvec"}
        missing = sorted(set(matvecs) - set(self.folds))
        if missing:
            raise FoldingError(f"plan is missing folds for {missing}", cause="plan")
        unknown = sorted(set(self.folds) - set(matvecs))
        if unknown:
            raise FoldingError(f"plan names nodes that are not matvecs: {unknown}", cause="plan")
        if self.clock_mhz <= 0:
            raise FoldingError(f"clock must be positive, got {self.clock_mhz}", cause="plan")
        for nid, (pe, simd) in self.folds.items():
            n = matvecs[nid]
            out_ch, fold_in = n.out_ch(), int(n.attrs["fold_in"])
            if pe < 1 or out_ch % pe:
                raise FoldingError(f"{nid}: PE {pe} does not divide out_ch {out_ch}", cause="plan", node_id=nid)
            if simd < 1 or fold_in % simd:
                raise FoldingError(f"{nid}: SIMD {simd} does not divide fold_in {fold_in}", cause="plan", node_id=nid)

    def to_json(self, path: str | Path) -> None:
        payload = {
            "clock_mhz": self.clock_mhz,
            "folds": {k: {"pe": pe, "simd": simd} for k, (pe, simd) in sorted(self.folds.items())},
        }
        Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")

    @classmethod
    def from_json(cls, path: str | Path) -> "FoldingPlan":
        payload = json.loads(Path(path).read_text())
        folds = {k: (int(v["pe"]), int(v["simd"])) for k, v in payload["folds"].items()}
        return cls(folds, float(payload.get("clock_mhz", DEFAULT_CLOCK_MHZ)))

    @classmethod
    def unit(cls, g: Graph, clock_mhz: float = DEFAULT_CLOCK_MHZ) -> "FoldingPlan":
        """Fully folded: one PE, one SIMD lane everywhere (slowest, smallest)."""
        return cls({n.id: (1, 1) for n in g.nodes if n.kind == "matvec"}, clock_mhz)


def divisors(n: int) -> list[int]:
    return [d for d in range(1, n + 1) if n % d == 0]


def node_cycles(g: Graph, node_id: str, plan: FoldingPlan) -> int:
    """Cycles this node needs per frame under the plan."""
    n = g.node(node_id)
    if n.kind == "matvec":
        pe, simd = plan.folds[n.id]
        return (int(n.attrs["fold_in"]) // simd) * (n.out_ch() // pe) * n.out_pixels()
    if n.kind == "im2col":
        consumer = _only_consumer(g, n)
        simd = plan.simd(consumer.id)
        return n.out_pixels() * (int(n.attrs["fold_in"]) // simd)
    if n.kind == "multithreshold":
        producer = g.producers(n.id)[0]
        pe = plan.pe(producer.id) if producer.kind == "matvec" else 1
        return n.out_pixels() * (n.out_ch() // pe)
    if n.kind == "output":
        return g.producers(n.id)[0].out_pixels()
    return n.out_pixels()


def _only_consumer(g: Graph, n: LayerNode) -> LayerNode:
    consumers = g.consumers(n.id)
    if len(consumers) != 1:
        raise FoldingError(f"{n.id}: expected exactly one consumer, found {len(consumers)}", cause="plan")
    return consumers[0]


def max_node_cycles(g: Graph, plan: FoldingPlan) -> tuple[int, str]:
    """Slowest node's cycles per frame; ties resolve to the earliest node."""
    best, best_id = -1, ""
    for n in g.nodes:
        c = node_cycles(g, n.id, plan)
        if c > best:
            best, best_id = c, n.id
    return best, best_id


def theoretical_fps(g: Graph, plan: FoldingPlan) -> float:
    """Steady-state frame rate with unlimited FIFOs: clock / slowest node."""
    cycles, _ = max_node_cycles(g, plan)
    return plan.clock_hz / cycles


def fold_cost(n: LayerNode, pe: int, simd: int, in_bits: int, thr_bits: int, cfg: CostModelConfig) -> float:
    """LUT cost of one matvec trio under a candidate fold (the fold objective)."""
    w_bits = int(n.attrs["weight_bits"])
    acc_bits = int(n.attrs["acc_bits"])
    luts = matvec_luts(pe, simd, w_bits, in_bits, cfg)
    if thr_bits:
        luts += threshold_luts(pe, thr_bits, acc_bits, cfg)
    return luts


def fold_graph(
    g: Graph,
    cycle_budget: int,
    clock_mhz: float = DEFAULT_CLOCK_MHZ,
    cfg: CostModelConfig | None = None,
    resource_budget: ResourceBudget | None = None,
) -> FoldingPlan:
    """Cheapest plan with every node at or under the cycle budget.

    Per matvec, all (PE, SIMD) divisor pairs whose trio (im2col feeder,
    matvec, threshold unit) fits the budget are scored with fold_cost; the
    cheapest wins, ties resolving to fewer total lanes. Unfoldable nodes
    (streaming nodes slower than the budget, or no feasible pair) raise
    FoldingError with cause "latency"; if a resource budget is given and
    even the cheapest feasible plan exceeds it, cause is "resources".
    """
    if g.stage != "lowered":
        raise FoldingError(f"fold_graph expects a lowered graph, got {g.stage}", cause="plan")
    if cycle_budget < 1:
        raise FoldingError(f"cycle budget must be >= 1, got {cycle_budget}", cause="plan")
    cfg = cfg or CostModelConfig()
    folds: dict[str, tuple[int, int]] = {}
    from .lowering import bits_for_range  # local import keeps module deps one-way

    for n in g.nodes:
        if n.kind != "matvec":
            if n.kind in ("im2col", "multithreshold"):
                continue  # accounted for with their matvec below
            if n.out_pixels() > cycle_budget:
                raise FoldingError(
                    f"{n.id}: streams {n.out_pixels()} pixels, over the {cycle_budget}-cycle budget",
                    cause="latency",
                    node_id=n.id,
                )
            continue
        fold_in, out_ch, pixels = int(n.attrs["fold_in"]), n.out_ch(), n.out_pixels()
        feeder = g.producers(n.id)[0]
        in_bits = bits_for_range(int(feeder.attrs["out_lo"]), int(feeder.attrs["out_hi"]))
        consumers = g.consumers(n.id)
        thr_bits = int(consumers[0].attrs["bit_width"]) if consumers and consumers[0].kind == "multithreshold" else 0
        best: tuple[float, int, int, int] | None = None
        for pe in divisors(out_ch):
            for simd in divisors(fold_in):
                mv = (fold_in // simd) * (out_ch // pe) * pixels
                feed = feeder.out_pixels() * (fold_in // simd)
                thr = pixels * (out_ch // pe)
                if max(mv, feed, thr) > cycle_budget:
                    continue
                key = (fold_cost(n, pe, simd, in_bits, thr_bits, cfg), pe * simd, pe, simd)
                if best is None or key < best:
                    best = key
        if best is None:
            raise FoldingError(
                f"{n.id}: no (PE, SIMD) meets the {cycle_budget}-cycle budget",
                cause="latency",
                node_id=n.id,
            )
        folds[n.id] = (best[2], best[3])
    plan = FoldingPlan(folds, clock_mhz)
    plan.validate(g)
    if resource_budget is not None:
        from .resources import estimate_resources

        report = estimate_resources(g, plan, cfg=cfg)
        if not report.fits(resource_budget):
            raise FoldingError(
                f"cheapest {cycle_budget}-cycle plan needs {report.luts} LUTs / "
                f"{report.brams} BRAMs / {report.dsps} DSPs, over the device budget",
                cause="resources",
            )
    return plan
