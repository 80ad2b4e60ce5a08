"""Cycle-level simulation of the folded streaming pipeline.

Tokens are pixels: node n emits out_pixels tokens per frame and spends
node_cycles(n) cycles doing so, spread over the tokens in integer steps
(Bresenham-style, so the per-frame total is exact). Emitting output token j
first requires, per input edge, a proportional share ceil((j+1)*N_in/N_out)
of the frame's input tokens; those are consumed, and output-FIFO slots on
every outgoing edge are reserved, at service start. Pushes to all outgoing
edges happen together at service end. All times are integers, so repeated
runs are identical and steady-state rates are exact.

With FIFOs deep enough to never backpressure, the steady-state interval
between frames equals the slowest node's cycles per frame; undersized FIFOs
stretch it (fork-join topologies are the classic case), and FIFOs smaller
than one consumption burst deadlock, which the simulator detects and blames
on a specific edge.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from .folding import FoldingError, FoldingPlan, max_node_cycles, node_cycles
from .graph import Graph

__all__ = ["DeadlockError", "FifoConfig", "SimReport", "simulate", "tune_fifos"]

Edge = tuple[str, str]


class DeadlockError(RuntimeError):
    """No node can make progress; `edge` is the blocked FIFO to resize."""

    def __init__(self, message: str, edge: Edge):
        super().__init__(message)
        self.edge = edge


@dataclass
class FifoConfig:
    """Capacity (in tokens) of every edge FIFO."""

    depths: dict[Edge, int] = field(default_factory=dict)

    @classmethod
    def default(cls, g: Graph) -> "FifoConfig":
        """Smallest safe FIFOs: two tokens, or one consumption burst.

        Deadlock-free by construction (capacity covers the largest single
        consumption), but fork-join shortcuts will throttle the pipeline;
        tune_fifos finds the depths that restore full rate.
        """
        return cls({(src, dst): max(2, _max_burst(g, src, dst)) for src, dst in g.edges()})

    @classmethod
    def deep(cls, g: Graph) -> "FifoConfig":
        """Frame-deep FIFOs: backpressure can never bind."""
        return cls({(src, dst): g.node(src).out_pixels() + 1 for src, dst in g.edges()})

    def override(self, edge: Edge, depth: int) -> "FifoConfig":
        out = FifoConfig(dict(self.depths))
        out.depths[edge] = depth
        return out

    def to_json(self, path: str | Path) -> None:
        payload = {f"{s}->{d}": depth for (s, d), depth in sorted(self.depths.items())}
        Path(path).write_text(json.dumps(payload, indent=1) + "\n")

    @classmethod
    def from_json(cls, path: str | Path) -> "FifoConfig":
        depths = {}
        for key, depth in json.loads(Path(path).read_text()).items():
            src, _, dst = key.partition("->")
            if not dst:
                raise ValueError(f"fifo edge {key!r} is not of the form 'src->dst'")
            depths[(src, dst)] = int(depth)
        return cls(depths)

    def validate(self, g: Graph) -> None:
        edges = set(g.edges())
        missing = sorted(edges - set(self.depths))
        if missing:
            raise FoldingError(f"fifo config missing edges {missing}", cause="plan")
        unknown = sorted(set(self.depths) - edges)
        if unknown:
            raise FoldingError(f"fifo config has unknown edges {unknown}", cause="plan")
        for edge, depth in self.depths.items():
            if depth < 1:
                raise FoldingError(f"fifo {edge} must hold at least one token", cause="plan")


def _tokens(g: Graph, node_id: str) -> int:
    n = g.node(node_id)
    if n.kind == "output":
        return g.producers(n.id)[0].out_pixels()
    return n.out_pixels()


def _need(j: int, n_in: int, n_out: int) -> int:
    """Input tokens required before emitting local output j (proportional)."""
    return min(n_in, -(-(j + 1) * n_in // n_out))


def _max_burst(g: Graph, src: str, dst: str) -> int:
    n_in, n_out = _tokens(g, src), _tokens(g, dst)
    return max(_need(j, n_in, n_out) - _need(j - 1, n_in, n_out) if j else _need(0, n_in, n_out) for j in range(n_out))


@dataclass
class SimReport:
    cycles_per_frame: int
    steady_state_fps: float
    bottleneck_node: str
    bottleneck_cycles: int
    frames: int
    frame_times: list[int]
    frame_intervals: list[int]
    stall_cycles: dict[str, int]
    fifo_peaks: dict[Edge, int]
    fps_per_watt: float | None = None

    def to_dict(self) -> dict:
        return {
            "cycles_per_frame": self.cycles_per_frame,
            "steady_state_fps": self.steady_state_fps,
            "bottleneck_node": self.bottleneck_node,
            "bottleneck_cycles": self.bottleneck_cycles,
            "frames": self.frames,
            "frame_times": self.frame_times,
            "frame_intervals": self.frame_intervals,
            "stall_cycles": self.stall_cycles,
            "fifo_peaks": {f"{s}->{d}": v for (s, d), v in self.fifo_peaks.items()},
            "fps_per_watt": self.fps_per_watt,
        }


class _NodeState:
    __slots__ = ("node_id", "n_tokens", "cycles", "in_edges", "out_edges", "k", "prev_finish", "emits", "stall")

    def __init__(self, node_id: str, n_tokens: int, cycles: int, in_edges: list[Edge], out_edges: list[Edge]):
        self.node_id = node_id
        self.n_tokens = n_tokens
        self.cycles = cycles
        self.in_edges = in_edges
        self.out_edges = out_edges
        self.k = 0  # global index of the next token to emit
        self.prev_finish = 0
        self.emits: list[int] = []
        self.stall = 0


def simulate(
    g: Graph,
    plan: FoldingPlan,
    fifo: FifoConfig | None = None,
    frames: int = 6,
    power_w: float | None = None,
) -> SimReport:
    """Run `frames` frames through the pipeline and measure the steady rate.

    The reported cycles_per_frame is the last inter-frame interval at the
    output; with enough frames for the pipeline to fill, it is exact and
    repeatable. Run at least three times the pipeline's depth in frames
    (the default of six covers these linear graphs comfortably) so warm-up
    transients have drained. Raises DeadlockError when no node can make
    progress.
    """
    if g.stage != "lowered":
        raise FoldingError(f"simulate expects a lowered graph, got {g.stage}", cause="plan")
    if frames < 2:
        raise FoldingError("need at least two frames to measure an interval", cause="plan")
    plan.validate(g)
    fifo = fifo or FifoConfig.default(g)
    fifo.validate(g)

    states: dict[str, _NodeState] = {}
    for n in g.nodes:
        in_edges = [(src, n.id) for src in n.inputs]
        out_edges = [(n.id, c.id) for c in g.consumers(n.id)]
        states[n.id] = _NodeState(n.id, _tokens(g, n.id), node_cycles(g, n.id, plan), in_edges, out_edges)

    consumed: dict[Edge, int] = {e: 0 for e in fifo.depths}
    consume_times: dict[Edge, list[int]] = {e: [] for e in fifo.depths}

    def try_advance(st: _NodeState) -> tuple[bool, str, Edge | None]:
        """Advance one token. Returns (advanced, block_reason, blocked_edge)."""
        if st.k >= frames * st.n_tokens:
            return False, "done", None
        f, j = divmod(st.k, st.n_tokens)
        t_ready = 0
        for e in st.in_edges:
            src = states[e[0]]
            need = f * src.n_tokens + _need(j, src.n_tokens, st.n_tokens)
            if len(src.emits) < need:
                return False, "starved", e
            if need:
                t_ready = max(t_ready, src.emits[need - 1])
        for e in st.out_edges:
            cap = fifo.depths[e]
            if st.k >= cap:
                times = consume_times[e]
                if len(times) < st.k - cap + 1:
                    return False, "full", e
                t_ready = max(t_ready, times[st.k - cap])
        t_start = max(st.prev_finish, t_ready)
        st.stall += t_start - st.prev_finish
        for e in st.in_edges:
            src = states[e[0]]
            need = f * src.n_tokens + _need(j, src.n_tokens, st.n_tokens)
            while consumed[e] < need:
                consume_times[e].append(t_start)
                consumed[e] += 1
        inc = (j + 1) * st.cycles // st.n_tokens - j * st.cycles // st.n_tokens
        st.prev_finish = t_start + inc
        st.emits.append(st.prev_finish)
        st.k += 1
        return True, "", None

    total_target = frames * sum(st.n_tokens for st in states.values())
    emitted = 0
    while emitted < total_target:
        progressed = 0
        blocked: dict[str, tuple[str, Edge]] = {}
        for n in g.nodes:
            st = states[n.id]
            while True:
                ok, reason, edge = try_advance(st)
                if not ok:
                    if edge is not None:
                        blocked[n.id] = (reason, edge)
                    break
                progressed += 1
        emitted += progressed
        if progressed == 0:
            raise _diagnose_deadlock(blocked, fifo)

    out = states[g.output_node.id]
    frame_times = [out.emits[(f + 1) * out.n_tokens - 1] for f in range(frames)]
    intervals = [b - a for a, b in zip(frame_times, frame_times[1:])]
    ii = intervals[-1]
    bn_cycles, bn_node = max_node_cycles(g, plan)
    fps = plan.clock_hz / ii
    peaks = _fifo_peaks(states, consume_times, fifo)
    return SimReport(
        cycles_per_frame=ii,
        steady_state_fps=fps,
        bottleneck_node=bn_node,
        bottleneck_cycles=bn_cycles,
        frames=frames,
        frame_times=frame_times,
        frame_intervals=intervals,
        stall_cycles={nid: st.stall for nid, st in states.items()},
        fifo_peaks=peaks,
        fps_per_watt=None if power_w is None else fps / power_w,
    )


def _diagnose_deadlock(blocked: dict[str, tuple[str, Edge]], fifo: FifoConfig) -> DeadlockError:
    """Walk the wait-for chain to its cycle and blame a resizable FIFO.

    A node blocked on a full output FIFO waits for its consumer; a starved
    node waits for its producer. Following those pointers from any blocked
    node ends in a cycle; the full edge with the smallest capacity on the
    cycle is the one a deeper FIFO would break.
    """
    if not blocked:
        return DeadlockError("simulation stalled with no blocked node (internal error)", ("", ""))
    start = next(iter(blocked))
    path: list[str] = []
    seen: dict[str, int] = {}
    node = start
    while node in blocked and node not in seen:
        seen[node] = len(path)
        path.append(node)
        reason, edge = blocked[node]
        node = edge[1] if reason == "full" else edge[0]
    if node not in seen:  # chain ends at a node that finished all frames
        reason, edge = blocked[path[-1]]
        return DeadlockError(
            f"{path[-1]} waits on {edge[0]}->{edge[1]} but {node} has already finished",
            edge,
        )
    cycle = path[seen[node] :]
    full_edges = [blocked[n][1] for n in cycle if blocked[n][0] == "full"]
    if full_edges:
        edge = min(full_edges, key=lambda e: fifo.depths[e])
        return DeadlockError(
            f"deadlock: fifo {edge[0]}->{edge[1]} (capacity {fifo.depths[edge]}) is too "
            f"shallow for the blocked cycle {' -> '.join(cycle)}; deepen it",
            edge,
        )
    reason, edge = blocked[cycle[0]]
    return DeadlockError(f"deadlock among {' -> '.join(cycle)} starting at {edge[0]}->{edge[1]}", edge)


def _fifo_peaks(states: dict[str, "_NodeState"], consume_times: dict[Edge, list[int]], fifo: FifoConfig) -> dict[Edge, int]:
    """Highest token count each FIFO reached (pops apply before same-time pushes)."""
    peaks: dict[Edge, int] = {}
    for e, pops in consume_times.items():
        pushes = states[e[0]].emits
        events = sorted([(t, 1) for t in pushes] + [(t, 0) for t in pops])
        occ = peak = 0
        for _, is_push in events:
            occ += 1 if is_push else -1
            peak = max(peak, occ)
        peaks[e] = peak
    return peaks


def tune_fifos(
    g: Graph,
    plan: FoldingPlan,
    frames: int = 6,
    max_doublings: int = 24,
) -> FifoConfig:
    """Search for small FIFO depths that still reach the plan's full rate.

    Starting from the burst-safe default, the depths of every fork or join
    edge are doubled together until the simulated inter-frame interval
    matches the slowest node's cycles (which frame-deep FIFOs always
    achieve), then each raised edge is halved back greedily while the rate
    holds. The result is not guaranteed minimal, only rate-preserving and
    much smaller than frame-deep everywhere.
    """
    target, _ = max_node_cycles(g, plan)
    fifo = FifoConfig.default(g)
    base = dict(fifo.depths)
    candidates = sorted(
        e for e in g.edges() if len(g.consumers(e[0])) > 1 or g.node(e[1]).kind == "residual_add"
    )

    def interval(cfg: FifoConfig) -> int:
        return simulate(g, plan, cfg, frames=frames).cycles_per_frame

    current = interval(fifo)
    rounds = 0
    while current > target and rounds < max_doublings and candidates:
        for e in candidates:
            fifo = fifo.override(e, fifo.depths[e] * 2)
        current = interval(fifo)
        rounds += 1
    for e in candidates:
        while fifo.depths[e] > base[e]:
            trial = fifo.override(e, max(base[e], fifo.depths[e] // 2))
            if interval(trial) == current:
                fifo = trial
            else:
                break
    return fifo
