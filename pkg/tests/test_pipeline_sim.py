"""Simulator tests: exact steady state, backpressure monotonicity, deadlocks."""

from __future__ import annotations

import pytest
from _skeletons import chain
from hypothesis import given
from hypothesis import strategies as st

from quantflow import DeadlockError, FifoConfig, FoldingPlan, fold_graph, max_node_cycles, simulate, tune_fifos
from quantflow.folding import FoldingError
from quantflow.pipeline_sim import _max_burst, _need


def _toy_sim_setup(toy_pipeline, seed, divisor=4):
    _, _, _, _, gl = toy_pipeline(seed)
    unit_cycles, _ = max_node_cycles(gl, FoldingPlan.unit(gl))
    plan = fold_graph(gl, max(1, unit_cycles // divisor))
    return gl, plan


# -- steady-state rate ----------------------------------------------------------------


def test_interval_equals_bottleneck_on_a_chain():
    g = chain((4,), ch=1, hw=(10, 10))
    plan = FoldingPlan({"mv0": (1, 1)}, clock_mhz=187.5)  # matvec trio at 400 cycles
    report = simulate(g, plan, FifoConfig.deep(g), frames=6)
    assert report.cycles_per_frame == 400
    assert report.steady_state_fps == 187.5e6 / 400 == 468750.0
    assert report.bottleneck_cycles == 400
    assert report.bottleneck_node in ("mv0", "mv0_act")


def test_deep_fifos_reach_the_closed_form_on_random_models(toy_pipeline):
    for seed in range(15):
        gl, plan = _toy_sim_setup(toy_pipeline, seed)
        target, _ = max_node_cycles(gl, plan)
        report = simulate(gl, plan, FifoConfig.deep(gl), frames=6)
        assert report.cycles_per_frame == target, f"seed {seed}"


def test_intervals_settle_to_a_constant(toy_pipeline):
    gl, plan = _toy_sim_setup(toy_pipeline, 0)
    report = simulate(gl, plan, FifoConfig.deep(gl), frames=8)
    assert report.frame_intervals[-1] == report.frame_intervals[-2]
    assert len(report.frame_times) == 8
    assert report.frames == 8


def test_simulation_is_deterministic(toy_pipeline):
    gl, plan = _toy_sim_setup(toy_pipeline, 2)
    a = simulate(gl, plan, frames=5)
    b = simulate(gl, plan, frames=5)
    assert a.frame_times == b.frame_times
    assert a.stall_cycles == b.stall_cycles
    assert a.fifo_peaks == b.fifo_peaks


def test_default_fifos_never_deadlock_and_never_beat_deep(toy_pipeline):
    for seed in range(20):
        gl, plan = _toy_sim_setup(toy_pipeline, seed)
        shallow = simulate(gl, plan, FifoConfig.default(gl), frames=6)
        deep = simulate(gl, plan, FifoConfig.deep(gl), frames=6)
        assert shallow.cycles_per_frame >= deep.cycles_per_frame


def test_fifo_peaks_respect_capacity(toy_pipeline):
    gl, plan = _toy_sim_setup(toy_pipeline, 1)
    fifo = FifoConfig.default(gl)
    report = simulate(gl, plan, fifo, frames=5)
    for edge, peak in report.fifo_peaks.items():
        assert 0 <= peak <= fifo.depths[edge], edge


def test_deepening_one_fifo_never_slows_the_pipeline(toy_pipeline):
    for seed in range(6):
        gl, plan = _toy_sim_setup(toy_pipeline, seed)
        fifo = FifoConfig.default(gl)
        base = simulate(gl, plan, fifo, frames=5).cycles_per_frame
        for edge in list(fifo.depths)[:4]:
            deeper = simulate(gl, plan, fifo.override(edge, fifo.depths[edge] * 4), frames=5).cycles_per_frame
            assert deeper <= base, f"seed {seed}, edge {edge}"


# -- token bookkeeping -----------------------------------------------------------------


@given(st.integers(1, 500), st.integers(1, 500))
def test_proportional_consumption_is_conservative(n_in, n_out):
    needs = [_need(j, n_in, n_out) for j in range(n_out)]
    assert needs[-1] == n_in, "the last output must have consumed every input"
    assert all(0 <= a <= b for a, b in zip(needs, needs[1:]))
    assert all(0 < n <= n_in for n in needs)


def test_max_burst_matches_stride_two_downsampling():
    g = chain((4, 1, 2, 0), ch=1, hw=(10, 10))  # kernel 1, stride 2: 100 -> 25 tokens
    assert _max_burst(g, "in", "mv0_im2col") == 4
    cfg = FifoConfig.default(g)
    assert cfg.depths[("in", "mv0_im2col")] == 4


# -- deadlock ---------------------------------------------------------------------------


def test_undersized_fifo_deadlocks_with_the_edge_named():
    g = chain((4, 1, 2, 0), ch=1, hw=(10, 10))
    plan = FoldingPlan({"mv0": (1, 1)})
    fifo = FifoConfig.default(g).override(("in", "mv0_im2col"), 2)  # burst is 4
    with pytest.raises(DeadlockError) as excinfo:
        simulate(g, plan, fifo, frames=4)
    assert excinfo.value.edge == ("in", "mv0_im2col")
    assert "deepen" in str(excinfo.value) or "waits on" in str(excinfo.value)


# -- fifo config -------------------------------------------------------------------------


def test_fifo_config_validation():
    g = chain((4,), ch=1, hw=(10, 10))
    cfg = FifoConfig.default(g)
    with pytest.raises(FoldingError, match="missing edges"):
        FifoConfig({}).validate(g)
    with pytest.raises(FoldingError, match="unknown edges"):
        cfg.override(("a", "b"), 3).validate(g)
    with pytest.raises(FoldingError, match="at least one token"):
        cfg.override(("in", "mv0_im2col"), 0).validate(g)


def test_fifo_defaults_and_deep():
    g = chain((4,), ch=1, hw=(10, 10))
    default = FifoConfig.default(g)
    deep = FifoConfig.deep(g)
    assert set(default.depths) == set(g.edges())
    assert all(d >= 2 for d in default.depths.values())
    for (src, _), depth in deep.depths.items():
        assert depth == g.node(src).out_pixels() + 1


def test_override_copies_rather_than_mutates():
    g = chain((4,), ch=1, hw=(10, 10))
    cfg = FifoConfig.default(g)
    edge = next(iter(cfg.depths))
    other = cfg.override(edge, 99)
    assert other.depths[edge] == 99
    assert cfg.depths[edge] != 99


def test_fifo_config_json_round_trip(tmp_path):
    g = chain((4,), ch=1, hw=(10, 10))
    cfg = FifoConfig.default(g).override(("in", "mv0_im2col"), 17)
    path = tmp_path / "fifos.json"
    cfg.to_json(path)
    back = FifoConfig.from_json(path)
    assert back.depths == cfg.depths


def test_fifo_config_rejects_malformed_edge_key(tmp_path):
    path = tmp_path / "fifos.json"
    path.write_text('{"no_arrow_here": 4}')
    with pytest.raises(ValueError, match="src->dst"):
        FifoConfig.from_json(path)


# -- guards -----------------------------------------------------------------------------


def test_simulate_rejects_bad_arguments(toy_pipeline):
    g, _, _, _, gl = toy_pipeline(0)
    plan = FoldingPlan.unit(gl)
    with pytest.raises(FoldingError, match="lowered graph"):
        simulate(g, plan)
    with pytest.raises(FoldingError, match="two frames"):
        simulate(gl, plan, frames=1)


def test_report_serialization_and_power(toy_pipeline):
    gl, plan = _toy_sim_setup(toy_pipeline, 0)
    report = simulate(gl, plan, frames=4, power_w=2.0)
    assert report.fps_per_watt == report.steady_state_fps / 2.0
    d = report.to_dict()
    assert d["cycles_per_frame"] == report.cycles_per_frame
    assert all("->" in k for k in d["fifo_peaks"])
    assert simulate(gl, plan, frames=4).fps_per_watt is None


# -- tuning -----------------------------------------------------------------------------


def test_tune_fifos_is_a_no_op_on_linear_chains():
    g = chain((4,), (2,), ch=1, hw=(10, 10))
    plan = FoldingPlan.unit(g)
    tuned = tune_fifos(g, plan, frames=4)
    assert tuned.depths == FifoConfig.default(g).depths


def test_tune_fifos_restores_full_rate_on_toys(toy_pipeline):
    for seed in range(10):
        gl, plan = _toy_sim_setup(toy_pipeline, seed, divisor=2)
        target, _ = max_node_cycles(gl, plan)
        fifo = tune_fifos(gl, plan, frames=5)
        assert simulate(gl, plan, fifo, frames=5).cycles_per_frame == target
        base = FifoConfig.default(gl)
        assert all(fifo.depths[e] >= base.depths[e] for e in base.depths)
