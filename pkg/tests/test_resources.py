"""Resource and energy model: formula anchors, packing boundaries, report algebra."""

import math

import numpy as np
import pytest

from quantflow import (
    CostModelConfig,
    FoldingPlan,
    ResourceBudget,
    ResourceReport,
    estimate_resources,
    energy_metrics,
)
from quantflow.folding import FoldingError
from quantflow.pipeline_sim import FifoConfig
from quantflow.resources import (
    fifo_resources,
    matvec_luts,
    stream_width_bits,
    threshold_luts,
)

from _skeletons import chain

CFG = CostModelConfig()


# ---------------------------------------------------------------- formulas


def test_matvec_luts_worked_example():
    # ceil(1.1 * 4 * 8 * 4bit * 8bit) = ceil(1126.4)
    assert matvec_luts(4, 8, 4, 8, CFG) == 1127
    assert matvec_luts(1, 1, 1, 1, CFG) == 2  # ceil(1.1)


def test_matvec_luts_scales_with_every_factor():
    base = matvec_luts(2, 2, 2, 2, CFG)
    unit = CostModelConfig(lut_per_mac=1.0)
    assert matvec_luts(2, 2, 2, 2, unit) == 16
    assert matvec_luts(4, 2, 2, 2, unit) == 2 * 16
    assert matvec_luts(2, 2, 8, 2, unit) == 4 * 16
    assert base >= 16  # the default coefficient only adds fabric


def test_threshold_luts_four_bit_costs_five_times_two_bit():
    # comparator count goes (2^4 - 1) / (2^2 - 1) = 15 / 3 = 5
    for pe in (1, 4):
        assert threshold_luts(pe, 4, 10, CFG) == 5 * threshold_luts(pe, 2, 10, CFG)
    # with ceil rounding on other accumulator widths the ratio stays near 5
    for acc in (7, 13, 21):
        ratio = threshold_luts(1, 4, acc, CFG) / threshold_luts(1, 2, acc, CFG)
        assert abs(ratio - 5.0) < 0.1


def test_threshold_luts_worked_example():
    # ceil(2.2 * 4PE * 15 thresholds * 13 acc bits) = 1716 exactly
    assert threshold_luts(4, 4, 13, CFG) == 1716


# ---------------------------------------------------------------- FIFOs


def test_fifo_bram_worked_example():
    # 16 lanes of 8 bits, depth 1024: ceil(131072 / 18432) = 8 BRAM18
    luts, brams = fifo_resources(128, 1024, CFG)
    assert brams == 8
    assert luts == 13  # ceil(0.1 * 128) of glue logic


def test_fifo_srl_boundaries():
    # shallow and narrow stays in shift registers
    assert fifo_resources(8, 32, CFG) == (8, 0)
    # both limits are inclusive: depth 32 at exactly srl_max_bits
    assert fifo_resources(64, 32, CFG) == (64, 0)
    # one bit over the size cap tips into BRAM
    luts, brams = fifo_resources(65, 32, CFG)
    assert brams == 1 and luts == math.ceil(0.1 * 65)
    # one slot over the depth cap tips into BRAM even when bits would fit
    assert fifo_resources(64, 33, CFG)[1] == 1
    # depth 1 edge: a single 2048-bit beat still fits SRLs
    assert fifo_resources(2048, 1, CFG) == (2048, 0)


def test_fifo_srl_luts_count_32_deep_slices():
    assert fifo_resources(4, 16, CFG) == (4, 0)
    assert fifo_resources(4, 32, CFG) == (4, 0)
    cfg = CostModelConfig(srl_max_depth=96, srl_max_bits=10_000)
    assert fifo_resources(4, 33, cfg) == (8, 0)
    assert fifo_resources(4, 96, cfg) == (12, 0)


def test_stream_width_is_channels_times_payload_bits():
    g = chain((32,), ch=96, hw=(10, 10))
    assert stream_width_bits(g, "in") == 96 * 8  # 0..255 unsigned
    assert stream_width_bits(g, "mv0") == 32 * 14  # -4096..4096 signed
    assert stream_width_bits(g, "mv0_act") == 32 * 4  # 0..15 unsigned


# ---------------------------------------------------------------- estimates


def test_estimate_hand_worked_single_layer():
    g = chain((32,), ch=96, hw=(10, 10))
    rep = estimate_resources(g, FoldingPlan({"mv0": (4, 8)}))
    assert rep.per_node["mv0"] == {
        "luts": 1127,  # ceil(1.1 * 4 * 8 * 4 * 8): feeder streams 8-bit codes
        "ffs": 1127,
        "brams": 1,  # 32*96 weights * 4 bits = 12288 <= 18432
        "dsps": 32,  # 4*8 bit product crosses the DSP threshold of 17
    }
    assert rep.per_node["mv0_act"] == {"luts": 1716, "ffs": 1716, "brams": 0, "dsps": 0}
    assert set(rep.per_node) == {"mv0", "mv0_act"}
    assert (rep.luts, rep.ffs, rep.brams, rep.dsps) == (2843, 2843, 1, 32)


def test_narrow_operands_use_no_dsps():
    g = chain((32,), ch=96, hw=(10, 10))
    g.node("mv0_im2col").attrs["out_hi"] = 15  # 4-bit feed: 4*4 = 16 < 17
    rep = estimate_resources(g, FoldingPlan({"mv0": (4, 8)}))
    assert rep.per_node["mv0"]["dsps"] == 0
    assert rep.per_node["mv0"]["luts"] == 564  # ceil(1.1 * 32 * 16)


def test_weight_bram_packs_by_total_bits():
    at_cap = chain((32,), ch=144)  # 32*144*4 = 18432 bits, exactly one unit
    rep = estimate_resources(at_cap, FoldingPlan({"mv0": (1, 1)}))
    assert rep.per_node["mv0"]["brams"] == 1
    over_cap = chain((32,), ch=145)  # 18560 bits spill into a second unit
    rep = estimate_resources(over_cap, FoldingPlan({"mv0": (1, 1)}))
    assert rep.per_node["mv0"]["brams"] == 2


def test_fifo_entries_join_the_report():
    g = chain((32,), ch=96, hw=(10, 10))
    plan = FoldingPlan({"mv0": (4, 8)})
    bare = estimate_resources(g, plan)
    rep = estimate_resources(g, plan, fifo_depths={("in", "mv0_im2col"): 2})
    entry = rep.per_node["fifo:in->mv0_im2col"]
    assert entry == {"luts": 768, "ffs": 768, "brams": 0, "dsps": 0}  # 768-bit beat, SRL
    assert rep.luts == bare.luts + 768
    deep = estimate_resources(g, plan, fifo_depths={("in", "mv0_im2col"): 1024})
    assert deep.per_node["fifo:in->mv0_im2col"]["brams"] == math.ceil(768 * 1024 / 18432)


def test_totals_equal_per_node_sums_on_random_pipelines(toy_pipeline):
    for seed in range(6):
        _, _, _, _, gl = toy_pipeline(seed)
        plan = FoldingPlan.unit(gl)
        rep = estimate_resources(gl, plan, fifo_depths=FifoConfig.default(gl).depths)
        for field in ("luts", "ffs", "brams", "dsps"):
            assert getattr(rep, field) == sum(e[field] for e in rep.per_node.values())
        matvecs = {n.id for n in gl.nodes if n.kind == "matvec"}
        thresholds = {n.id for n in gl.nodes if n.kind == "multithreshold"}
        assert matvecs <= set(rep.per_node)
        assert thresholds <= set(rep.per_node)
        # every matvec holds weights on chip, so it owns at least one BRAM
        assert all(rep.per_node[m]["brams"] >= 1 for m in matvecs)
        compute_keys = {k for k in rep.per_node if not k.startswith("fifo:")}
        assert not any(k.endswith("_im2col") for k in compute_keys)


def test_convless_graph_estimates_to_zero():
    g = chain(ch=4, hw=(2, 2))  # input -> output, nothing to fold
    rep = estimate_resources(g, FoldingPlan({}))
    assert (rep.luts, rep.ffs, rep.brams, rep.dsps) == (0, 0, 0, 0)
    assert rep.per_node == {}


def test_estimate_rejects_unlowered_graph(toy_pipeline):
    g, _, _, gq, _ = toy_pipeline(0)
    for wrong in (g, gq):
        with pytest.raises(FoldingError, match="lowered"):
            estimate_resources(wrong, FoldingPlan({}))


# ---------------------------------------------------------------- reports


def test_report_add_accumulates_per_node_and_totals():
    rep = ResourceReport()
    rep.add("a", luts=10, ffs=5)
    rep.add("a", brams=2)
    rep.add("b", dsps=3, luts=1)
    assert rep.per_node["a"] == {"luts": 10, "ffs": 5, "brams": 2, "dsps": 0}
    assert (rep.luts, rep.ffs, rep.brams, rep.dsps) == (11, 5, 2, 3)
    d = rep.to_dict()
    assert d["luts"] == 11 and d["per_node"]["b"]["dsps"] == 3


def test_budget_fits_is_inclusive_per_resource():
    budget = ResourceBudget(luts=100, ffs=100, brams=10, dsps=10)
    rep = ResourceReport(luts=100, ffs=100, brams=10, dsps=10)
    assert rep.fits(budget)
    rep.add("x", luts=1)
    assert not rep.fits(budget)
    lone = ResourceReport(dsps=11)
    assert not lone.fits(budget)  # any single overrun disqualifies


def test_utilization_fractions():
    budget = ResourceBudget()
    rep = ResourceReport(luts=115200, ffs=46080, brams=156, dsps=432)
    util = budget.utilization(rep)
    assert util == {"luts": 0.5, "ffs": 0.1, "brams": 0.25, "dsps": 0.25}


def test_default_budget_is_midrange_part():
    b = ResourceBudget()
    assert (b.luts, b.ffs, b.brams, b.dsps) == (230400, 460800, 624, 1728)
    assert CFG.bram_bits == 18432


# ---------------------------------------------------------------- energy


def test_fps_per_watt_published_operating_points():
    expected = [
        (58.7, 0.865, 67.9),
        (250.0, 3.83, 65.3),
        (7.66, 2.2, 3.48),
        (6.58, 3.7, 1.78),
    ]
    for fps, watts, figure in expected:
        rep = energy_metrics(fps, watts)
        assert rep.fps_per_watt == pytest.approx(figure, abs=0.05)
        assert rep.fps == fps and rep.power_w == watts


def test_energy_metrics_rejects_bad_operands():
    for watts in (0.0, -1.0, float("inf"), float("nan")):
        with pytest.raises(ValueError, match="power"):
            energy_metrics(10.0, watts)
    for fps in (-1.0, float("inf"), float("nan")):
        with pytest.raises(ValueError, match="fps"):
            energy_metrics(fps, 2.0)
    assert energy_metrics(0.0, 2.0).fps_per_watt == 0.0


def test_energy_report_dict_round_trip():
    rep = energy_metrics(250.0, 3.83)
    assert np.isclose(rep.fps_per_watt, 250.0 / 3.83)
