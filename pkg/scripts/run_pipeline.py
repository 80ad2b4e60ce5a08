#!/usr/bin/env python3
"""End-to-end experiment: backbone -> mixed-precision plan -> integer graph
-> folding -> cycle-level simulation -> resources and efficiency.

Runs the whole flow in one process and prints a compact report. The default
resolution of 64 keeps the run under a minute; pass --resolution 240 for the
deployment geometry (several minutes, pure-numpy inference dominates).
"""

from __future__ import annotations

import argparse
import json
import time
from pathlib import Path

from quantflow import (
    FifoConfig,
    ResourceBudget,
    SelectionPolicy,
    build_backbone,
    compare_engines,
    count_macs,
    count_params,
    energy_metrics,
    estimate_resources,
    fold_graph,
    max_node_cycles,
    quantize_graph,
    save_model,
    select_bitwidths,
    simulate,
    streamline_to_integer,
    synth_images,
    theoretical_fps,
    tune_fifos,
)
from quantflow.sensitivity import canned_backbone_records


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--resolution", type=int, default=64)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--calib-images", type=int, default=2)
    ap.add_argument("--target-fps", type=float, default=250.0)
    ap.add_argument("--clock-mhz", type=float, default=187.5)
    ap.add_argument("--power", type=float, default=3.83, help="board watts for fps/W")
    ap.add_argument("--frames", type=int, default=3)
    ap.add_argument("--no-tune", action="store_true", help="skip FIFO depth tuning")
    ap.add_argument("--out-dir", default="pipeline_out")
    args = ap.parse_args()

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()

    print(f"[1/7] building backbone at {args.resolution}x{args.resolution}")
    g = build_backbone(args.resolution, seed=args.seed)
    params, macs = count_params(g), count_macs(g)
    print(f"      {len(g.conv_nodes())} convs, {sum(params.values()):,} weights, "
          f"{sum(macs.values()):,} MACs/frame")

    print("[2/7] bit-width plan from the frozen sensitivity sweep")
    plan = select_bitwidths(canned_backbone_records(), SelectionPolicy())
    raised = {k: v for k, v in plan.weight_bits.items() if v != SelectionPolicy().base_bits}
    print(f"      raised layers: {raised}, everything else "
          f"{SelectionPolicy().base_bits}w/{plan.activation_bits}a")
    plan.to_json(out / "plan.json")

    print(f"[3/7] calibrating on {args.calib_images} synthetic images and quantizing")
    calib = synth_images(args.calib_images, 3, (args.resolution, args.resolution), seed=args.seed)
    gq = quantize_graph(g, plan, calib)
    save_model(gq, str(out), name="quantized")

    print("[4/7] lowering to the integer streaming graph")
    gl = streamline_to_integer(gq)
    save_model(gl, str(out), name="lowered")
    print(f"      {len(gl.nodes)} nodes, all integer")

    print("[5/7] verifying integer engine against the quantized reference")
    report = compare_engines(gq, gl, calib[0])
    print(f"      max per-node MSE {report.max_mse:.6g} over {report.n_compared} nodes "
          f"-> {'bit-exact' if report.bit_exact else 'MISMATCH'}")
    if not report.bit_exact:
        return 1

    budget = int(args.clock_mhz * 1e6 / args.target_fps)
    print(f"[6/7] folding to a {budget:,}-cycle budget ({args.target_fps} fps at {args.clock_mhz} MHz)")
    fold = fold_graph(gl, budget, clock_mhz=args.clock_mhz)
    fold.to_json(out / "folding.json")
    cycles, node = max_node_cycles(gl, fold)
    print(f"      slowest node {node}: {cycles:,} cycles -> {theoretical_fps(gl, fold):.2f} fps theoretical")

    print(f"[7/7] simulating {args.frames} frames and estimating resources")
    fifo = FifoConfig.default(gl)
    sim = simulate(gl, fold, fifo, frames=args.frames, power_w=args.power)
    if not args.no_tune and sim.cycles_per_frame > cycles:
        print(f"      burst-safe FIFOs reach only {sim.steady_state_fps:.2f} fps; tuning depths")
        fifo = tune_fifos(gl, fold, frames=args.frames)
        sim = simulate(gl, fold, fifo, frames=args.frames, power_w=args.power)
    res = estimate_resources(gl, fold, fifo.depths)
    budget_chip = ResourceBudget()
    util = budget_chip.utilization(res)
    eff = energy_metrics(sim.steady_state_fps, args.power)
    print(f"      measured {sim.steady_state_fps:.2f} fps "
          f"(bottleneck {sim.bottleneck_node}, {sim.cycles_per_frame:,} cycles/frame)")
    print(f"      {res.luts:,} LUTs ({util['luts']:.1%}), {res.brams} BRAM18 ({util['brams']:.1%}), "
          f"{res.dsps} DSPs ({util['dsps']:.1%}) -> fits: {res.fits(budget_chip)}")
    print(f"      {eff.fps:.2f} fps / {eff.power_w} W = {eff.fps_per_watt:.2f} fps/W")

    summary = {
        "resolution": args.resolution,
        "macs_per_frame": sum(macs.values()),
        "weights": sum(params.values()),
        "bit_exact": report.bit_exact,
        "cycles_per_frame": sim.cycles_per_frame,
        "steady_state_fps": sim.steady_state_fps,
        "bottleneck_node": sim.bottleneck_node,
        "luts": res.luts,
        "brams": res.brams,
        "dsps": res.dsps,
        "utilization": util,
        "fps_per_watt": eff.fps_per_watt,
        "elapsed_s": round(time.perf_counter() - t0, 2),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=1) + "\n")
    print(f"done in {summary['elapsed_s']} s; artifacts in {out}/")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
