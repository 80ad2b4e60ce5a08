#!/usr/bin/env python3
"""Fit the LUT cost constants so the reference design fills its device.

The resource model has two free constants: LUTs per multiply lane-bit
(lut_per_mac) and LUTs per threshold comparator bit (lut_per_threshold).
This script folds the mixed-precision backbone to the real-time cycle
budget, then scales both constants by a common factor until the estimated
LUT count hits a target utilization of the device budget (the block-RAM
and DSP numbers follow from geometry alone, so they are only reported).
Bisection handles the per-node ceil() steps.
"""

from __future__ import annotations

import argparse
import json
from pathlib import Path

from quantflow import (
    CostModelConfig,
    FifoConfig,
    ResourceBudget,
    SelectionPolicy,
    build_backbone,
    estimate_resources,
    fold_graph,
    quantize_graph,
    select_bitwidths,
    streamline_to_integer,
    synth_images,
)
from quantflow.sensitivity import canned_backbone_records


def scaled(cfg: CostModelConfig, alpha: float) -> CostModelConfig:
    return CostModelConfig(
        lut_per_mac=cfg.lut_per_mac * alpha,
        lut_per_threshold=cfg.lut_per_threshold * alpha,
        dsp_bit_product=cfg.dsp_bit_product,
        srl_max_depth=cfg.srl_max_depth,
        bram_width=cfg.bram_width,
        bram_depth=cfg.bram_depth,
    )


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--resolution", type=int, default=240)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--target-fps", type=float, default=250.0)
    ap.add_argument("--clock-mhz", type=float, default=187.5)
    ap.add_argument("--target-lut-util", type=float, default=0.91)
    ap.add_argument("--out", default="fitted_cost_model.json")
    args = ap.parse_args()

    print(f"building and lowering the backbone at {args.resolution}...")
    g = build_backbone(args.resolution, seed=args.seed)
    plan = select_bitwidths(canned_backbone_records(), SelectionPolicy())
    calib = synth_images(1, 3, (args.resolution, args.resolution), seed=args.seed)
    gl = streamline_to_integer(quantize_graph(g, plan, calib))

    budget_cycles = int(args.clock_mhz * 1e6 / args.target_fps)
    base = CostModelConfig()
    fold = fold_graph(gl, budget_cycles, clock_mhz=args.clock_mhz, cfg=base)
    fifo = FifoConfig.default(gl)
    chip = ResourceBudget()
    target_luts = args.target_lut_util * chip.luts

    def luts_at(alpha: float) -> int:
        return estimate_resources(gl, fold, fifo.depths, scaled(base, alpha)).luts

    lo, hi = 1e-3, 1.0
    while luts_at(hi) < target_luts:
        hi *= 2.0
        if hi > 1e4:
            raise SystemExit("error: target utilization unreachable")
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if luts_at(mid) < target_luts:
            lo = mid
        else:
            hi = mid
    alpha = hi

    fitted = scaled(base, alpha)
    report = estimate_resources(gl, fold, fifo.depths, fitted)
    util = chip.utilization(report)
    print(f"base model:  {estimate_resources(gl, fold, fifo.depths, base).luts:,} LUTs "
          f"({estimate_resources(gl, fold, fifo.depths, base).luts / chip.luts:.1%})")
    print(f"scale alpha: {alpha:.6f}")
    print(f"fitted: lut_per_mac={fitted.lut_per_mac:.6f}, lut_per_threshold={fitted.lut_per_threshold:.6f}")
    print(f"fitted LUTs: {report.luts:,} / {chip.luts:,} = {util['luts']:.2%} "
          f"(target {args.target_lut_util:.0%})")
    print(f"geometry-only: {report.brams} BRAM18 ({util['brams']:.1%}), "
          f"{report.dsps} DSPs ({util['dsps']:.1%})")

    Path(args.out).write_text(json.dumps({
        "alpha": alpha,
        "lut_per_mac": fitted.lut_per_mac,
        "lut_per_threshold": fitted.lut_per_threshold,
        "luts": report.luts,
        "lut_utilization": util["luts"],
        "brams": report.brams,
        "bram_utilization": util["brams"],
        "dsps": report.dsps,
        "dsp_utilization": util["dsps"],
    }, indent=1) + "\n")
    print(f"wrote {args.out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
