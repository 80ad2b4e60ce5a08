"""Command-line front end for the whole pipeline.

Each subcommand does one pipeline step and reads/writes the on-disk model
container, so a full experiment is a short shell script. A TOML file passed
with --config supplies defaults (flat key = value, matching option names);
explicit flags always win. Exit codes: 0 success, 1 failure (one-line
``error: ...`` on stderr), 2 usage.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

try:
    import tomllib  # py >= 3.11
except ModuleNotFoundError:  # pragma: no cover - depends on interpreter
    import tomli as tomllib

from . import __version__
from .backbone import build_backbone, count_macs, count_params
from .demo import run_demo
from .engine import compare_engines, quantize_input, run_float, run_int, run_reference
from .folding import FoldingPlan, fold_graph, max_node_cycles, theoretical_fps
from .lowering import streamline_to_integer
from .model_io import load_model, save_model
from .pipeline_sim import FifoConfig, simulate, tune_fifos
from .pose import load_poses, mean_esa
from .quantize import BitWidthPlan, quantize_graph
from .resources import ResourceBudget, energy_metrics, estimate_resources
from .sensitivity import (
    SelectionPolicy,
    canned_backbone_records,
    load_records,
    save_records,
    select_bitwidths,
    sensitivity_sweep,
)
from .synthetic import synth_images, toy_model

__all__ = ["main", "build_parser"]


def _out_dir(args: argparse.Namespace) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _images_for(g, n: int, seed: int) -> np.ndarray:
    node = g.input_node
    return synth_images(n, int(node.attrs["in_ch"]), tuple(node.attrs["in_hw"]), seed=seed)


def _load_image(g, path: str | None, seed: int) -> np.ndarray:
    if path is None:
        return _images_for(g, 1, seed)[0]
    return np.load(path)


def _fifo_for(g, kind: str, path: str | None = None) -> FifoConfig:
    if path:
        fifo = FifoConfig.from_json(path)
        fifo.validate(g)
        return fifo
    return FifoConfig.deep(g) if kind == "deep" else FifoConfig.default(g)


def _print_json(payload: dict, path: Path | None = None) -> None:
    text = json.dumps(payload, indent=1, sort_keys=True)
    if path is not None:
        path.write_text(text + "\n")
    print(text)


# -- subcommand implementations ---------------------------------------------------


def _cmd_gen_model(args: argparse.Namespace) -> int:
    if args.arch == "backbone":
        g = build_backbone(args.resolution, seed=args.seed)
    else:
        g = toy_model(args.seed)
    json_path, _ = save_model(g, str(_out_dir(args)), name=args.name)
    params = count_params(g)
    macs = count_macs(g)
    print(f"wrote {json_path}: {len(g.nodes)} nodes, {len(params)} convs, "
          f"{sum(params.values())} weights, {sum(macs.values())} MACs/frame")
    return 0


def _cmd_quantize(args: argparse.Namespace) -> int:
    g = load_model(args.model)
    if args.plan:
        plan = BitWidthPlan.from_json(args.plan)
    else:
        plan = BitWidthPlan.uniform(g, args.weight_bits, args.act_bits)
    gq = quantize_graph(g, plan, _images_for(g, args.calib_images, args.seed))
    out = _out_dir(args)
    json_path, _ = save_model(gq, str(out), name=args.name)
    plan.to_json(out / f"{args.name}_plan.json")
    print(f"wrote {json_path} (weights {sorted(set(plan.weight_bits.values()))} bits, "
          f"activations {plan.activation_bits} bits)")
    return 0


def _cmd_lower(args: argparse.Namespace) -> int:
    gq = load_model(args.model)
    gl = streamline_to_integer(gq)
    json_path, _ = save_model(gl, str(_out_dir(args)), name=args.name)
    kinds = sorted({n.kind for n in gl.nodes})
    print(f"wrote {json_path}: {len(gl.nodes)} integer nodes ({', '.join(kinds)})")
    return 0


def _cmd_run(args: argparse.Namespace) -> int:
    g = load_model(args.model)
    x = _load_image(g, args.image, args.seed)
    if g.stage == "float":
        out, trace = run_float(g, x)
    elif g.stage == "quantized":
        out, trace = run_reference(g, x)
    else:
        qt, trace = run_int(g, quantize_input(g, x))
        out = qt.data
    print(f"stage={g.stage} output shape={tuple(out.shape)} "
          f"min={out.min():.6g} max={out.max():.6g}")
    if args.trace:
        for e in trace.entries:
            checksum = e.checksum or "-"
            print(f"  {e.node_id:24s} {e.kind:18s} {str(e.shape):18s} {checksum}")
    return 0


def _cmd_verify(args: argparse.Namespace) -> int:
    gq = load_model(args.quantized)
    gl = load_model(args.lowered)
    worst = 0.0
    for i in range(args.images):
        report = compare_engines(gq, gl, _images_for(gq, 1, args.seed + i)[0])
        worst = max(worst, report.max_mse)
        flag = "ok" if report.bit_exact else "MISMATCH"
        print(f"image {i}: max MSE {report.max_mse:.6g} over {report.n_compared} nodes [{flag}]")
    if worst != 0.0:
        print(f"error: engines disagree (max MSE {worst:.6g})", file=sys.stderr)
        return 1
    print("bit-exact: integer engine matches the reference on all images")
    return 0


def _cmd_fold(args: argparse.Namespace) -> int:
    gl = load_model(args.model)
    clock_hz = args.clock_mhz * 1e6
    budget = args.cycle_budget or int(clock_hz / args.target_fps)
    plan = fold_graph(gl, budget, clock_mhz=args.clock_mhz)
    out = _out_dir(args)
    plan.to_json(out / f"{args.name}.json")
    cycles, node = max_node_cycles(gl, plan)
    print(f"wrote {out / (args.name + '.json')}: budget {budget} cycles, "
          f"slowest node {node} at {cycles} cycles, {theoretical_fps(gl, plan):.2f} fps")
    return 0


def _cmd_simulate(args: argparse.Namespace) -> int:
    gl = load_model(args.model)
    plan = FoldingPlan.from_json(args.plan) if args.plan else fold_graph(gl, args.cycle_budget, args.clock_mhz)
    fifo = _fifo_for(gl, args.fifo, args.fifos)
    report = simulate(gl, plan, fifo, frames=args.frames, power_w=args.power)
    payload = report.to_dict()
    _print_json(payload, _out_dir(args) / f"{args.name}.json" if args.save else None)
    return 0


def _cmd_tune_fifos(args: argparse.Namespace) -> int:
    gl = load_model(args.model)
    plan = FoldingPlan.from_json(args.plan) if args.plan else fold_graph(gl, args.cycle_budget, args.clock_mhz)
    fifo = tune_fifos(gl, plan, frames=args.frames)
    path = _out_dir(args) / f"{args.name}.json"
    fifo.to_json(path)
    report = simulate(gl, plan, fifo, frames=args.frames)
    base = FifoConfig.default(gl)
    raised = {f"{s}->{d}": v for (s, d), v in sorted(fifo.depths.items()) if v != base.depths[(s, d)]}
    print(f"wrote {path}: {report.steady_state_fps:.2f} fps "
          f"(slowest node allows {theoretical_fps(gl, plan):.2f}), deepened {raised or 'nothing'}")
    return 0


def _cmd_resources(args: argparse.Namespace) -> int:
    gl = load_model(args.model)
    plan = FoldingPlan.from_json(args.plan) if args.plan else fold_graph(gl, args.cycle_budget, args.clock_mhz)
    fifo = _fifo_for(gl, args.fifo, args.fifos)
    report = estimate_resources(gl, plan, fifo.depths)
    budget = ResourceBudget()
    util = budget.utilization(report)
    payload = report.to_dict()
    payload["utilization"] = {k: round(v, 4) for k, v in util.items()}
    payload["fits"] = report.fits(budget)
    if not args.per_node:
        payload.pop("per_node")
    _print_json(payload, _out_dir(args) / f"{args.name}.json" if args.save else None)
    return 0


def _cmd_demo(args: argparse.Namespace) -> int:
    out = run_demo(frames=args.frames, shortcut_depth=args.shortcut_depth, seed=args.seed)
    out.pop("starved_stall_cycles")
    _print_json(out)
    return 0


def _cmd_sweep(args: argparse.Namespace) -> int:
    g = load_model(args.model)
    if g.stage != "float":
        print("error: sensitivity sweeps run on float models", file=sys.stderr)
        return 1
    records = sensitivity_sweep(
        g,
        _images_for(g, args.calib_images, args.seed),
        probe_bits=args.probe_bits,
        base_bits=args.base_bits,
        act_bits=args.act_bits,
    )
    path = _out_dir(args) / f"{args.name}.csv"
    save_records(records, path)
    worst = max(records, key=lambda r: r.degradation)
    print(f"wrote {path}: {len(records)} layers, most sensitive {worst.layer_id} "
          f"(+{worst.degradation:.6g} output MSE at {args.probe_bits} bits)")
    return 0


def _cmd_select_bits(args: argparse.Namespace) -> int:
    records = canned_backbone_records() if args.canned else load_records(args.records)
    policy = SelectionPolicy(
        ladder=tuple(int(b) for b in args.ladder.split(",") if b),
        base_bits=args.base_bits,
        act_bits=args.act_bits,
    )
    plan = select_bitwidths(records, policy)
    path = _out_dir(args) / f"{args.name}.json"
    plan.to_json(path)
    raised = {k: v for k, v in plan.weight_bits.items() if v != policy.base_bits}
    print(f"wrote {path}: {raised} raised above base {policy.base_bits}, "
          f"activations {plan.activation_bits} bits")
    return 0


def _cmd_score(args: argparse.Namespace) -> int:
    q_est, t_est = load_poses(args.estimates)
    q_true, t_true = load_poses(args.truth)
    if len(q_est) != len(q_true):
        print(f"error: {len(q_est)} estimates vs {len(q_true)} ground-truth rows", file=sys.stderr)
        return 1
    score = mean_esa(q_est, t_est, q_true, t_true)
    print(f"samples: {len(q_est)}")
    print(f"mean pose score: {score:.9g}")
    return 0


def _cmd_energy(args: argparse.Namespace) -> int:
    report = energy_metrics(args.fps, args.power)
    print(f"{report.fps:.6g} fps / {report.power_w:.6g} W = {report.fps_per_watt:.6g} fps/W")
    return 0


# -- parser -----------------------------------------------------------------------


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(
        prog="quantflow",
        description="Quantize a CNN, lower it to an integer streaming graph, "
        "and estimate its dataflow-accelerator performance.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--config", help="TOML file with flat option defaults")
    sub = parser.add_subparsers(dest="command", required=True)
    subs: dict[str, argparse.ArgumentParser] = {}

    def cmd(name: str, fn, help_: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_)
        p.set_defaults(fn=fn)
        p.add_argument("--out-dir", default=".", help="directory for outputs")
        p.add_argument("--seed", type=int, default=0)
        subs[name] = p
        return p

    p = cmd("gen-model", _cmd_gen_model, "build a float model and save it")
    p.add_argument("--arch", choices=("backbone", "toy"), default="backbone")
    p.add_argument("--resolution", type=int, default=240)
    p.add_argument("--name", default="model")

    p = cmd("quantize", _cmd_quantize, "calibrate and quantize a float model")
    p.add_argument("--model", required=True, help="float model.json")
    p.add_argument("--plan", help="bit-width plan json (default: uniform)")
    p.add_argument("--weight-bits", type=int, default=8)
    p.add_argument("--act-bits", type=int, default=8)
    p.add_argument("--calib-images", type=int, default=4)
    p.add_argument("--name", default="quantized")

    p = cmd("lower", _cmd_lower, "lower a quantized model to integer nodes")
    p.add_argument("--model", required=True, help="quantized model.json")
    p.add_argument("--name", default="lowered")

    p = cmd("run", _cmd_run, "run a model on one image with its stage's engine")
    p.add_argument("--model", required=True)
    p.add_argument("--image", help="input .npy [C, H, W] (default: random)")
    p.add_argument("--trace", action="store_true", help="print per-node outputs")

    p = cmd("verify", _cmd_verify, "check lowered model against the reference")
    p.add_argument("--quantized", required=True)
    p.add_argument("--lowered", required=True)
    p.add_argument("--images", type=int, default=3)

    p = cmd("fold", _cmd_fold, "pick per-layer parallelism for a cycle budget")
    p.add_argument("--model", required=True, help="lowered model.json")
    p.add_argument("--target-fps", type=float, default=250.0)
    p.add_argument("--cycle-budget", type=int, help="overrides --target-fps")
    p.add_argument("--clock-mhz", type=float, default=187.5)
    p.add_argument("--name", default="folding")

    p = cmd("simulate", _cmd_simulate, "cycle-level pipeline simulation")
    p.add_argument("--model", required=True, help="lowered model.json")
    p.add_argument("--plan", help="folding plan json (default: fold first)")
    p.add_argument("--cycle-budget", type=int, default=750000)
    p.add_argument("--clock-mhz", type=float, default=187.5)
    p.add_argument("--fifo", choices=("default", "deep"), default="default")
    p.add_argument("--fifos", help="fifos.json with per-edge depths (overrides --fifo)")
    p.add_argument("--frames", type=int, default=6)
    p.add_argument("--power", type=float, help="board watts, adds fps/W")
    p.add_argument("--save", action="store_true", help="also write <name>.json")
    p.add_argument("--name", default="simulation")

    p = cmd("tune-fifos", _cmd_tune_fifos, "find small FIFO depths that keep full rate")
    p.add_argument("--model", required=True, help="lowered model.json")
    p.add_argument("--plan", help="folding plan json (default: fold first)")
    p.add_argument("--cycle-budget", type=int, default=750000)
    p.add_argument("--clock-mhz", type=float, default=187.5)
    p.add_argument("--frames", type=int, default=6)
    p.add_argument("--name", default="fifos")

    p = cmd("resources", _cmd_resources, "LUT/BRAM/DSP estimate for a folding")
    p.add_argument("--model", required=True, help="lowered model.json")
    p.add_argument("--plan", help="folding plan json (default: fold first)")
    p.add_argument("--cycle-budget", type=int, default=750000)
    p.add_argument("--clock-mhz", type=float, default=187.5)
    p.add_argument("--fifo", choices=("default", "deep"), default="default")
    p.add_argument("--fifos", help="fifos.json with per-edge depths (overrides --fifo)")
    p.add_argument("--per-node", action="store_true")
    p.add_argument("--save", action="store_true")
    p.add_argument("--name", default="resources")

    p = cmd("demo", _cmd_demo, "fork-join FIFO starvation demonstration")
    p.add_argument("--frames", type=int, default=5)
    p.add_argument("--shortcut-depth", type=int, default=1)

    p = cmd("sweep", _cmd_sweep, "per-layer quantization sensitivity sweep")
    p.add_argument("--model", required=True, help="float model.json")
    p.add_argument("--calib-images", type=int, default=4)
    p.add_argument("--probe-bits", type=int, default=1)
    p.add_argument("--base-bits", type=int, default=8)
    p.add_argument("--act-bits", type=int, default=8)
    p.add_argument("--name", default="sweep")

    p = cmd("select-bits", _cmd_select_bits, "turn a sweep into a bit-width plan")
    p.add_argument("--records", help="sweep csv from the sweep command")
    p.add_argument("--canned", action="store_true", help="use the frozen backbone sweep")
    p.add_argument("--ladder", default="6,4,4")
    p.add_argument("--base-bits", type=int, default=3)
    p.add_argument("--act-bits", type=int, default=4)
    p.add_argument("--name", default="plan")

    p = cmd("score", _cmd_score, "mean pose score of estimates vs ground truth")
    p.add_argument("--estimates", required=True, help="poses csv")
    p.add_argument("--truth", required=True, help="poses csv")

    p = cmd("energy", _cmd_energy, "frames per second per watt")
    p.add_argument("--fps", type=float, required=True)
    p.add_argument("--power", type=float, required=True)

    return parser, subs


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser, subs = build_parser()
    config_probe = argparse.ArgumentParser(add_help=False)
    config_probe.add_argument("--config")
    probed, _ = config_probe.parse_known_args(argv)
    if probed.config:
        try:
            with open(probed.config, "rb") as fh:
                defaults = {k.replace("-", "_"): v for k, v in tomllib.load(fh).items()}
        except (OSError, tomllib.TOMLDecodeError) as exc:
            print(f"error: cannot read config {probed.config}: {exc}", file=sys.stderr)
            return 1
        for p in subs.values():
            p.set_defaults(**defaults)
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except BrokenPipeError:
        return 1
    except Exception as exc:  # one-line failure contract for scripting
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
