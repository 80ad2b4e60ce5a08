"""Integer-only lowering, simulation, and evaluation for quantized CNNs.

The package covers the post-training path from a float convolutional graph
to a deployable estimate: per-channel quantization, lowering to a threshold
based integer streaming graph, bit-exact execution, per-layer parallelism
selection, cycle-level pipeline simulation, resource and energy estimates,
layer sensitivity sweeps, and pose scoring for the end task.
"""

from __future__ import annotations

__version__ = "0.1.0"

from .backbone import build_backbone, backbone_conv_ids, count_macs, count_params
from .engine import (
    AccumulatorOverflowError,
    ComparisonReport,
    ExecutionTrace,
    compare_engines,
    fnv1a64,
    quantize_input,
    run_float,
    run_int,
    run_reference,
    tensor_checksum,
)
from .folding import (
    FoldingError,
    FoldingPlan,
    fold_graph,
    max_node_cycles,
    node_cycles,
    theoretical_fps,
)
from .graph import Graph, GraphError, LayerNode, conv_out_hw, graphs_equal
from .lowering import (
    AffineSpec,
    ThresholdUnit,
    compute_thresholds,
    fold_batchnorm,
    multithreshold_eval,
    quantizer_affine,
    streamline_to_integer,
)
from .model_io import load_model, save_model
from .pipeline_sim import DeadlockError, FifoConfig, SimReport, simulate, tune_fifos
from .pose import (
    decode_orientation,
    esa_score,
    mean_esa,
    orientation_error,
    position_error,
    quaternion_grid,
    relative_position_error,
)
from .qtensor import (
    QuantTensor,
    calibration_scale,
    dequantize,
    quant_range,
    quantize_per_channel,
    quantize_with_scale,
    round_half_even,
)
from .quantize import BitWidthPlan, quantize_graph
from .resources import (
    CostModelConfig,
    EnergyReport,
    ResourceBudget,
    ResourceReport,
    energy_metrics,
    estimate_resources,
)
from .sensitivity import (
    SelectionPolicy,
    SensitivityRecord,
    select_bitwidths,
    sensitivity_sweep,
)
from .synthetic import synth_images, toy_model

__all__ = [
    "AccumulatorOverflowError",
    "AffineSpec",
    "BitWidthPlan",
    "ComparisonReport",
    "CostModelConfig",
    "DeadlockError",
    "EnergyReport",
    "ExecutionTrace",
    "FifoConfig",
    "FoldingError",
    "FoldingPlan",
    "Graph",
    "GraphError",
    "LayerNode",
    "QuantTensor",
    "ResourceBudget",
    "ResourceReport",
    "SelectionPolicy",
    "SensitivityRecord",
    "SimReport",
    "ThresholdUnit",
    "backbone_conv_ids",
    "build_backbone",
    "calibration_scale",
    "compare_engines",
    "compute_thresholds",
    "conv_out_hw",
    "count_macs",
    "count_params",
    "decode_orientation",
    "dequantize",
    "energy_metrics",
    "esa_score",
    "estimate_resources",
    "fnv1a64",
    "fold_batchnorm",
    "fold_graph",
    "graphs_equal",
    "load_model",
    "max_node_cycles",
    "mean_esa",
    "multithreshold_eval",
    "node_cycles",
    "orientation_error",
    "position_error",
    "quant_range",
    "quantize_graph",
    "quantize_input",
    "quantize_per_channel",
    "quantize_with_scale",
    "quantizer_affine",
    "quaternion_grid",
    "relative_position_error",
    "round_half_even",
    "run_float",
    "run_int",
    "run_reference",
    "save_model",
    "select_bitwidths",
    "sensitivity_sweep",
    "simulate",
    "streamline_to_integer",
    "synth_images",
    "tensor_checksum",
    "theoretical_fps",
    "toy_model",
    "tune_fifos",
]
