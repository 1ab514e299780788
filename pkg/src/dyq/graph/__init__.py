"""Model graph, batch-norm folding, quantized build, and both executors."""

from .model import (
    AddNode,
    AvgPoolNode,
    BatchNorm,
    ConcatNode,
    ConvNode,
    FcNode,
    FloatModel,
    InputNode,
    MaxPoolNode,
    ReluNode,
    conv2d_f32,
    float_forward,
    fold_bn,
)
from .engine import (
    DivergenceReport,
    QuantGraph,
    build_quant_graph,
    calibrate,
    infer_fake,
    infer_true,
    measure_divergence,
    run_fake,
    run_true,
    uniform_bit_config,
)
from .manifest import (
    load_float_model,
    load_quant_graph,
    load_ranges,
    save_float_model,
    save_quant_graph,
    save_ranges,
)

__all__ = [
    "AddNode",
    "AvgPoolNode",
    "BatchNorm",
    "ConcatNode",
    "ConvNode",
    "DivergenceReport",
    "FcNode",
    "FloatModel",
    "InputNode",
    "MaxPoolNode",
    "QuantGraph",
    "ReluNode",
    "build_quant_graph",
    "calibrate",
    "conv2d_f32",
    "float_forward",
    "fold_bn",
    "infer_fake",
    "infer_true",
    "load_float_model",
    "load_quant_graph",
    "load_ranges",
    "measure_divergence",
    "run_fake",
    "run_true",
    "save_float_model",
    "save_quant_graph",
    "save_ranges",
    "uniform_bit_config",
]
