"""dyq: integer-only quantized inference with dyadic rescaling.

The package quantizes small CNN/MLP models to 4/8-bit integer graphs whose
forward pass uses nothing but integer multiply, add, and bit shifts, keeps a
float "simulated quantization" twin of the same graph for divergence studies,
and plans per-layer bit-widths with an exact branch-and-bound allocator under
size / bit-operation / latency budgets.
"""

__version__ = "0.1.0"

from .errors import (
    AccumulatorOverflow,
    DegenerateRange,
    DomainError,
    DyqError,
    FormatError,
    Infeasible,
    MissingCalibration,
    MissingLatencyEntry,
    NumericalError,
    RangeError,
    ShapeError,
)
from .tensor import FloatTensor, PackedTensor, Shape, pack, read_container, unpack, write_container
from .quantizer import QuantParams, RangeTracker, asymmetric_params, dequantize, quantize, symmetric_scale, track
from .dyadic import DyadicScale, dn, requantize, requantize_clamped
from .instrument import OpCounter

__all__ = [
    "AccumulatorOverflow",
    "DegenerateRange",
    "DomainError",
    "DyadicScale",
    "DyqError",
    "FloatTensor",
    "FormatError",
    "Infeasible",
    "MissingCalibration",
    "MissingLatencyEntry",
    "NumericalError",
    "OpCounter",
    "PackedTensor",
    "QuantParams",
    "RangeError",
    "RangeTracker",
    "Shape",
    "ShapeError",
    "asymmetric_params",
    "dequantize",
    "dn",
    "pack",
    "quantize",
    "read_container",
    "requantize",
    "requantize_clamped",
    "symmetric_scale",
    "track",
    "unpack",
    "write_container",
]
