"""Quantization parameters, quantize/dequantize, and calibration tracking.

Conventions: weights use symmetric per-channel scales with zero point 0;
activations use per-tensor asymmetric parameters stored as signed codes.
A code ``q`` represents the real value ``S * (q - Z)``, so real zero maps
exactly to code ``Z`` (``Z = 0`` for the symmetric scheme).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateRange, MissingCalibration, ShapeError
from .tensor import FloatTensor, PackedTensor, Shape, pack, unpack_array

PER_TENSOR = "per_tensor"
PER_CHANNEL = "per_channel"


def round_ties_away(x) -> np.ndarray:
    """Round to nearest integer, halves away from zero."""
    x = np.asarray(x, dtype=np.float64)
    mag = np.floor(np.abs(x) + 0.5)
    return np.where(x < 0.0, -mag, mag).astype(np.int64)


@dataclass(frozen=True)
class QuantParams:
    """Scale/zero-point/bit-width bundle for one tensor or channel axis."""

    scale: object  # float, or 1-D ndarray for per-channel
    zero_point: int = 0
    bits: int = 8
    granularity: str = PER_TENSOR
    channel_axis: int = 0

    def __post_init__(self):
        if self.bits not in (4, 8, 32):
            raise ValueError(f"unsupported bit-width {self.bits}")
        if self.granularity not in (PER_TENSOR, PER_CHANNEL):
            raise ValueError(f"unknown granularity {self.granularity!r}")
        if self.granularity == PER_CHANNEL:
            scale = np.asarray(self.scale, dtype=np.float64)
            if scale.ndim != 1:
                raise ShapeError("per-channel scale must be a 1-D vector")
            if self.zero_point != 0:
                raise ValueError("per-channel parameters are symmetric (Z=0)")
            object.__setattr__(self, "scale", scale)
        else:
            scale = float(self.scale)
            object.__setattr__(self, "scale", scale)
        if np.any(np.asarray(self.scale) <= 0.0):
            raise DegenerateRange("scale must be positive")
        object.__setattr__(self, "zero_point", int(self.zero_point))

    @property
    def qmin(self):
        return -(1 << (self.bits - 1))

    @property
    def qmax(self):
        return (1 << (self.bits - 1)) - 1


def symmetric_scale(r_min, r_max, bits) -> float:
    """Symmetric scale 2*max(|r_min|,|r_max|) / (2^bits - 1)."""
    if bits not in (4, 8):
        raise ValueError(f"symmetric scale defined for 4/8 bits, got {bits}")
    m = max(abs(float(r_min)), abs(float(r_max)))
    if m == 0.0:
        raise DegenerateRange("symmetric range is identically zero")
    return 2.0 * m / float((1 << bits) - 1)


def asymmetric_params(r_min, r_max, bits) -> tuple:
    """Asymmetric (scale, zero_point); callers widen the range to cover 0 first."""
    if bits not in (4, 8):
        raise ValueError(f"asymmetric params defined for 4/8 bits, got {bits}")
    r_min, r_max = float(r_min), float(r_max)
    if not r_max > r_min:
        raise DegenerateRange(f"degenerate range [{r_min}, {r_max}]")
    scale = (r_max - r_min) / float((1 << bits) - 1)
    zero_point = int(round_ties_away(-r_min / scale)) - (1 << (bits - 1))
    return scale, zero_point


def weight_channel_scales(weight: np.ndarray, bits) -> np.ndarray:
    """Per-output-channel symmetric scales; all-zero channels get scale 1."""
    w = np.asarray(weight, dtype=np.float64)
    peak = np.max(np.abs(w.reshape(w.shape[0], -1)), axis=1)
    dead = peak == 0.0
    if np.any(dead):
        warnings.warn(
            f"{int(dead.sum())} all-zero channel(s); using scale 1.0 for them",
            stacklevel=2,
        )
    scales = np.where(dead, 1.0, 2.0 * peak / float((1 << bits) - 1))
    return scales


def _scale_for_broadcast(p: QuantParams, ndim: int):
    if p.granularity == PER_TENSOR:
        return p.scale
    shape = [1] * ndim
    shape[p.channel_axis] = -1
    return np.asarray(p.scale).reshape(shape)


def quantize(r, p: QuantParams, counter=None) -> PackedTensor:
    """Map real values to codes: clamp(round(r/S) + Z) at ``p.bits``."""
    arr = r.data if isinstance(r, FloatTensor) else np.asarray(r, dtype=np.float32)
    scale = _scale_for_broadcast(p, arr.ndim)
    if p.granularity == PER_CHANNEL and arr.shape[p.channel_axis] != np.asarray(
        p.scale
    ).shape[0]:
        raise ShapeError(
            f"per-channel scale length {np.asarray(p.scale).shape[0]} does not "
            f"match axis {p.channel_axis} of shape {arr.shape}"
        )
    q = round_ties_away(arr / scale) + p.zero_point
    q = np.clip(q, p.qmin, p.qmax)
    if counter is not None:
        counter.count_float(2 * arr.size)  # divide + round in float
    return pack(q.ravel(), p.bits, Shape(arr.shape))


def dequantize(q: PackedTensor, p: QuantParams, counter=None) -> FloatTensor:
    """Recover real values S * (q - Z)."""
    codes = unpack_array(q).astype(np.float64)
    scale = _scale_for_broadcast(p, codes.ndim)
    out = (codes - p.zero_point) * scale
    if counter is not None:
        counter.count_float(2 * codes.size)
    return FloatTensor(q.shape, out.astype(np.float32))


def dequantize_codes(codes: np.ndarray, p: QuantParams) -> np.ndarray:
    """:func:`dequantize` for raw code arrays, returning float32."""
    scale = _scale_for_broadcast(p, np.asarray(codes).ndim)
    return ((np.asarray(codes, dtype=np.float64) - p.zero_point) * scale).astype(
        np.float32
    )


@dataclass
class RangeTracker:
    """Momentum-tracked running extrema of a stream of batches."""

    momentum: float = 0.99
    running_min: float = 0.0
    running_max: float = 0.0
    observed: bool = False

    def __post_init__(self):
        if not 0.0 < self.momentum < 1.0:
            raise ValueError(f"momentum must lie in (0, 1), got {self.momentum}")

    def update(self, batch_min, batch_max):
        batch_min, batch_max = float(batch_min), float(batch_max)
        if not self.observed:
            self.running_min = batch_min
            self.running_max = batch_max
            self.observed = True
        else:
            m = self.momentum
            self.running_min = m * self.running_min + (1.0 - m) * batch_min
            self.running_max = m * self.running_max + (1.0 - m) * batch_max

    def range(self) -> tuple:
        """Final (r_min, r_max), widened so real zero is representable."""
        if not self.observed:
            raise MissingCalibration("range tracker never saw a batch")
        return min(self.running_min, 0.0), max(self.running_max, 0.0)


def track(tracker: RangeTracker, batch) -> RangeTracker:
    """Fold one batch's extrema into the tracker (first batch seeds it)."""
    arr = batch.data if isinstance(batch, FloatTensor) else np.asarray(batch)
    if arr.size == 0:
        raise ShapeError("cannot track an empty batch")
    tracker.update(arr.min(), arr.max())
    return tracker
