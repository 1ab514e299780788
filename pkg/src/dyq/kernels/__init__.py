"""Integer compute primitives with a compiled core and a numpy fallback.

The compiled extension (``dyq.kernels._ckernels``) is used when it imported
cleanly; otherwise the numpy backend takes over.  ``DYQ_KERNEL_BACKEND`` can
force either one (``c`` / ``numpy``).  Both backends are bit-identical,
including the accumulation order their overflow checks observe.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from ..errors import ShapeError
from ..tensor import PackedTensor, Shape, pack, unpack_array
from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built; numpy backend carries the load
    _ckernels = None

_BACKENDS = {"numpy": _pykernels}
if _ckernels is not None:
    _BACKENDS["c"] = _ckernels

_forced = os.environ.get("DYQ_KERNEL_BACKEND", "auto").strip().lower()
if _forced in ("", "auto"):
    _active = _ckernels if _ckernels is not None else _pykernels
elif _forced in _BACKENDS:
    _active = _BACKENDS[_forced]
else:
    raise ImportError(
        f"DYQ_KERNEL_BACKEND={_forced!r} unavailable; have {sorted(_BACKENDS)}"
    )


def backend_name() -> str:
    return _active.NAME


def available_backends() -> tuple:
    return tuple(sorted(_BACKENDS))


def get_backend(name: str):
    return _BACKENDS[name]


INT32_MIN = _pykernels.INT32_MIN
INT32_MAX = _pykernels.INT32_MAX


@dataclass(frozen=True)
class ConvSpec:
    """Hyperparameters of a 2-D convolution."""

    in_channels: int
    out_channels: int
    kernel_h: int
    kernel_w: int
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if min(self.in_channels, self.out_channels, self.kernel_h, self.kernel_w) < 1:
            raise ShapeError("channels and kernel extents must be >= 1")
        if self.stride < 1:
            raise ShapeError("stride must be >= 1")
        if self.padding < 0:
            raise ShapeError("padding must be >= 0")

    def out_hw(self, h, w) -> tuple:
        oh = (h + 2 * self.padding - self.kernel_h) // self.stride + 1
        ow = (w + 2 * self.padding - self.kernel_w) // self.stride + 1
        if oh < 1 or ow < 1:
            raise ShapeError(f"conv output collapses for input {h}x{w} with {self}")
        return oh, ow


@dataclass(frozen=True)
class Accumulator:
    """INT32 accumulation result of a matmul/conv before requantization."""

    shape: Shape
    data: np.ndarray

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.int32)
        shape = self.shape if isinstance(self.shape, Shape) else Shape(self.shape)
        if data.size != shape.volume:
            raise ShapeError("accumulator payload does not match its shape")
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "data", data.reshape(shape.dims))


# ---------------------------------------------------------------------------
# Array-level entry points used by the executors (codes in, codes out).
# ---------------------------------------------------------------------------


def matmul_codes(qw, qh, zh=0, counter=None) -> np.ndarray:
    qw = np.asarray(qw, dtype=np.int32)
    qh = np.asarray(qh, dtype=np.int32)
    if qw.ndim != 2 or qh.ndim != 2 or qw.shape[1] != qh.shape[0]:
        raise ShapeError(f"matmul shapes {qw.shape} x {qh.shape} do not agree")
    out = _active.matmul_i32(qw, qh, int(zh))
    if counter is not None:
        counter.count_mac(qw.shape[0] * qw.shape[1] * qh.shape[1])
    return out


def conv2d_codes(qw, qh, spec: ConvSpec, zh=0, pad_code=None, counter=None):
    qw = np.asarray(qw, dtype=np.int32)
    qh = np.asarray(qh, dtype=np.int32)
    if qw.shape != (spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w):
        raise ShapeError(f"weight shape {qw.shape} does not match {spec}")
    if qh.ndim != 4 or qh.shape[1] != spec.in_channels:
        raise ShapeError(f"input shape {qh.shape} does not match {spec}")
    oh, ow = spec.out_hw(qh.shape[2], qh.shape[3])
    if pad_code is None:
        pad_code = zh  # pad with the code of real zero
    out = _active.conv2d_i32(
        qw, qh, spec.stride, spec.padding, int(zh), int(pad_code)
    )
    if counter is not None:
        macs = qh.shape[0] * spec.out_channels * oh * ow
        macs *= spec.in_channels * spec.kernel_h * spec.kernel_w
        counter.count_mac(macs)
    return out


def maxpool_codes(x, window, stride, padding=0, counter=None):
    x = np.asarray(x, dtype=np.int32)
    out = _active.maxpool_i32(x, int(window), int(stride), int(padding))
    if counter is not None:
        counter.count_cmp(out.size * window * window)
    return out


def sumpool_codes(x, window, stride, counter=None):
    x = np.asarray(x, dtype=np.int32)
    out = _active.sumpool_i32(x, int(window), int(stride))
    if counter is not None:
        counter.count_add(out.size * window * window)
    return out


def requant_channelwise(acc, mant, expo, axis=1, counter=None) -> np.ndarray:
    """Dyadic rescale with one (mant, expo) pair per channel along ``axis``.

    Returns int64 (unclamped); pair with :func:`clamp_codes`.
    """
    acc = np.asarray(acc)
    mant = np.atleast_1d(np.asarray(mant, dtype=np.int64))
    expo = np.atleast_1d(np.asarray(expo, dtype=np.int64))
    if mant.shape[0] == 1 and acc.shape[axis] != 1:
        rows = acc.reshape(1, -1)
        out = _active.requant_rows_i64(rows, mant, expo).reshape(acc.shape)
    else:
        if mant.shape[0] != acc.shape[axis]:
            raise ShapeError(
                f"{mant.shape[0]} rescale channels for axis of {acc.shape[axis]}"
            )
        moved = np.moveaxis(acc, axis, 0)
        rows = np.ascontiguousarray(moved.reshape(acc.shape[axis], -1))
        out = _active.requant_rows_i64(rows, mant, expo).reshape(moved.shape)
        out = np.moveaxis(out, 0, axis)
    if counter is not None:
        counter.count_requant(acc.size)
    return out


def clamp_codes(vals, bits, floor=None, counter=None) -> np.ndarray:
    """Saturate int64 values to the signed range of ``bits`` (int32 out)."""
    lo = -(1 << (bits - 1))
    hi = (1 << (bits - 1)) - 1
    if floor is not None:
        lo = max(lo, int(floor))
    out = np.clip(np.asarray(vals), lo, hi).astype(np.int32)
    if counter is not None:
        counter.count_cmp(2 * out.size)
    return out


# ---------------------------------------------------------------------------
# PackedTensor-level operations.
# ---------------------------------------------------------------------------


def int_matmul(qw: PackedTensor, qh: PackedTensor, zh=0, counter=None) -> Accumulator:
    """Low-precision integer matmul with INT32 accumulation.

    ``zh`` is the activation zero point; weights are symmetric so only the
    right operand is corrected.
    """
    for t, side in ((qw, "lhs"), (qh, "rhs")):
        if t.bits not in (4, 8):
            raise ShapeError(f"{side} must be 4- or 8-bit, got {t.bits}")
        if len(t.shape) != 2:
            raise ShapeError(f"{side} must be rank 2, got rank {len(t.shape)}")
    out = matmul_codes(unpack_array(qw), unpack_array(qh), zh, counter)
    return Accumulator(Shape(out.shape), out)


def int_conv2d(
    qw: PackedTensor, qh: PackedTensor, spec: ConvSpec, zh=0, counter=None
) -> Accumulator:
    """Direct integer convolution; padding contributes the code ``zh``."""
    if qw.bits not in (4, 8) or qh.bits not in (4, 8):
        raise ShapeError("conv operands must be 4- or 8-bit")
    out = conv2d_codes(
        unpack_array(qw), unpack_array(qh), spec, zh=zh, pad_code=zh, counter=counter
    )
    return Accumulator(Shape(out.shape), out)


def pool_int32(t: PackedTensor, kind, window, stride, padding=0) -> PackedTensor:
    """INT32 pooling; ``avg`` yields window sums (1/area folds downstream)."""
    if t.bits != 32:
        raise ShapeError(f"pooling runs on INT32 tensors, got {t.bits}-bit")
    if padding > window // 2:
        raise ShapeError(f"padding {padding} exceeds half the {window}-wide window")
    x = unpack_array(t)
    if kind == "max":
        out = maxpool_codes(x, window, stride, padding)
    elif kind == "avg":
        if padding != 0:
            raise ShapeError("avg pooling does not support padding")
        out = sumpool_codes(x, window, stride)
    else:
        raise ValueError(f"unknown pooling kind {kind!r}")
    return pack(out.ravel(), 32, Shape(out.shape))


def relu_codes(q, zero_code, counter=None):
    """max(q, Z) elementwise, where Z is the code of real zero."""
    if isinstance(q, PackedTensor):
        out = np.maximum(unpack_array(q), int(zero_code))
        if counter is not None:
            counter.count_cmp(out.size)
        return pack(out.ravel(), q.bits, q.shape)
    arr = np.asarray(q)
    if counter is not None:
        counter.count_cmp(arr.size)
    return np.maximum(arr, np.int32(zero_code) if arr.dtype.kind in "iu" else zero_code)
