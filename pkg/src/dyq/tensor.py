"""Dense tensors, low-bit integer packing, and the on-disk container format.

Packed layout: signed values are stored in 32-bit words, ``32 // bits``
elements per word, with element ``i`` occupying the bit-field
``[bits*(i % per), bits*(i % per) + bits)`` of word ``i // per`` (field 0 is
least significant).  Words are little-endian on disk.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, RangeError, ShapeError

PACK_BITS = (4, 8, 32)

_MAGIC = b"DYQT"
_VERSION = 1
_HEADER = struct.Struct("<4sHBBB3x")
_DTYPE_F32 = 0
_DTYPE_PACKED = 1


@dataclass(frozen=True)
class Shape:
    """Tensor extents: NCHW for rank 4, [rows, cols] for rank 2."""

    dims: tuple

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) not in (1, 2, 4):
            raise ShapeError(f"rank must be 1, 2 or 4, got {len(dims)}")
        if any(d < 1 for d in dims):
            raise ShapeError(f"all dims must be >= 1, got {dims}")
        object.__setattr__(self, "dims", dims)

    @property
    def volume(self):
        n = 1
        for d in self.dims:
            n *= d
        return n

    def __iter__(self):
        return iter(self.dims)

    def __len__(self):
        return len(self.dims)


def as_shape(shape) -> Shape:
    return shape if isinstance(shape, Shape) else Shape(tuple(shape))


@dataclass(frozen=True)
class FloatTensor:
    """IEEE-754 float32 tensor, row-major, all values finite."""

    shape: Shape
    data: np.ndarray

    def __post_init__(self):
        shape = as_shape(self.shape)
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.size != shape.volume:
            raise ShapeError(
                f"data has {data.size} values, shape {shape.dims} needs {shape.volume}"
            )
        if not np.all(np.isfinite(data)):
            raise RangeError("float tensor contains NaN or Inf")
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "data", data.reshape(shape.dims))

    @classmethod
    def from_array(cls, arr) -> "FloatTensor":
        arr = np.asarray(arr, dtype=np.float32)
        return cls(Shape(arr.shape), arr)


@dataclass(frozen=True)
class PackedTensor:
    """Signed integers at 4/8/32 bits packed into int32 words."""

    shape: Shape
    bits: int
    words: np.ndarray

    def __post_init__(self):
        shape = as_shape(self.shape)
        if self.bits not in PACK_BITS:
            raise RangeError(f"bits must be one of {PACK_BITS}, got {self.bits}")
        words = np.ascontiguousarray(self.words, dtype=np.int32).ravel()
        per = 32 // self.bits
        expect = -(-shape.volume // per)
        if words.size != expect:
            raise ShapeError(
                f"{shape.volume} elements at {self.bits} bits need {expect} words, "
                f"got {words.size}"
            )
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "words", words)

    @property
    def qmin(self):
        return -(1 << (self.bits - 1))

    @property
    def qmax(self):
        return (1 << (self.bits - 1)) - 1


def pack(values, bits, shape) -> PackedTensor:
    """Pack in-range signed integers into a :class:`PackedTensor`."""
    shape = as_shape(shape)
    vals = np.asarray(values)
    if vals.dtype.kind not in "iu":
        if vals.dtype.kind == "f" and not np.all(vals == np.floor(vals)):
            raise RangeError("pack expects integers, got fractional values")
        vals = vals.astype(np.int64)
    vals = vals.astype(np.int64).ravel()
    if vals.size != shape.volume:
        raise ShapeError(f"{vals.size} values for shape of volume {shape.volume}")
    lo, hi = -(1 << (bits - 1)), (1 << (bits - 1)) - 1
    if bits not in PACK_BITS:
        raise RangeError(f"bits must be one of {PACK_BITS}, got {bits}")
    if vals.size and (vals.min() < lo or vals.max() > hi):
        raise RangeError(f"value outside [{lo}, {hi}] for {bits}-bit packing")
    if bits == 32:
        return PackedTensor(shape, bits, vals.astype(np.int32))
    per = 32 // bits
    nwords = -(-vals.size // per)
    mask = (1 << bits) - 1
    lanes = np.zeros(nwords * per, dtype=np.uint32)
    lanes[: vals.size] = (vals & mask).astype(np.uint32)
    shifts = (np.arange(per, dtype=np.uint32) * bits).astype(np.uint32)
    words = np.bitwise_or.reduce(lanes.reshape(nwords, per) << shifts, axis=1)
    return PackedTensor(shape, bits, words.view(np.int32))


def unpack(t: PackedTensor) -> np.ndarray:
    """Sign-extended elements of ``t`` as a flat int32 array."""
    if t.bits == 32:
        return t.words.copy()
    per = 32 // t.bits
    mask = (1 << t.bits) - 1
    shifts = (np.arange(per, dtype=np.uint32) * t.bits).astype(np.uint32)
    lanes = (t.words.view(np.uint32)[:, None] >> shifts) & mask
    flat = lanes.reshape(-1)[: t.shape.volume].astype(np.int64)
    sign = 1 << (t.bits - 1)
    return ((flat ^ sign) - sign).astype(np.int32)


def unpack_array(t: PackedTensor) -> np.ndarray:
    """Like :func:`unpack` but reshaped to the tensor's dims."""
    return unpack(t).reshape(t.shape.dims)


def _payload(tensor) -> tuple:
    if isinstance(tensor, FloatTensor):
        return _DTYPE_F32, 0, tensor.data.astype("<f4").tobytes()
    if isinstance(tensor, PackedTensor):
        return _DTYPE_PACKED, tensor.bits, tensor.words.astype("<i4").tobytes()
    raise TypeError(f"cannot serialize {type(tensor).__name__}")


def write_container(tensor, dest):
    """Write one tensor container to a path or an open binary stream."""
    dtype, bits, payload = _payload(tensor)
    dims = tensor.shape.dims
    header = _HEADER.pack(_MAGIC, _VERSION, dtype, bits, len(dims))
    header += struct.pack(f"<{len(dims)}I", *dims)
    if hasattr(dest, "write"):
        dest.write(header)
        dest.write(payload)
    else:
        with open(dest, "wb") as fh:
            fh.write(header)
            fh.write(payload)


def _read_exact(fh, n, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"container truncated while reading {what}")
    return buf


def read_container(src):
    """Read one tensor container from a path or an open binary stream."""
    if hasattr(src, "read"):
        return _read_stream(src)
    with open(src, "rb") as fh:
        return _read_stream(fh)


def _read_stream(fh):
    magic, version, dtype, bits, rank = _HEADER.unpack(
        _read_exact(fh, _HEADER.size, "header")
    )
    if magic != _MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != _VERSION:
        raise FormatError(f"unsupported container version {version}")
    if rank not in (1, 2, 4):
        raise FormatError(f"unsupported rank {rank}")
    dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, "dims"))
    shape = Shape(dims)
    if dtype == _DTYPE_F32:
        if bits != 0:
            raise FormatError("float container must declare bits=0")
        raw = _read_exact(fh, 4 * shape.volume, "float payload")
        return FloatTensor(shape, np.frombuffer(raw, dtype="<f4"))
    if dtype == _DTYPE_PACKED:
        if bits not in PACK_BITS:
            raise FormatError(f"bad packed bit-width {bits}")
        per = 32 // bits
        nwords = -(-shape.volume // per)
        raw = _read_exact(fh, 4 * nwords, "packed payload")
        return PackedTensor(shape, bits, np.frombuffer(raw, dtype="<i4"))
    raise FormatError(f"unknown dtype tag {dtype}")
