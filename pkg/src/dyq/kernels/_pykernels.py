"""Numpy kernel backend: the portable fallback for the compiled core.

All functions take int32 code arrays, widen to int64 internally, and raise
:class:`AccumulatorOverflow` as soon as any partial sum (in the fixed
accumulation order: ``k`` ascending for matmul, ``(ci, kh, kw)`` for
convolution) leaves the signed 32-bit range.  The compiled backend checks the
same partial sums in the same order, so both report errors identically.
"""

import numpy as np

from ..errors import AccumulatorOverflow

NAME = "numpy"

INT32_MIN = -(1 << 31)
INT32_MAX = (1 << 31) - 1


def _check_i32(arr, what):
    if arr.size and (arr.max(initial=0) > INT32_MAX or arr.min(initial=0) < INT32_MIN):
        raise AccumulatorOverflow(f"{what} partial sum exceeds int32")


def matmul_i32(qw, qh, zh):
    """acc[i, j] = sum_k qw[i, k] * (qh[k, j] - zh), INT32 accumulation."""
    qw64 = qw.astype(np.int64)
    rhs = qh.astype(np.int64) - int(zh)
    acc = qw64 @ rhs
    # L1 bound dominates every prefix; only walk the prefixes when it trips.
    bound = np.abs(qw64) @ np.abs(rhs)
    if bound.size and bound.max(initial=0) > INT32_MAX:
        prefix = np.cumsum(qw64[:, :, None] * rhs[None, :, :], axis=1)
        _check_i32(prefix, "matmul")
    return acc.astype(np.int32)


def conv2d_i32(qw, qh, stride, pad, zh, pad_code):
    """Direct NCHW convolution with integer MACs.

    Padding positions take the code ``pad_code`` before the ``- zh``
    correction, so a pad code equal to the input zero point contributes an
    exact real zero.
    """
    n, ci, h, w = qh.shape
    co, _, kh, kw = qw.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    padded = np.full((n, ci, h + 2 * pad, w + 2 * pad), int(pad_code), dtype=np.int64)
    padded[:, :, pad : pad + h, pad : pad + w] = qh
    centered = padded - int(zh)
    qw64 = qw.astype(np.int64)
    acc = np.zeros((n, co, oh, ow), dtype=np.int64)
    for c in range(ci):
        for i in range(kh):
            for j in range(kw):
                patch = centered[
                    :, c, i : i + oh * stride : stride, j : j + ow * stride : stride
                ]
                acc += qw64[None, :, c, i, j, None, None] * patch[:, None, :, :]
                _check_i32(acc, "conv2d")
    return acc.astype(np.int32)


def maxpool_i32(x, window, stride, pad):
    """Max pooling over valid cells; padded cells never win."""
    n, c, h, w = x.shape
    oh = (h + 2 * pad - window) // stride + 1
    ow = (w + 2 * pad - window) // stride + 1
    padded = np.full((n, c, h + 2 * pad, w + 2 * pad), INT32_MIN, dtype=np.int32)
    padded[:, :, pad : pad + h, pad : pad + w] = x
    out = np.full((n, c, oh, ow), INT32_MIN, dtype=np.int32)
    for i in range(window):
        for j in range(window):
            patch = padded[
                :, :, i : i + oh * stride : stride, j : j + ow * stride : stride
            ]
            np.maximum(out, patch, out=out)
    return out


def sumpool_i32(x, window, stride):
    """Window sums in INT32 (the 1/area factor is the caller's rescale)."""
    n, c, h, w = x.shape
    oh = (h - window) // stride + 1
    ow = (w - window) // stride + 1
    acc = np.zeros((n, c, oh, ow), dtype=np.int64)
    for i in range(window):
        for j in range(window):
            acc += x[:, :, i : i + oh * stride : stride, j : j + ow * stride : stride]
            _check_i32(acc, "sum-pool")
    return acc.astype(np.int32)


def requant_rows_i64(acc, mant, expo):
    """Rounded dyadic rescale of each row: round(acc[r] * mant[r] / 2^expo[r]).

    ``acc`` is (rows, m) int64-compatible; ties round away from zero.  The
    result is int64; callers clamp to the target bit-width.
    """
    t = acc.astype(np.int64) * mant[:, None].astype(np.int64)
    shift = expo[:, None].astype(np.int64)
    offset = np.where(shift > 0, np.int64(1) << np.maximum(shift - 1, 0), np.int64(0))
    mag = (np.abs(t) + offset) >> shift
    return np.where(t < 0, -mag, mag)
