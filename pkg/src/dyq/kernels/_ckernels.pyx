# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernel core: hot integer loops behind the same API as the
numpy backend.  Partial sums are checked against the INT32 range after
every MAC, in the same accumulation order the fallback uses."""

import numpy as np

cimport numpy as cnp

from ..errors import AccumulatorOverflow

cnp.import_array()

NAME = "c"

cdef long long INT32_MIN_LL = -(<long long>1 << 31)
cdef long long INT32_MAX_LL = (<long long>1 << 31) - 1


def matmul_i32(qw, qh, long long zh):
    cdef cnp.int32_t[:, ::1] a = np.ascontiguousarray(qw, dtype=np.int32)
    cdef cnp.int32_t[:, ::1] b = np.ascontiguousarray(qh, dtype=np.int32)
    cdef Py_ssize_t m = a.shape[0], k = a.shape[1], n = b.shape[1]
    out_arr = np.empty((m, n), dtype=np.int32)
    cdef cnp.int32_t[:, ::1] out = out_arr
    cdef Py_ssize_t i, j, p
    cdef long long acc, term
    cdef bint overflow = 0
    with nogil:
        for i in range(m):
            for j in range(n):
                acc = 0
                for p in range(k):
                    term = <long long>a[i, p] * (<long long>b[p, j] - zh)
                    acc += term
                    if acc > INT32_MAX_LL or acc < INT32_MIN_LL:
                        overflow = 1
                        break
                if overflow:
                    break
                out[i, j] = <cnp.int32_t>acc
            if overflow:
                break
    if overflow:
        raise AccumulatorOverflow("matmul partial sum exceeds int32")
    return out_arr


def conv2d_i32(qw, qh, Py_ssize_t stride, Py_ssize_t pad, long long zh,
               long long pad_code):
    cdef cnp.int32_t[:, :, :, ::1] w = np.ascontiguousarray(qw, dtype=np.int32)
    cdef cnp.int32_t[:, :, :, ::1] x = np.ascontiguousarray(qh, dtype=np.int32)
    cdef Py_ssize_t n = x.shape[0], ci = x.shape[1], h = x.shape[2], ww = x.shape[3]
    cdef Py_ssize_t co = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t oh = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t ow = (ww + 2 * pad - kw) // stride + 1
    out_arr = np.empty((n, co, oh, ow), dtype=np.int32)
    cdef cnp.int32_t[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, o, y, xx, c, i, j, iy, ix
    cdef long long acc, v
    cdef bint overflow = 0
    with nogil:
        for b in range(n):
            for o in range(co):
                for y in range(oh):
                    for xx in range(ow):
                        acc = 0
                        for c in range(ci):
                            for i in range(kh):
                                iy = y * stride - pad + i
                                for j in range(kw):
                                    ix = xx * stride - pad + j
                                    if 0 <= iy < h and 0 <= ix < ww:
                                        v = x[b, c, iy, ix]
                                    else:
                                        v = pad_code
                                    acc += <long long>w[o, c, i, j] * (v - zh)
                                    if acc > INT32_MAX_LL or acc < INT32_MIN_LL:
                                        overflow = 1
                                        break
                                if overflow:
                                    break
                            if overflow:
                                break
                        if overflow:
                            break
                        out[b, o, y, xx] = <cnp.int32_t>acc
                    if overflow:
                        break
                if overflow:
                    break
            if overflow:
                break
    if overflow:
        raise AccumulatorOverflow("conv2d partial sum exceeds int32")
    return out_arr


def maxpool_i32(x, Py_ssize_t window, Py_ssize_t stride, Py_ssize_t pad):
    cdef cnp.int32_t[:, :, :, ::1] a = np.ascontiguousarray(x, dtype=np.int32)
    cdef Py_ssize_t n = a.shape[0], c = a.shape[1], h = a.shape[2], w = a.shape[3]
    cdef Py_ssize_t oh = (h + 2 * pad - window) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - window) // stride + 1
    out_arr = np.empty((n, c, oh, ow), dtype=np.int32)
    cdef cnp.int32_t[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, ch, y, xx, i, j, iy, ix
    cdef cnp.int32_t best, v
    with nogil:
        for b in range(n):
            for ch in range(c):
                for y in range(oh):
                    for xx in range(ow):
                        best = <cnp.int32_t>INT32_MIN_LL
                        for i in range(window):
                            iy = y * stride - pad + i
                            if iy < 0 or iy >= h:
                                continue
                            for j in range(window):
                                ix = xx * stride - pad + j
                                if ix < 0 or ix >= w:
                                    continue
                                v = a[b, ch, iy, ix]
                                if v > best:
                                    best = v
                        out[b, ch, y, xx] = best
    return out_arr


def sumpool_i32(x, Py_ssize_t window, Py_ssize_t stride):
    cdef cnp.int32_t[:, :, :, ::1] a = np.ascontiguousarray(x, dtype=np.int32)
    cdef Py_ssize_t n = a.shape[0], c = a.shape[1], h = a.shape[2], w = a.shape[3]
    cdef Py_ssize_t oh = (h - window) // stride + 1
    cdef Py_ssize_t ow = (w - window) // stride + 1
    out_arr = np.empty((n, c, oh, ow), dtype=np.int32)
    cdef cnp.int32_t[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, ch, y, xx, i, j
    cdef long long acc
    cdef bint overflow = 0
    with nogil:
        for b in range(n):
            for ch in range(c):
                for y in range(oh):
                    for xx in range(ow):
                        acc = 0
                        for i in range(window):
                            for j in range(window):
                                acc += a[b, ch, y * stride + i, xx * stride + j]
                                if acc > INT32_MAX_LL or acc < INT32_MIN_LL:
                                    overflow = 1
                                    break
                            if overflow:
                                break
                        if overflow:
                            break
                        out[b, ch, y, xx] = <cnp.int32_t>acc
                    if overflow:
                        break
                if overflow:
                    break
            if overflow:
                break
    if overflow:
        raise AccumulatorOverflow("sum-pool partial sum exceeds int32")
    return out_arr


def requant_rows_i64(acc, mant, expo):
    acc_arr = np.ascontiguousarray(acc, dtype=np.int64)
    cdef cnp.int64_t[:, ::1] t = acc_arr
    cdef cnp.int64_t[::1] b = np.ascontiguousarray(mant, dtype=np.int64)
    cdef cnp.int64_t[::1] c = np.ascontiguousarray(expo, dtype=np.int64)
    cdef Py_ssize_t rows = t.shape[0], m = t.shape[1]
    out_arr = np.empty((rows, m), dtype=np.int64)
    cdef cnp.int64_t[:, ::1] out = out_arr
    cdef Py_ssize_t r, i
    cdef long long prod, offset, shift, mag
    with nogil:
        for r in range(rows):
            shift = c[r]
            offset = (<long long>1 << (shift - 1)) if shift > 0 else 0
            for i in range(m):
                prod = t[r, i] * b[r]
                if prod >= 0:
                    mag = (prod + offset) >> shift
                    out[r, i] = mag
                else:
                    mag = (-prod + offset) >> shift
                    out[r, i] = -mag
    return out_arr
