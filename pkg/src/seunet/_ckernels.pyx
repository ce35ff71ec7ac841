# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled twins of the kernels in ``_pykernels``.

Loop order mirrors the numpy fallback tap by tap so that floating point
accumulation happens in the same sequence and both backends agree bitwise.
"""
import numpy as np
cimport numpy as cnp

ctypedef fused real:
    float
    double


cdef inline Py_ssize_t _lo(Py_ssize_t stride, Py_ssize_t offset) nogil:
    if offset < 0:
        return (-offset + stride - 1) // stride
    return 0


cdef inline Py_ssize_t _hi(Py_ssize_t out_n, Py_ssize_t in_n, Py_ssize_t stride,
                           Py_ssize_t offset) nogil:
    cdef Py_ssize_t last = in_n - 1 - offset
    cdef Py_ssize_t hi
    if last < 0:
        return 0
    hi = last // stride + 1
    return hi if hi < out_n else out_n


def _im2col(real[:, :, :, ::1] x, real[:, :, :, :, :, ::1] cols,
            Py_ssize_t dh, Py_ssize_t dw, Py_ssize_t stride,
            Py_ssize_t pad_h, Py_ssize_t pad_w):
    cdef Py_ssize_t n = x.shape[0], h = x.shape[1], w = x.shape[2], c = x.shape[3]
    cdef Py_ssize_t out_h = cols.shape[1], out_w = cols.shape[2]
    cdef Py_ssize_t kh = cols.shape[3], kw = cols.shape[4]
    cdef Py_ssize_t a, b, s, i, j, ch, oy, ox, i0, i1, j0, j1, yi, xj
    with nogil:
        for s in range(n):
            for i in range(out_h):
                for j in range(out_w):
                    for a in range(kh):
                        yi = stride * i + dh * a - pad_h
                        if yi < 0 or yi >= h:
                            continue
                        for b in range(kw):
                            xj = stride * j + dw * b - pad_w
                            if xj < 0 or xj >= w:
                                continue
                            for ch in range(c):
                                cols[s, i, j, a, b, ch] = x[s, yi, xj, ch]


def im2col(x, kh, kw, dh, dw, stride, pad_h, pad_w, out_h, out_w):
    x = np.ascontiguousarray(x)
    cols = np.zeros((x.shape[0], out_h, out_w, kh, kw, x.shape[3]), dtype=x.dtype)
    _im2col(x, cols, dh, dw, stride, pad_h, pad_w)
    return cols


def _col2im(real[:, :, :, :, :, ::1] cols, real[:, :, :, ::1] x,
            Py_ssize_t dh, Py_ssize_t dw, Py_ssize_t stride,
            Py_ssize_t pad_h, Py_ssize_t pad_w):
    cdef Py_ssize_t n = cols.shape[0], out_h = cols.shape[1], out_w = cols.shape[2]
    cdef Py_ssize_t kh = cols.shape[3], kw = cols.shape[4], c = cols.shape[5]
    cdef Py_ssize_t h = x.shape[1], w = x.shape[2]
    cdef Py_ssize_t a, b, s, i, j, ch, oy, ox, i0, i1, j0, j1, yi, xj
    with nogil:
        for a in range(kh):
            oy = dh * a - pad_h
            i0 = _lo(stride, oy)
            i1 = _hi(out_h, h, stride, oy)
            for b in range(kw):
                ox = dw * b - pad_w
                j0 = _lo(stride, ox)
                j1 = _hi(out_w, w, stride, ox)
                for s in range(n):
                    for i in range(i0, i1):
                        yi = stride * i + oy
                        for j in range(j0, j1):
                            xj = stride * j + ox
                            for ch in range(c):
                                x[s, yi, xj, ch] += cols[s, i, j, a, b, ch]


def col2im(cols, h, w, dh, dw, stride, pad_h, pad_w):
    cols = np.ascontiguousarray(cols)
    x = np.zeros((cols.shape[0], h, w, cols.shape[5]), dtype=cols.dtype)
    _col2im(cols, x, dh, dw, stride, pad_h, pad_w)
    return x


def _window_argmax(real[:, :, :, ::1] x, Py_ssize_t[:, ::1] offsets,
                   real[::1] penalties, real[:, :, :, ::1] out, int[:, :, :, ::1] idx):
    cdef Py_ssize_t n = x.shape[0], h = x.shape[1], w = x.shape[2], c = x.shape[3]
    cdef Py_ssize_t t, s, i, j, ch, dy, dx, i0, i1, j0, j1
    cdef real cand, pen
    with nogil:
        for t in range(offsets.shape[0]):
            dy = offsets[t, 0]
            dx = offsets[t, 1]
            pen = penalties[t]
            i0 = -dy if dy < 0 else 0
            i1 = h - dy if dy > 0 else h
            j0 = -dx if dx < 0 else 0
            j1 = w - dx if dx > 0 else w
            for s in range(n):
                for i in range(i0, i1):
                    for j in range(j0, j1):
                        for ch in range(c):
                            cand = x[s, i + dy, j + dx, ch] - pen
                            if cand > out[s, i, j, ch]:
                                out[s, i, j, ch] = cand
                                idx[s, i, j, ch] = <int>t


def window_argmax(x, offsets, penalties):
    x = np.ascontiguousarray(x)
    offs = np.ascontiguousarray(offsets, dtype=np.intp)
    pens = np.ascontiguousarray(penalties, dtype=x.dtype)
    out = np.full(x.shape, -np.inf, dtype=x.dtype)
    idx = np.zeros(x.shape, dtype=np.int32)
    _window_argmax(x, offs, pens, out, idx)
    return out, idx


def _window_scatter(real[:, :, :, ::1] grad, int[:, :, :, ::1] idx,
                    Py_ssize_t[:, ::1] offsets, real[:, :, :, ::1] gx):
    cdef Py_ssize_t n = grad.shape[0], h = grad.shape[1], w = grad.shape[2], c = grad.shape[3]
    cdef Py_ssize_t t, s, i, j, ch, dy, dx, i0, i1, j0, j1
    with nogil:
        for t in range(offsets.shape[0]):
            dy = offsets[t, 0]
            dx = offsets[t, 1]
            i0 = -dy if dy < 0 else 0
            i1 = h - dy if dy > 0 else h
            j0 = -dx if dx < 0 else 0
            j1 = w - dx if dx > 0 else w
            for s in range(n):
                for i in range(i0, i1):
                    for j in range(j0, j1):
                        for ch in range(c):
                            if idx[s, i, j, ch] == t:
                                gx[s, i + dy, j + dx, ch] += grad[s, i, j, ch]


def window_scatter(grad, idx, offsets):
    grad = np.ascontiguousarray(grad)
    idx = np.ascontiguousarray(idx, dtype=np.int32)
    offs = np.ascontiguousarray(offsets, dtype=np.intp)
    gx = np.zeros_like(grad)
    _window_scatter(grad, idx, offs, gx)
    return gx
