"""Pure numpy implementations of the hot spatial kernels.

Every function here has a twin in ``_ckernels.pyx`` with the same signature
and bit-identical results; :mod:`seunet.kernels` picks one at import time.
All arrays are channels-last, ``(N, H, W, C)``.
"""
import numpy as np


def _tap_ranges(out_n, in_n, stride, offset):
    # output indices o with 0 <= stride*o + offset < in_n
    lo = (-offset + stride - 1) // stride if offset < 0 else 0
    last = in_n - 1 - offset
    hi = min(last // stride + 1, out_n) if last >= 0 else 0
    return lo, max(lo, hi)


def im2col(x, kh, kw, dh, dw, stride, pad_h, pad_w, out_h, out_w):
    """Gather dilated, strided patches.

    ``cols[n, i, j, a, b, c] = x[n, stride*i + dh*a - pad_h, stride*j + dw*b - pad_w, c]``
    with zeros outside the input.
    """
    n, h, w, c = x.shape
    cols = np.zeros((n, out_h, out_w, kh, kw, c), dtype=x.dtype)
    for a in range(kh):
        oy = dh * a - pad_h
        i0, i1 = _tap_ranges(out_h, h, stride, oy)
        if i0 >= i1:
            continue
        for b in range(kw):
            ox = dw * b - pad_w
            j0, j1 = _tap_ranges(out_w, w, stride, ox)
            if j0 >= j1:
                continue
            cols[:, i0:i1, j0:j1, a, b, :] = x[
                :,
                stride * i0 + oy : stride * (i1 - 1) + oy + 1 : stride,
                stride * j0 + ox : stride * (j1 - 1) + ox + 1 : stride,
                :,
            ]
    return cols


def col2im(cols, h, w, dh, dw, stride, pad_h, pad_w):
    """Adjoint of :func:`im2col`: scatter-add patches back onto the image."""
    n, out_h, out_w, kh, kw, c = cols.shape
    x = np.zeros((n, h, w, c), dtype=cols.dtype)
    for a in range(kh):
        oy = dh * a - pad_h
        i0, i1 = _tap_ranges(out_h, h, stride, oy)
        if i0 >= i1:
            continue
        for b in range(kw):
            ox = dw * b - pad_w
            j0, j1 = _tap_ranges(out_w, w, stride, ox)
            if j0 >= j1:
                continue
            x[
                :,
                stride * i0 + oy : stride * (i1 - 1) + oy + 1 : stride,
                stride * j0 + ox : stride * (j1 - 1) + ox + 1 : stride,
                :,
            ] += cols[:, i0:i1, j0:j1, a, b, :]
    return x


def window_argmax(x, offsets, penalties):
    """Penalised sliding sup: ``out[z] = max_t x[z + offsets[t]] - penalties[t]``.

    Taps falling outside the image are skipped. Returns the values and the
    index of the first attaining tap. ``offsets`` must contain ``(0, 0)``.
    """
    n, h, w, c = x.shape
    out = np.full(x.shape, -np.inf, dtype=x.dtype)
    idx = np.zeros(x.shape, dtype=np.int32)
    for t in range(offsets.shape[0]):
        dy, dx = int(offsets[t, 0]), int(offsets[t, 1])
        i0, i1 = max(0, -dy), min(h, h - dy)
        j0, j1 = max(0, -dx), min(w, w - dx)
        if i0 >= i1 or j0 >= j1:
            continue
        cand = x[:, i0 + dy : i1 + dy, j0 + dx : j1 + dx, :] - x.dtype.type(penalties[t])
        cur = out[:, i0:i1, j0:j1, :]
        better = cand > cur
        cur[better] = cand[better]
        idx[:, i0:i1, j0:j1, :][better] = t
    return out, idx


def window_scatter(grad, idx, offsets):
    """Adjoint of :func:`window_argmax` with respect to ``x``."""
    n, h, w, c = grad.shape
    gx = np.zeros_like(grad)
    for t in range(offsets.shape[0]):
        dy, dx = int(offsets[t, 0]), int(offsets[t, 1])
        i0, i1 = max(0, -dy), min(h, h - dy)
        j0, j1 = max(0, -dx), min(w, w - dx)
        if i0 >= i1 or j0 >= j1:
            continue
        sel = idx[:, i0:i1, j0:j1, :] == t
        gx[:, i0 + dy : i1 + dy, j0 + dx : j1 + dx, :] += np.where(
            sel, grad[:, i0:i1, j0:j1, :], 0
        )
    return gx
