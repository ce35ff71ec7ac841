"""Layers on lifted signals ``(N, S, H, W, C)``.

Exact semigroup equivariance holds for the scale-cross-correlation, strided
subsampling, pointwise layers and concatenation; upsampling and the pooling
scale-spaces are only equivariant under extra hypotheses.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import kernels
from .lifting import interp_matrix, lifted_action, resample
from .tensor import (
    Tensor,
    _make,
    add_bias,
    as_tensor,
    concat,
    fan_in_uniform,
    max_pool2d,
    recording,
    relu,
    reshape,
    take_index,
)

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- scale-cross-correlation


@dataclass
class FilterBank:
    weights: Tensor  # (K_s, kh, kw, C_in, C_out)
    bias: Tensor  # (C_out,)

    def __post_init__(self):
        ks, kh, kw, cin, cout = self.weights.shape
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError(f"filter extents must be odd, got {kh}x{kw}")
        if ks < 1:
            raise ValueError("scale depth must be >= 1")
        if self.bias.shape != (cout,):
            raise ValueError(f"bias shape {self.bias.shape} does not match {cout} output channels")

    @property
    def scale_depth(self):
        return self.weights.shape[0]

    @property
    def c_in(self):
        return self.weights.shape[3]

    @property
    def c_out(self):
        return self.weights.shape[4]

    @property
    def radius(self):
        return self.weights.shape[1] // 2, self.weights.shape[2] // 2

    @classmethod
    def init(cls, rng, c_in, c_out, size=3, scale_depth=1, dtype=np.float32, name="bank"):
        fan_in = scale_depth * size * size * c_in
        w = fan_in_uniform(rng, (scale_depth, size, size, c_in, c_out), fan_in, dtype)
        return cls(
            Tensor(w, requires_grad=True, name=f"{name}.weight"),
            Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True, name=f"{name}.bias"),
        )


def _as_lifted_batch(f):
    if isinstance(f, Tensor):
        return f, False
    arr = np.asarray(getattr(f, "values", f))
    if arr.ndim == 4:
        return Tensor(arr[None]), True
    return Tensor(arr), False


def _restore(out: Tensor, squeezed: bool, like):
    if isinstance(like, Tensor):
        return out
    return out.data[0] if squeezed else out.data


def scale_cross_correlation(f, bank: FilterBank, gamma: int = 2):
    """``out(k, z, o) = sum_{l, y, c} f(k + l, z + gamma**k * y, c) h(l, y, c, o) + b(o)``.

    Spatial offsets ``y`` are centred, out-of-domain samples are zero, and
    terms with ``k + l >= S`` are dropped. The output keeps all ``S`` scales.
    """
    x, squeezed = _as_lifted_batch(f)
    n, s, h, w, cin = x.shape
    ks, kh, kw, kcin, cout = bank.weights.shape
    if kcin != cin:
        raise ValueError(f"channel mismatch: signal has {cin} channels, filter bank expects {kcin}")
    pairs = [(k, l, gamma**k) for k in range(s) for l in range(ks) if k + l < s]
    if cout < cin:
        y = _sxc_output_side(x, bank.weights, pairs, kh, kw)
    else:
        y = _sxc_input_side(x, bank.weights, pairs, kh, kw)
    y = add_bias(y, bank.bias)
    return _restore(y, squeezed, f)


def _sxc_input_side(x: Tensor, wt: Tensor, pairs, kh, kw) -> Tensor:
    # gather input patches per output scale: cost scales with C_in
    xd = x.data
    n, s, h, w, cin = xd.shape
    ks, _, _, _, cout = wt.shape
    feat = ks * kh * kw * cin
    wmat = wt.data.reshape(feat, cout)
    planes = [np.ascontiguousarray(xd[:, j]) for j in range(s)]
    out = np.empty((n, s, h, w, cout), dtype=xd.dtype)
    cols = []
    keep = recording(x, wt)
    for k in range(s):
        taps = [(l, d) for kk, l, d in pairs if kk == k]
        if ks == 1:
            d = taps[0][1]
            ck = kernels.im2col(planes[k], kh, kw, d, d, 1, d * (kh // 2), d * (kw // 2), h, w)
        else:
            ck = np.zeros((n, h, w, ks, kh, kw, cin), dtype=xd.dtype)
            for l, d in taps:
                ck[:, :, :, l] = kernels.im2col(planes[k + l], kh, kw, d, d, 1, d * (kh // 2), d * (kw // 2), h, w)
        ck = ck.reshape(-1, feat)
        out[:, k] = (ck @ wmat).reshape(n, h, w, cout)
        if keep:
            cols.append(ck)

    def bw(g):
        gw = np.zeros((feat, cout), dtype=xd.dtype) if wt.requires_grad else None
        gx = np.zeros_like(xd) if x.requires_grad else None
        for k in range(s):
            gk = np.ascontiguousarray(g[:, k]).reshape(-1, cout)
            if gw is not None:
                gw += cols[k].T @ gk
            if gx is not None:
                gcols = (gk @ wmat.T).reshape(n, h, w, ks, kh, kw, cin)
                for kk, l, d in pairs:
                    if kk == k:
                        gx[:, k + l] += kernels.col2im(
                            np.ascontiguousarray(gcols[:, :, :, l]), h, w, d, d, 1, d * (kh // 2), d * (kw // 2)
                        )
        return gx, (gw.reshape(wt.shape) if gw is not None else None)

    return _make(out, (x, wt), bw)


def _sxc_output_side(x: Tensor, wt: Tensor, pairs, kh, kw) -> Tensor:
    # project channels first, then shift-add per tap: cost scales with C_out
    xd = x.data
    n, s, h, w, cin = xd.shape
    ks, _, _, _, cout = wt.shape
    wd = wt.data
    feat = kh * kw * cout
    # tap-flipped weights as (ks, cin, kh*kw*cout)
    wflip = np.ascontiguousarray(wd[:, ::-1, ::-1].transpose(0, 3, 1, 2, 4)).reshape(ks, cin, feat)
    planes = [np.ascontiguousarray(xd[:, j]).reshape(-1, cin) for j in range(s)]
    out = np.zeros((n, s, h, w, cout), dtype=xd.dtype)
    for k, l, d in pairs:
        proj = (planes[k + l] @ wflip[l]).reshape(n, h, w, kh, kw, cout)
        out[:, k] += kernels.col2im(proj, h, w, d, d, 1, d * (kh // 2), d * (kw // 2))

    def bw(g):
        gx = np.zeros_like(xd) if x.requires_grad else None
        gw = np.zeros((ks, cin, feat), dtype=xd.dtype) if wt.requires_grad else None
        # wback[l]: (kh*kw*cout, cin) with unflipped tap order
        wback = np.ascontiguousarray(wd.transpose(0, 1, 2, 4, 3)).reshape(ks, feat, cin)
        for k in range(s):
            d = pairs_by_k[k][0][1]
            gcols = kernels.im2col(np.ascontiguousarray(g[:, k]), kh, kw, d, d, 1, d * (kh // 2), d * (kw // 2), h, w)
            # the adjoint of shift-add reads taps in flipped order
            gflip = np.ascontiguousarray(gcols[:, :, :, ::-1, ::-1]).reshape(-1, feat)
            for l, _ in pairs_by_k[k]:
                if gx is not None:
                    gx[:, k + l] += (gflip @ wback[l]).reshape(n, h, w, cin)
                if gw is not None:
                    gw[l] += planes[k + l].T @ gflip
        if gw is not None:
            gw = np.ascontiguousarray(gw.reshape(ks, cin, kh, kw, cout).transpose(0, 2, 3, 1, 4))
        return gx, gw

    pairs_by_k = {}
    for k, l, d in pairs:
        pairs_by_k.setdefault(k, []).append((l, d))
    return _make(out, (x, wt), bw)


# ---------------------------------------------------------------- sampling


def strided_subsample(f, t: int):
    """``out(s, x) = f(s, t x)`` on every scale; extent ``ceil(H/t) x ceil(W/t)``."""
    index = (Ellipsis, slice(None, None, t), slice(None, None, t), slice(None))
    if isinstance(f, Tensor):
        return take_index(f, index)
    return np.ascontiguousarray(np.asarray(f)[index])


def upsample(f, t: int, mode: str = "bilinear"):
    """Spatial upsampling by integer ``t`` with ``out(s, t x) = f(s, x)`` exactly.

    In-between pixels are top-left aligned bilinear interpolates (border
    clamped) or replicas in ``nearest`` mode. Works on plane or lifted layouts.
    """
    arr = f.data if isinstance(f, Tensor) else np.asarray(f)
    h, w = arr.shape[-3], arr.shape[-2]
    ah = interp_matrix(h, t * h, t, mode)
    aw = interp_matrix(w, t * w, t, mode)
    if mode == "nearest" and not isinstance(f, Tensor):
        return np.repeat(np.repeat(arr, t, axis=-3), t, axis=-2)
    return resample(f, ah, aw)


# ---------------------------------------------------------------- regularisation and normalisation


def scale_dropout(f, p: float, rng: np.random.Generator | None, training: bool, rescale: bool = True):
    """Zero whole scale levels with probability ``p`` per (sample, scale).

    One Bernoulli gate per sample and scale index, shared across space and
    channels. Survivors are multiplied by ``1/(1-p)`` when ``rescale`` is set.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1], got {p}")
    if not training or p == 0.0:
        return f
    x = f if isinstance(f, Tensor) else Tensor(np.asarray(f))
    if x.ndim == 4:
        shape = (x.shape[0], 1, 1, 1)
    else:
        shape = x.shape[:-3] + (1, 1, 1)
    keep = rng.random(shape) >= p
    if p == 1.0:
        log.warning("scale dropout with p=1 zeroes every scale level")
        gain = 0.0
    else:
        gain = 1.0 / (1.0 - p) if rescale else 1.0
    mask = (keep * gain).astype(x.dtype)
    out = _make(x.data * mask, (x,), lambda g: (g * mask,))
    return out if isinstance(f, Tensor) else out.data


@dataclass
class NormState:
    channels: int
    momentum: float = 0.1
    eps: float = 1e-5
    running_mean: np.ndarray = field(default=None)
    running_var: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.running_mean is None:
            self.running_mean = np.zeros(self.channels)
        if self.running_var is None:
            self.running_var = np.ones(self.channels)


def _channel_sum(a: np.ndarray) -> np.ndarray:
    # sum over every axis but the last, as a matrix-vector product
    flat = a.reshape(-1, a.shape[-1])
    return np.ones(flat.shape[0], dtype=a.dtype) @ flat


def scale_batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: NormState, training: bool) -> Tensor:
    """Per-channel normalisation with statistics pooled over batch, scale and space."""
    x = as_tensor(x)
    if x.shape[0] == 0:
        raise ValueError("batch norm needs a non-empty batch")
    xd = x.data
    dt = xd.dtype
    m = xd.size // xd.shape[-1]
    if training:
        mean = _channel_sum(xd) / m
        xhat = xd - mean
        var = _channel_sum(xhat * xhat) / m
        unbiased = var.astype(np.float64) * m / max(1, m - 1)
        state.running_mean = (1 - state.momentum) * state.running_mean + state.momentum * mean
        state.running_var = (1 - state.momentum) * state.running_var + state.momentum * unbiased
    else:
        var = state.running_var.astype(dt)
        xhat = xd - state.running_mean.astype(dt)
    inv = (1.0 / np.sqrt(var + state.eps)).astype(dt)
    xhat *= inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        gb = _channel_sum(g)
        gg = _channel_sum(g * xhat)
        gx = None
        if x.requires_grad:
            scale = gamma.data * inv
            if training:
                gx = (g - (gb + xhat * gg) / m) * scale
            else:
                gx = g * scale
        return gx, (gg if gamma.requires_grad else None), (gb if beta.requires_grad else None)

    return _make(out, (x, gamma, beta), bw)


# ---------------------------------------------------------------- concatenation


def concat_channels(a, b):
    """Channel-axis concatenation of two signals with equal scale and spatial extents."""
    ash = a.shape
    bsh = b.shape
    if ash[:-1] != bsh[:-1]:
        raise ValueError(f"cannot concatenate signals of extents {ash[:-1]} and {bsh[:-1]}")
    if bsh[-1] == 0:
        return a
    if isinstance(a, Tensor) or isinstance(b, Tensor):
        return concat([as_tensor(a), as_tensor(b)], axis=-1)
    return np.concatenate([a, b], axis=-1)


# ---------------------------------------------------------------- pooling scale-spaces


def odd_extent(x: float) -> int:
    """Nearest odd integer, ties rounded up (2 -> 3)."""
    return 2 * int(np.floor((x - 1) / 2 + 0.5)) + 1


def square_offsets(extent: int) -> np.ndarray:
    r = extent // 2
    ys, xs = np.mgrid[-r : r + 1, -r : r + 1]
    return np.stack([ys.ravel(), xs.ravel()], axis=1).astype(np.intp)


def _window_op(x: Tensor, per_level):
    # per_level[k] = (offsets, penalties); applied to x[:, k]
    xd = x.data
    n, s, h, w, c = xd.shape
    out = np.empty_like(xd)
    idxs = []
    for k in range(s):
        offs, pens = per_level[k]
        o, i = kernels.window_argmax(np.ascontiguousarray(xd[:, k]), offs, pens)
        out[:, k] = o
        idxs.append(i)

    def bw(g):
        gx = np.empty_like(g)
        for k in range(s):
            gx[:, k] = kernels.window_scatter(np.ascontiguousarray(g[:, k]), idxs[k], per_level[k][0])
        return (gx,)

    return _make(out, (x,), bw)


def max_window_extent(level: int, base_extent: float, gamma: int, h: int, w: int) -> int:
    """Odd window extent at scale level ``level``, clipped to the image."""
    e = odd_extent(base_extent * gamma**level)
    lim = min(h, w)
    lim = lim if lim % 2 == 1 else lim - 1
    return max(1, min(e, lim))


def pool_max_scale(f, level_shift: int, base_extent: float = 2, gamma: int = 2):
    """Rescaled max-pooling.

    Sup over a ``gamma**k``-scaled square at level ``k``, then stride ``gamma**level_shift``.
    """
    x, squeezed = _as_lifted_batch(f)
    _, s, h, w, _ = x.shape
    per_level = []
    for k in range(s):
        offs = square_offsets(max_window_extent(k, base_extent, gamma, h, w))
        per_level.append((offs, np.zeros(len(offs))))
    y = strided_subsample(_window_op(x, per_level), gamma**level_shift)
    return _restore(y, squeezed, f)


def quad_offsets(level: int, c: float, gamma: int, value_range: float, h: int, w: int):
    """Taps and parabolic penalties ``|y|^2 / (c gamma^(2k))`` that can still attain the sup."""
    a = c * gamma ** (2 * level)
    r = int(np.floor(np.sqrt(max(value_range, 0.0) * a)))
    r = min(r, max(h, w) - 1)
    offs = square_offsets(2 * r + 1)
    pens = (offs[:, 0] ** 2 + offs[:, 1] ** 2) / a
    keep = pens <= value_range
    keep[len(offs) // 2] = True
    return offs[keep], pens[keep]


def pool_quad_scale(f, level_shift: int, c: float = 1.0, gamma: int = 2):
    """Quadratic dilation ``sup_y f(z - y) - |y|^2 / (c gamma^(2k))`` per level, then stride ``gamma**level_shift``.

    The unbounded sup is truncated to the taps whose penalty does not exceed
    the value range of ``f``; no other tap can beat the ``y = 0`` term.
    """
    if c <= 0:
        raise ValueError("quadratic pooling constant must be positive")
    x, squeezed = _as_lifted_batch(f)
    _, s, h, w, _ = x.shape
    rng_ = float(x.data.max() - x.data.min()) if x.data.size else 0.0
    per_level = [quad_offsets(k, c, gamma, rng_, h, w) for k in range(s)]
    y = strided_subsample(_window_op(x, per_level), gamma**level_shift)
    return _restore(y, squeezed, f)


def naive_max_pool(f, size: int = 2):
    """Classical ``size x size`` max-pooling applied independently at every scale."""
    x, squeezed = _as_lifted_batch(f)
    n, s, h, w, c = x.shape
    flat = reshape(x, (n * s, h, w, c))
    pooled = max_pool2d(flat, size)
    y = reshape(pooled, (n, s) + pooled.shape[1:])
    return _restore(y, squeezed, f)


# ---------------------------------------------------------------- operators with valid-region metadata


def _shift_and(mask: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    # out[z] = AND_t mask[z + offsets[t]] with out-of-domain taps False
    h, w = mask.shape[-2:]
    out = np.ones_like(mask, dtype=bool)
    for dy, dx in offsets:
        sh = np.zeros_like(out)
        i0, i1 = max(0, -dy), min(h, h - dy)
        j0, j1 = max(0, -dx), min(w, w - dx)
        if i0 < i1 and j0 < j1:
            sh[..., i0:i1, j0:j1] = mask[..., i0 + dy : i1 + dy, j0 + dx : j1 + dx]
        out &= sh
    return out


def _same_action(g):
    return g


@dataclass
class Operator:
    """A map with the bookkeeping an equivariance check needs.

    ``valid`` maps a boolean mask of trustworthy input samples (``(S, H, W)``
    for lifted signals, ``(H, W)`` for plane images) to the mask of output
    samples unaffected by padding or truncation. ``out_action`` gives the
    action expected on the output when ``g`` acts on the input.
    """

    name: str
    fn: Callable
    valid: Callable
    exact: bool = True
    out_action: Callable = _same_action
    domain: str = "lifted"
    codomain: str = "lifted"

    def __call__(self, x):
        return self.fn(x)

    def then(self, other: "Operator") -> "Operator":
        if self.codomain != other.domain:
            raise ValueError(f"cannot compose {self.name} ({self.codomain}) with {other.name} ({other.domain})")
        return Operator(
            f"{other.name}({self.name})",
            lambda x: other.fn(self.fn(x)),
            lambda m: other.valid(self.valid(m)),
            self.exact and other.exact,
            lambda g: other.out_action(self.out_action(g)),
            self.domain,
            other.codomain,
        )


def divided_action(g, t: int):
    """``(k, z) -> (k, z / t)``; the action seen after subsampling by ``t``."""
    k, z = g
    if z[0] % t or z[1] % t:
        raise ValueError(f"translation {tuple(z)} is not a multiple of the stride {t}")
    return (k, (z[0] // t, z[1] // t))


def multiplied_action(g, t: int):
    k, z = g
    return (k, (z[0] * t, z[1] * t))


def identity_operator() -> Operator:
    return Operator("identity", lambda x: x, lambda m: m, True)


def correlation_operator(bank: FilterBank, gamma: int = 2) -> Operator:
    ks, kh, kw, _, _ = bank.weights.shape

    def valid(mask):
        s = mask.shape[0]
        out = np.zeros_like(mask, dtype=bool)
        for k in range(s):
            if k + ks > s:
                continue
            d = gamma**k
            ys, xs = np.mgrid[-(kh // 2) : kh // 2 + 1, -(kw // 2) : kw // 2 + 1]
            offs = np.stack([ys.ravel() * d, xs.ravel() * d], axis=1)
            acc = np.ones(mask.shape[1:], dtype=bool)
            for l in range(ks):
                acc &= _shift_and(mask[k + l], offs)
            out[k] = acc
        return out

    return Operator("scale_cross_correlation", lambda x: scale_cross_correlation(x, bank, gamma), valid, True)


def subsample_operator(t: int) -> Operator:
    return Operator(f"strided_subsample{t}", lambda x: strided_subsample(x, t), lambda m: m[:, ::t, ::t], True,
                    lambda g: divided_action(g, t))


def relu_operator() -> Operator:
    def fn(x):
        return np.maximum(x, 0) if not isinstance(x, Tensor) else relu(x)

    return Operator("relu", fn, lambda m: m, True)


def norm_operator(gamma_: np.ndarray, beta: np.ndarray, state: NormState) -> Operator:
    g_t = Tensor(gamma_)
    b_t = Tensor(beta)

    def fn(x):
        arr = np.asarray(x)
        y = scale_batch_norm(Tensor(arr.reshape((-1,) + arr.shape[-4:])), g_t, b_t, state, training=False)
        return y.data.reshape(arr.shape)

    return Operator("scale_batch_norm", fn, lambda m: m, True)


def concat_operator(a: Operator, b: Operator) -> Operator:
    return Operator(
        f"concat({a.name},{b.name})",
        lambda x: concat_channels(a.fn(x), b.fn(x)),
        lambda m: a.valid(m) & b.valid(m),
        a.exact and b.exact,
        a.out_action,
    )


def max_scale_operator(level_shift: int, base_extent: float = 2, gamma: int = 2) -> Operator:
    def valid(mask):
        s, h, w = mask.shape
        out = np.stack([
            _shift_and(mask[k], square_offsets(max_window_extent(k, base_extent, gamma, h, w))) for k in range(s)
        ])
        return out[:, :: gamma**level_shift, :: gamma**level_shift]

    return Operator("pool_max_scale", lambda x: pool_max_scale(x, level_shift, base_extent, gamma), valid, False,
                    lambda g: divided_action(g, gamma**level_shift))


def naive_pool_operator(size: int = 2) -> Operator:
    def valid(mask):
        h, w = mask.shape[1:]
        oh, ow = (h - size) // size + 1, (w - size) // size + 1
        ys, xs = np.mgrid[0:size, 0:size]
        full = _shift_and(mask, np.stack([ys.ravel(), xs.ravel()], axis=1))
        return full[:, : oh * size : size, : ow * size : size]

    return Operator("naive_max_pool", lambda x: naive_max_pool(x, size), valid, False,
                    lambda g: divided_action(g, size))


def upsample_operator(t: int, mode: str = "bilinear") -> Operator:
    def valid(mask):
        # anchors and interior interpolates only; the clamped border row/col is dropped
        up = np.repeat(np.repeat(mask, t, axis=1), t, axis=2)
        nxt = np.zeros_like(mask)
        nxt[:, :-1, :-1] = mask[:, 1:, 1:] & mask[:, :-1, :-1]
        nxt_up = np.repeat(np.repeat(nxt, t, axis=1), t, axis=2)
        anchors = np.zeros_like(up)
        anchors[:, ::t, ::t] = True
        return up & (nxt_up | anchors)

    return Operator(f"upsample{t}_{mode}", lambda x: upsample(x, t, mode), valid, False,
                    lambda g: multiplied_action(g, t))


def apply_action_mask(g, mask: np.ndarray, gamma: int = 2) -> np.ndarray:
    return lifted_action(g, mask[..., None], gamma)[..., 0]
