"""The scale-translation semigroup and its actions on plane and lifted signals.

A plane image is an array ``(..., H, W, C)``. A lifted signal adds a scale
axis in front of the spatial ones, ``(..., S, H, W, C)``, ordered fine to
coarse: index ``s`` holds the Gaussian scale ``sigma0 * gamma**s``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .tensor import Tensor, _make, linear_map, take_index

LEVEL0_POLICIES = ("sigma0", "identity")


class SemigroupElement(NamedTuple):
    """``(gamma**k, z)``: downscale by ``gamma**k`` then translate by ``z`` (pixels)."""

    k: int
    z: tuple = (0, 0)

    def validate(self):
        if self.k < 0:
            raise ValueError(f"scale exponent must be >= 0, got {self.k}")
        return self


def element(k: int, z=(0, 0)) -> SemigroupElement:
    return SemigroupElement(int(k), (int(z[0]), int(z[1]))).validate()


def semigroup_compose(a: SemigroupElement, b: SemigroupElement, gamma: int = 2) -> SemigroupElement:
    """``(g^a.k, a.z) . (g^b.k, b.z) = (g^(a.k+b.k), g^a.k * b.z + a.z)``."""
    f = gamma**a.k
    return element(a.k + b.k, (f * b.z[0] + a.z[0], f * b.z[1] + a.z[1]))


@dataclass
class LiftedSignal:
    """Values on the truncated scale axis plus the lifting metadata."""

    values: np.ndarray
    gamma: int = 2
    base_sigma: float = 1.0
    level0: str = "sigma0"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.values.ndim < 4:
            raise ValueError("lifted values need at least (S, H, W, C) axes")
        if self.gamma < 2:
            raise ValueError("gamma must be an integer >= 2")
        if self.level0 not in LEVEL0_POLICIES:
            raise ValueError(f"level-0 policy must be one of {LEVEL0_POLICIES}")

    @property
    def num_scales(self) -> int:
        return self.values.shape[-4]

    def sigmas(self):
        return [level_sigma(s, self.gamma, self.base_sigma, self.level0) for s in range(self.num_scales)]

    def with_values(self, values) -> "LiftedSignal":
        return LiftedSignal(values, self.gamma, self.base_sigma, self.level0, dict(self.meta))


def _unwrap(f):
    if isinstance(f, LiftedSignal):
        return f.values, f.gamma, f
    return f, None, None


def _check_translation(z):
    if z[0] < 0 or z[1] < 0:
        raise ValueError(f"translations must be non-negative on a finite grid, got {z}")


def lifted_action(g: SemigroupElement, f, gamma: int | None = None):
    """Right action ``out(l, y) = f(l + k, gamma**k * y + z)``.

    Accepts a raw array, a :class:`LiftedSignal` or a :class:`Tensor` laid out
    as ``(..., S, H, W, C)``. The output keeps the maximal grid of in-domain
    sources: ``S - k`` scales and ``floor((H - 1 - z_row) / gamma**k) + 1`` rows.
    """
    g = element(g[0], g[1])
    values, sig_gamma, sig = _unwrap(f)
    gamma = gamma or sig_gamma or 2
    s = values.shape[-4]
    if g.k >= s:
        raise ValueError(f"action exponent {g.k} leaves no scales of {s}")
    _check_translation(g.z)
    step = gamma**g.k
    h, w = values.shape[-3], values.shape[-2]
    if g.z[0] >= h or g.z[1] >= w:
        raise ValueError(f"translation {g.z} leaves the {h}x{w} domain")
    index = (Ellipsis, slice(g.k, None), slice(g.z[0], None, step), slice(g.z[1], None, step), slice(None))
    if isinstance(values, Tensor):
        return take_index(values, index)
    out = np.ascontiguousarray(values[index])
    return sig.with_values(out) if sig is not None else out


def plane_subsample_action(g: SemigroupElement, f, gamma: int = 2):
    """Pure decimation ``out(t) = f(gamma**k * t + z)`` of a plane image.

    No interpolation or anti-aliasing; this is the semigroup action on images,
    not a dataset resize.
    """
    g = element(g[0], g[1])
    _check_translation(g.z)
    step = gamma**g.k
    index = (Ellipsis, slice(g.z[0], None, step), slice(g.z[1], None, step), slice(None))
    arr = f.data if isinstance(f, Tensor) else f
    if arr.shape[-3] <= g.z[0] or arr.shape[-2] <= g.z[1]:
        raise ValueError(f"action {tuple(g)} leaves an empty image")
    if isinstance(f, Tensor):
        return take_index(f, index)
    return np.ascontiguousarray(f[index])


# ---------------------------------------------------------------- resampling


def interp_matrix(n_in: int, n_out: int, factor: float, mode: str = "bilinear", dtype=np.float64) -> np.ndarray:
    """Row ``x`` samples the input at ``x / factor`` (top-left aligned, border clamped)."""
    coords = np.arange(n_out, dtype=np.float64) / factor
    a = np.zeros((n_out, n_in), dtype=dtype)
    rows = np.arange(n_out)
    if mode == "nearest":
        idx = np.clip(np.floor(coords + 1e-9).astype(np.int64), 0, n_in - 1)
        a[rows, idx] = 1.0
        return a
    if mode != "bilinear":
        raise ValueError(f"unknown resampling mode {mode!r}")
    base = np.floor(coords + 1e-9)
    frac = np.clip(coords - base, 0.0, 1.0)
    frac[np.abs(frac) < 1e-9] = 0.0
    i0 = np.clip(base.astype(np.int64), 0, n_in - 1)
    i1 = np.clip(base.astype(np.int64) + 1, 0, n_in - 1)
    np.add.at(a, (rows, i0), 1.0 - frac)
    np.add.at(a, (rows, i1), frac)
    return a


def _apply_hw(x, ah, aw):
    # (..., H, W, C): contract H with ah and W with aw
    y = np.einsum("ah,...hwc->...awc", ah, x, optimize=True)
    return np.einsum("bw,...awc->...abc", aw, y, optimize=True)


def resample(f, ah: np.ndarray, aw: np.ndarray):
    """Apply separable row/column matrices to ``(..., H, W, C)``; differentiable for tensors."""
    if isinstance(f, Tensor):
        ah_ = ah.astype(f.dtype)
        aw_ = aw.astype(f.dtype)
        return linear_map(f, lambda x: _apply_hw(x, ah_, aw_), lambda g: _apply_hw(g, ah_.T, aw_.T))
    ah_ = ah.astype(f.dtype) if np.issubdtype(f.dtype, np.floating) else ah
    aw_ = aw.astype(f.dtype) if np.issubdtype(f.dtype, np.floating) else aw
    return _apply_hw(f, ah_, aw_)


def rescaled_extent(n: int, factor: float) -> int:
    return int(math.floor(n * factor + 0.5))


def plane_rescale(f, factor: float, mode: str = "bilinear"):
    """Resize ``(..., H, W, C)`` by ``factor`` to ``round(H*factor) x round(W*factor)``."""
    if factor <= 0:
        raise ValueError("rescale factor must be positive")
    arr = f.data if isinstance(f, Tensor) else np.asarray(f)
    h, w = arr.shape[-3], arr.shape[-2]
    oh, ow = rescaled_extent(h, factor), rescaled_extent(w, factor)
    if oh < 1 or ow < 1:
        raise ValueError(f"rescaling {h}x{w} by {factor} gives an empty image")
    if mode == "nearest" and not isinstance(f, Tensor):
        ri = np.argmax(interp_matrix(h, oh, factor, "nearest"), axis=1)
        ci = np.argmax(interp_matrix(w, ow, factor, "nearest"), axis=1)
        return np.ascontiguousarray(arr[..., ri, :, :][..., ci, :])
    return resample(f if isinstance(f, Tensor) else arr.astype(np.float64) if arr.dtype.kind != "f" else arr,
                    interp_matrix(h, oh, factor, mode), interp_matrix(w, ow, factor, mode))


# ---------------------------------------------------------------- Gaussian scale-space


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Sampled Gaussian on ``[-ceil(4 sigma), ceil(4 sigma)]`` normalised to sum 1."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return np.ones(1)
    r = int(math.ceil(4 * sigma))
    t = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-(t * t) / (2 * sigma * sigma))
    k /= k.sum()
    # exact symmetry after normalisation
    return 0.5 * (k + k[::-1])


def level_sigma(s: int, gamma: int = 2, base_sigma: float = 1.0, level0: str = "sigma0") -> float:
    if s == 0 and level0 == "identity":
        return 0.0
    return base_sigma * gamma**s


def correlate1d_same(x: np.ndarray, k: np.ndarray, axis: int) -> np.ndarray:
    """Zero-padded 'same' correlation of ``x`` with odd-length ``k`` along ``axis``."""
    r = len(k) // 2
    if r == 0:
        return x * k[0]
    x = np.moveaxis(x, axis, -1)
    n = x.shape[-1]
    out = np.zeros_like(x)
    for i, c in enumerate(k):
        d = i - r
        lo, hi = max(0, -d), min(n, n - d)
        if lo < hi:
            out[..., lo:hi] += c * x[..., lo + d : hi + d]
    return np.moveaxis(out, -1, axis)


def gaussian_blur(f: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian smoothing of ``(..., H, W, C)`` with zero-same padding."""
    k = gaussian_kernel(sigma).astype(f.dtype)
    return correlate1d_same(correlate1d_same(f, k, f.ndim - 3), k, f.ndim - 2)


def gaussian_lift(f, num_scales: int, gamma: int = 2, base_sigma: float = 1.0, level0: str = "sigma0") -> LiftedSignal:
    """Gaussian scale-space stack ``(..., S, H, W, C)`` of a plane image."""
    if num_scales < 1:
        raise ValueError("need at least one scale")
    arr = np.asarray(f.data if isinstance(f, Tensor) else f)
    if arr.dtype.kind != "f":
        arr = arr.astype(np.float64)
    levels = [gaussian_blur(arr, level_sigma(s, gamma, base_sigma, level0)) for s in range(num_scales)]
    values = np.stack(levels, axis=arr.ndim - 3)
    return LiftedSignal(values, gamma, base_sigma, level0)


def max_project(f):
    """Maximum over the scale axis; gradient goes to the first attaining level."""
    if isinstance(f, LiftedSignal):
        return f.values.max(axis=-4)
    if not isinstance(f, Tensor):
        return np.asarray(f).max(axis=-4)
    x = f.data
    axis = x.ndim - 4
    arg = np.expand_dims(x.argmax(axis=axis), axis)
    out = np.take_along_axis(x, arg, axis=axis)

    def bw(g):
        gx = np.zeros_like(x)
        np.put_along_axis(gx, arg, np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _make(np.squeeze(out, axis), (f,), bw)
