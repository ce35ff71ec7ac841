"""A small dense-tensor engine with reverse-mode differentiation.

Graphs are recorded dynamically: every operation on a :class:`Tensor` that
requires a gradient stores its parents and a closure computing the vector
Jacobian product. :func:`backward` walks the tape in reverse topological order.

Arrays are channels-last. Plane batches are ``(N, H, W, C)``; lifted batches
carry a scale axis, ``(N, S, H, W, C)``.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Sequence

import numpy as np

from . import kernels

DEFAULT_DTYPE = np.float32


class Tensor:
    """Array value plus optional gradient and a link into the tape."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple = ()
        self._backward: Callable | None = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(as_tensor(other, self.dtype), -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


_GRAD = {"enabled": True}


@contextlib.contextmanager
def no_grad():
    """Forward passes inside this block record nothing, so intermediates are freed early."""
    prev = _GRAD["enabled"]
    _GRAD["enabled"] = False
    try:
        yield
    finally:
        _GRAD["enabled"] = prev


def recording(*parents: Tensor) -> bool:
    return _GRAD["enabled"] and any(p.requires_grad for p in parents)


def _make(data, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    if recording(*parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def backward(root: Tensor) -> None:
    """Populate ``.grad`` on every tensor reachable from a scalar ``root``.

    Gradients accumulate additively, both across fan-out inside the graph and
    across repeated calls (call ``zero_grad`` between steps).
    """
    if root.data.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            node.grad = g if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------- elementwise


def _check_same(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape and a.data.size != 1 and b.data.size != 1:
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    return np.asarray(g.sum(), dtype=g.dtype).reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "add")
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.maximum(a.data, 0), (a,), lambda g: (np.where(mask, g, 0),))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` (the channel axis by default)."""
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (a,), bw)


def log(a: Tensor, floor: float = 0.0) -> Tensor:
    """Natural log of ``max(a, floor)``; no gradient flows through the floor."""
    x = a.data
    clipped = x < floor
    safe = np.where(clipped, a.dtype.type(floor), x)

    def bw(g):
        return (np.where(clipped, 0, g / safe).astype(x.dtype),)

    return _make(np.log(safe), (a,), bw)


def elementwise(kind: str, *operands, factor: float = 1.0) -> Tensor:
    """Dispatch by name: ``relu``, ``softmax`` (over channels), ``add``, ``mul``, ``scale``."""
    if kind == "relu":
        return relu(*operands)
    if kind in ("softmax", "softmax-over-channels"):
        return softmax(*operands, axis=-1)
    if kind == "add":
        return add(*operands)
    if kind == "mul":
        return mul(*operands)
    if kind == "scale":
        return scale(operands[0], factor)
    raise ValueError(f"unknown elementwise kind {kind!r}")


# ---------------------------------------------------------------- reductions and shape


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _make(np.asarray(a.data.sum(), dtype=a.dtype), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    shape = a.shape
    inv = a.dtype.type(1.0 / n)
    return _make(
        np.asarray(a.data.sum() * inv, dtype=a.dtype),
        (a,),
        lambda g: (np.full(shape, g * inv, dtype=g.dtype),),
    )


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def linear_map(a: Tensor, fwd, adj) -> Tensor:
    """Wrap a linear array transform ``fwd`` with its adjoint ``adj``."""
    return _make(fwd(a.data), (a,), lambda g: (adj(g),))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return linear_map(a, lambda x: x.reshape(shape), lambda g: g.reshape(old))


def take_index(a: Tensor, index) -> Tensor:
    """Basic-slicing read ``a[index]`` with scatter adjoint."""
    shape = a.shape

    def adj(g):
        out = np.zeros(shape, dtype=g.dtype)
        out[index] = g
        return out

    return linear_map(a, lambda x: np.ascontiguousarray(x[index]), adj)


# ---------------------------------------------------------------- spatial correlation


def _out_extent(n, k, stride, dilation, padding):
    if padding == "zero-same":
        return -(-n // stride), dilation * (k // 2)
    if padding == "valid":
        span = dilation * (k - 1) + 1
        if n < span:
            raise ValueError(f"valid padding: input extent {n} smaller than kernel span {span}")
        return (n - span) // stride + 1, 0
    raise ValueError(f"unknown padding policy {padding!r}")


def correlate_arrays(x, w, stride=1, dilation=1, padding="zero-same"):
    """Forward-only correlation of ``(N, H, W, Cin)`` with ``(kh, kw, Cin, Cout)``.

    Returns the output and the gathered patch matrix for reuse in backward.
    """
    n, h, wd, cin = x.shape
    kh, kw, kcin, cout = w.shape
    if kcin != cin:
        raise ValueError(f"channel mismatch: input has {cin} channels, kernel expects {kcin}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"kernel extents must be odd, got {kh}x{kw}")
    oh, ph = _out_extent(h, kh, stride, dilation, padding)
    ow, pw = _out_extent(wd, kw, stride, dilation, padding)
    cols = kernels.im2col(np.ascontiguousarray(x), kh, kw, dilation, dilation, stride, ph, pw, oh, ow)
    out = cols.reshape(-1, kh * kw * cin) @ w.reshape(kh * kw * cin, cout)
    return out.reshape(n, oh, ow, cout), cols, (ph, pw)


def plane_correlate(x: Tensor, w: Tensor, stride: int = 1, padding: str = "zero-same",
                    dilation: int = 1) -> Tensor:
    """Strided, optionally dilated 2-D cross-correlation.

    ``out[n, i, j, o] = sum_{a, b, c} x[n, s*i + d*(a - kh//2), s*j + d*(b - kw//2), c] * w[a, b, c, o]``
    with out-of-domain input treated as zero under ``zero-same`` padding. With
    ``valid`` padding the kernel window never leaves the input.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError("plane_correlate expects (N,H,W,C) input and (kh,kw,Cin,Cout) kernel")
    if x.shape[3] != w.shape[2]:
        raise ValueError(f"channel mismatch: input has {x.shape[3]} channels, kernel expects {w.shape[2]}")
    if stride == 1 and padding == "zero-same" and w.shape[3] < w.shape[2]:
        return _correlate_output_side(x, w, dilation)
    out, cols, (ph, pw) = correlate_arrays(x.data, w.data, stride, dilation, padding)
    n, h, wd, cin = x.shape
    kh, kw, _, cout = w.shape

    def bw(g):
        g2 = g.reshape(-1, cout)
        gw = (cols.reshape(-1, kh * kw * cin).T @ g2).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ w.data.reshape(-1, cout).T).reshape(cols.shape)
            gx = kernels.col2im(gcols, h, wd, dilation, dilation, stride, ph, pw)
        return gx, gw

    return _make(out, (x, w), bw)


def _correlate_output_side(x: Tensor, w: Tensor, d: int) -> Tensor:
    # project channels first, then shift-add per tap; cheaper when C_out < C_in
    n, h, wd, cin = x.shape
    kh, kw, _, cout = w.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"kernel extents must be odd, got {kh}x{kw}")
    ph, pw = d * (kh // 2), d * (kw // 2)
    wflip = np.ascontiguousarray(w.data[::-1, ::-1].transpose(2, 0, 1, 3)).reshape(cin, -1)
    proj = (x.data.reshape(-1, cin) @ wflip).reshape(n, h, wd, kh, kw, cout)
    out = kernels.col2im(proj, h, wd, d, d, 1, ph, pw)

    def bw(g):
        gflip = kernels.im2col(np.ascontiguousarray(g), kh, kw, d, d, 1, ph, pw, h, wd)[:, :, :, ::-1, ::-1]
        gflip = np.ascontiguousarray(gflip).reshape(-1, kh * kw * cout)
        gx = gw = None
        if x.requires_grad:
            wt = np.ascontiguousarray(w.data.transpose(0, 1, 3, 2)).reshape(-1, cin)
            gx = (gflip @ wt).reshape(x.shape)
        if w.requires_grad:
            gw = (x.data.reshape(-1, cin).T @ gflip).reshape(cin, kh, kw, cout).transpose(1, 2, 0, 3)
        return gx, gw

    return _make(out, (x, w), bw)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias along the last axis."""
    axes = tuple(range(x.ndim - 1))
    return _make(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=axes)))


def max_pool2d(x: Tensor, size: int = 2, stride: int | None = None) -> Tensor:
    """Classical max-pooling over ``size x size`` windows anchored top-left."""
    stride = size if stride is None else stride
    n, h, w, c = x.shape
    oh, ow = (h - size) // stride + 1, (w - size) // stride + 1
    cols = kernels.im2col(np.ascontiguousarray(x.data), size, size, 1, 1, stride, 0, 0, oh, ow)
    flat = cols.reshape(n, oh, ow, size * size, c)
    arg = flat.argmax(axis=3)
    out = np.take_along_axis(flat, arg[:, :, :, None, :], axis=3)[:, :, :, 0, :]

    def bw(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, arg[:, :, :, None, :], g[:, :, :, None, :], axis=3)
        return (kernels.col2im(gflat.reshape(cols.shape), h, w, 1, 1, stride, 0, 0),)

    return _make(np.ascontiguousarray(out), (x,), bw)


# ---------------------------------------------------------------- checking helpers


def numeric_grad(fn, arr: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Central finite differences of scalar ``fn()`` with respect to ``arr`` (mutated in place)."""
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = float(fn())
        flat[i] = old - h
        down = float(fn())
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return grad


def relative_error(analytic, numeric, floor: float = 1e-8) -> np.ndarray:
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    a, n = np.asarray(analytic, dtype=np.float64), np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def fan_in_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=DEFAULT_DTYPE) -> np.ndarray:
    bound = math.sqrt(6.0 / max(1, fan_in))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)
