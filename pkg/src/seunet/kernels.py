"""Backend selection for the hot spatial kernels.

The compiled extension is used when it was built; otherwise the numpy
fallback is imported. Set ``SEUNET_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("SEUNET_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _pykernels

im2col = _impl.im2col
col2im = _impl.col2im
window_argmax = _impl.window_argmax
window_scatter = _impl.window_scatter

__all__ = ["BACKEND", "im2col", "col2im", "window_argmax", "window_scatter"]
