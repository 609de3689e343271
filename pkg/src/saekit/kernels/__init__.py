"""Hot loops for convolution and pooling.

The compiled extension ``_ext`` is used when it was built; otherwise the
NumPy implementations in ``_pure`` are used. Set ``SAEKIT_PURE=1`` to force
the fallback. ``SAEKIT_THREADS`` caps the compiled kernels' thread count
(0 or 1 means serial).
"""
import os

import numpy as np

from . import _pure

try:
    from . import _ext
except ImportError:  # extension not built
    _ext = None

BACKENDS = ("numpy",) + (("cython",) if _ext is not None else ())


def _default_backend() -> str:
    if _ext is None or os.environ.get("SAEKIT_PURE", "") not in ("", "0"):
        return "numpy"
    return "cython"


_backend = _default_backend()


def get_backend() -> str:
    return _backend


def set_backend(name: str) -> None:
    global _backend
    if name not in BACKENDS:
        raise ValueError(f"backend {name!r} unavailable; choose from {BACKENDS}")
    _backend = name


def num_threads() -> int:
    raw = os.environ.get("SAEKIT_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        n = 1
    return max(n, 1)


def im2col(x, kh, kw, stride, pad, ho, wo):
    """Unfold ``x`` (N, C, H, W) into columns (N, C*kh*kw, ho*wo)."""
    if _backend == "cython":
        x = np.ascontiguousarray(x)
        out = np.empty((x.shape[0], x.shape[1] * kh * kw, ho * wo), dtype=x.dtype)
        _ext.im2col(x, kh, kw, stride, pad, ho, wo, out, num_threads())
        return out
    return _pure.im2col(x, kh, kw, stride, pad, ho, wo)


def col2im(cols, x_shape, kh, kw, stride, pad, ho, wo):
    """Adjoint of :func:`im2col`: scatter-add columns back to (N, C, H, W)."""
    if _backend == "cython":
        cols = np.ascontiguousarray(cols)
        dx = np.zeros(x_shape, dtype=cols.dtype)
        _ext.col2im(cols, kh, kw, stride, pad, ho, wo, dx, num_threads())
        return dx
    return _pure.col2im(cols, x_shape, kh, kw, stride, pad, ho, wo)


def maxpool_forward(x, k, stride, pad, ho, wo):
    """Windowed max and the flat (h*W + w) index of the first maximum."""
    if _backend == "cython":
        x = np.ascontiguousarray(x)
        n, c = x.shape[:2]
        out = np.empty((n, c, ho, wo), dtype=x.dtype)
        arg = np.empty((n, c, ho, wo), dtype=np.int64)
        _ext.maxpool_forward(x, k, stride, pad, ho, wo, out, arg, num_threads())
        return out, arg
    return _pure.maxpool_forward(x, k, stride, pad, ho, wo)


def maxpool_backward(dout, argmax, x_shape):
    if _backend == "cython":
        n, c, h, w = x_shape
        dx = np.zeros((n * c, h * w), dtype=dout.dtype)
        _ext.maxpool_backward(np.ascontiguousarray(dout), np.ascontiguousarray(argmax), dx, num_threads())
        return dx.reshape(x_shape)
    return _pure.maxpool_backward(dout, argmax, x_shape)
