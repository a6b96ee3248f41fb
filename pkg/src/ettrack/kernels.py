"""Backend selection for the hot convolution kernels.

The compiled extension is used when it imports; otherwise the numpy
fallback. Set ``ETTK_PURE_PYTHON=1`` to force the fallback.
"""
import contextlib
import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("ETTK_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"


def available_backends():
    names = ["python"]
    try:
        from . import _kernels  # noqa: F401
    except ImportError:
        return names
    return names + ["cython"]


def get_backend(name=None):
    """Return the kernel module for ``name`` ('python' or 'cython'), or the active one."""
    if name is None:
        return _impl
    if name == "python":
        return _kernels_py
    if name == "cython":
        from . import _kernels

        return _kernels
    raise ValueError(f"unknown kernel backend {name!r}")


@contextlib.contextmanager
def use_backend(name):
    """Temporarily route every kernel call through backend ``name``."""
    global _impl, BACKEND
    old = _impl, BACKEND
    _impl, BACKEND = get_backend(name), name
    try:
        yield _impl
    finally:
        _impl, BACKEND = old


def im2col(x, kh, kw, stride, pads):
    return _impl.im2col(x, kh, kw, stride, *pads)


def col2im(cols, shape, kh, kw, stride, pads):
    C, H, W = shape
    return _impl.col2im(cols, C, H, W, kh, kw, stride, *pads)


def depthwise_conv2d(x, w, stride, pads, bias=None):
    return _impl.depthwise_conv2d(x, w, stride, *pads, bias)


def depthwise_conv2d_backward(dout, x, w, stride, pads):
    return _impl.depthwise_conv2d_backward(dout, x, w, stride, *pads)


def layernorm_columns(x, gamma, beta, eps, addend=None, shift=None):
    return _impl.layernorm_columns(x, gamma, beta, eps, addend, shift)


def bias_relu_(h, b):
    _impl.bias_relu_(h, b)
    return h
