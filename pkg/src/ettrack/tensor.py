"""Dense tensor primitives with analytic backward passes.

Tensors are plain C-contiguous numpy arrays, channels-first (C x H x W) for
feature maps and row-major (N x D) for token matrices. float32 is the
working precision; float64 is supported everywhere so gradients can be
checked against finite differences.

Every differentiable primitive ``op`` comes as a pair::

    out, cache = op_forward(...)
    grads = op_backward(dout, cache)

plus a plain ``op(...)`` that returns only the output.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np

from . import kernels

Tensor = np.ndarray
DTYPES = (np.float32, np.float64)

# Set by the test-suite (or ETTK_DEBUG=1) to assert finite outputs.
CHECK_FINITE = os.environ.get("ETTK_DEBUG", "") in ("1", "true", "yes")

Padding = Union[int, Tuple[int, int, int, int]]


class ShapeError(ValueError):
    """Raised when tensor shapes do not satisfy an operation's contract."""


def _finite(out, name):
    if CHECK_FINITE and not np.all(np.isfinite(out)):
        raise FloatingPointError(f"{name}: non-finite output")
    return out


def _need_cache(cache, name):
    if cache is None:
        raise ValueError(f"{name}: missing forward cache")


def as_tensor(a, dtype=np.float32) -> Tensor:
    if np.dtype(dtype) not in [np.dtype(d) for d in DTYPES]:
        raise TypeError(f"unsupported dtype {dtype}; use float32 or float64")
    return np.ascontiguousarray(a, dtype=dtype)


# --------------------------------------------------------------------------
# convolution


@dataclass(frozen=True)
class ConvSpec:
    out_channels: int
    in_channels: int
    kernel_size: int
    stride: int = 1
    padding: Padding = 0
    groups: int = 1

    def __post_init__(self):
        if self.in_channels % self.groups:
            raise ShapeError(f"in_channels={self.in_channels} not divisible by groups={self.groups}")
        if self.out_channels % self.groups:
            raise ShapeError(f"out_channels={self.out_channels} not divisible by groups={self.groups}")
        if self.stride < 1:
            raise ShapeError(f"stride must be >= 1, got {self.stride}")

    @classmethod
    def same(cls, out_channels, in_channels, kernel_size, groups=1):
        """Stride-1 convolution whose output has the input's spatial size."""
        if kernel_size % 2 == 0:
            raise ShapeError(f"'same' padding needs an odd kernel_size, got {kernel_size}")
        return cls(out_channels, in_channels, kernel_size, 1, (kernel_size - 1) // 2, groups)

    @property
    def pads(self) -> Tuple[int, int, int, int]:
        if isinstance(self.padding, int):
            return (self.padding,) * 4
        return tuple(self.padding)

    def output_hw(self, H, W):
        pt, pb, pl, pr = self.pads
        k, s = self.kernel_size, self.stride
        for name, n, lo, hi in (("height", H, pt, pb), ("width", W, pl, pr)):
            span = n + lo + hi - k
            if span < 0:
                raise ShapeError(f"kernel_size={k} larger than padded input {name} {n + lo + hi}")
            if span % s:
                raise ShapeError(f"input {name} {n} with padding ({lo},{hi}) is not tiled exactly by stride {s}")
        return (H + pt + pb - k) // s + 1, (W + pl + pr - k) // s + 1

    def check(self, x, w, b=None):
        if x.ndim != 3:
            raise ShapeError(f"conv2d input must be C x H x W, got ndim={x.ndim}")
        if x.shape[0] != self.in_channels:
            raise ShapeError(f"conv2d input channels {x.shape[0]} != in_channels {self.in_channels}")
        expect = (self.out_channels, self.in_channels // self.groups, self.kernel_size, self.kernel_size)
        if w.shape != expect:
            raise ShapeError(f"conv2d kernel shape {w.shape} != expected {expect}")
        if b is not None and b.shape != (self.out_channels,):
            raise ShapeError(f"conv2d bias length {b.shape} != out_channels {self.out_channels}")


def conv2d_forward(x: Tensor, w: Tensor, b: Optional[Tensor], spec: ConvSpec):
    spec.check(x, w, b)
    C, H, W = x.shape
    Ho, Wo = spec.output_hw(H, W)
    k, s, pads, g = spec.kernel_size, spec.stride, spec.pads, spec.groups
    O = spec.out_channels
    if g == 1 and s == 1 and O < C:
        out = _conv_output_lowered(x, w, pads, Ho, Wo)
        cache = (x, w, b, spec, None)
    elif g == 1:
        cols = kernels.im2col(x, k, k, s, pads)
        out = (w.reshape(O, -1) @ cols).reshape(O, Ho, Wo)
        cache = (x, w, b, spec, cols)
    elif g == C and O == C:
        out = kernels.depthwise_conv2d(x, np.ascontiguousarray(w[:, 0]), s, pads, b)
        return _finite(out, "conv2d"), (x, w, b, spec, None)
    else:
        cg, og = C // g, O // g
        out = np.empty((O, Ho, Wo), dtype=x.dtype)
        cols = []
        for i in range(g):
            c = kernels.im2col(np.ascontiguousarray(x[i * cg : (i + 1) * cg]), k, k, s, pads)
            out[i * og : (i + 1) * og] = (w[i * og : (i + 1) * og].reshape(og, -1) @ c).reshape(og, Ho, Wo)
            cols.append(c)
        cache = (x, w, b, spec, cols)
    if b is not None:
        out += b[:, None, None]
    return _finite(out, "conv2d"), cache


def _conv_output_lowered(x, w, pads, Ho, Wo):
    # Multiply first (O*k*k rows instead of C*k*k), then add shifted planes.
    O, C, k, _ = w.shape
    _, H, W = x.shape
    pt, _, pl, _ = pads
    Y = (w.transpose(0, 2, 3, 1).reshape(O * k * k, C) @ x.reshape(C, H * W)).reshape(O, k, k, H, W)
    out = np.zeros((O, Ho, Wo), dtype=x.dtype)
    for i in range(k):
        y0, y1 = max(0, pt - i), min(Ho, H + pt - i)
        for j in range(k):
            x0, x1 = max(0, pl - j), min(Wo, W + pl - j)
            if y1 > y0 and x1 > x0:
                out[:, y0:y1, x0:x1] += Y[:, i, j, y0 + i - pt : y1 + i - pt, x0 + j - pl : x1 + j - pl]
    return out


def conv2d_backward(dout: Tensor, cache):
    """Returns (dx, dw, db); db is None when the forward had no bias."""
    _need_cache(cache, "conv2d_backward")
    x, w, b, spec, cols = cache
    C, H, W = x.shape
    O = spec.out_channels
    k, s, pads, g = spec.kernel_size, spec.stride, spec.pads, spec.groups
    dout = np.ascontiguousarray(dout)
    db = dout.sum(axis=(1, 2)) if b is not None else None
    if g == 1:
        if cols is None:
            cols = kernels.im2col(x, k, k, s, pads)
        d2 = dout.reshape(O, -1)
        dw = (d2 @ cols.T).reshape(w.shape)
        dx = kernels.col2im(np.ascontiguousarray(w.reshape(O, -1).T @ d2), (C, H, W), k, k, s, pads)
    elif cols is None:
        dx, dw0 = kernels.depthwise_conv2d_backward(dout, x, np.ascontiguousarray(w[:, 0]), s, pads)
        dw = dw0[:, None]
    else:
        cg, og = C // g, O // g
        dx = np.empty_like(x)
        dw = np.empty_like(w)
        for i in range(g):
            d2 = dout[i * og : (i + 1) * og].reshape(og, -1)
            wg = w[i * og : (i + 1) * og].reshape(og, -1)
            dw[i * og : (i + 1) * og] = (d2 @ cols[i].T).reshape(og, cg, k, k)
            dx[i * cg : (i + 1) * cg] = kernels.col2im(np.ascontiguousarray(wg.T @ d2), (cg, H, W), k, k, s, pads)
    return dx, dw, db


def conv2d(x, w, b=None, stride=1, padding: Padding = 0, groups=1):
    spec = ConvSpec(w.shape[0], x.shape[0], w.shape[-1], stride, padding, groups)
    return conv2d_forward(x, w, b, spec)[0]


def separable_to_dense(dw: Tensor, pw: Tensor) -> Tensor:
    """Collapse a depthwise (C x 1 x Z x Z) + pointwise (O x C x 1 x 1) pair
    into the equivalent dense O x C x Z x Z kernel."""
    return pw[:, :, 0, 0, None, None] * dw[None, :, 0]


# --------------------------------------------------------------------------
# dense layers


def linear_forward(x: Tensor, W: Tensor, b: Optional[Tensor]):
    if x.ndim != 2 or W.ndim != 2:
        raise ShapeError(f"linear expects 2-D x and W, got {x.shape} and {W.shape}")
    if x.shape[1] != W.shape[0]:
        raise ShapeError(f"linear inner dimension mismatch: x has {x.shape[1]} columns, W has {W.shape[0]} rows")
    if b is not None and b.shape != (W.shape[1],):
        raise ShapeError(f"linear bias length {b.shape} != output width {W.shape[1]}")
    out = x @ W
    if b is not None:
        out = out + b
    return _finite(out, "linear"), (x, W, b)


def linear_backward(dout, cache):
    _need_cache(cache, "linear_backward")
    x, W, b = cache
    return dout @ W.T, x.T @ dout, (dout.sum(axis=0) if b is not None else None)


def linear(x, W, b=None):
    return linear_forward(x, W, b)[0]


def softmax_lastdim(x: Tensor) -> Tensor:
    if x.shape[-1] < 1:
        raise ShapeError("softmax over an empty axis")
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return _finite(e / e.sum(axis=-1, keepdims=True), "softmax")


def softmax_forward(x):
    y = softmax_lastdim(x)
    return y, y


def softmax_backward(dout, cache):
    _need_cache(cache, "softmax_backward")
    y = cache
    return y * (dout - (dout * y).sum(axis=-1, keepdims=True))


# --------------------------------------------------------------------------
# pooling


def pool_windows(n: int, S: int):
    """Adaptive pooling windows [floor(i n / S), ceil((i+1) n / S)) along one axis."""
    return [((i * n) // S, -((-(i + 1) * n) // S)) for i in range(S)]


def patch_index(n: int, S: int) -> np.ndarray:
    """Owning patch of every position along an axis of length n: floor(p S / n).

    Unlike the pooling windows, which overlap when S does not divide n, this
    is a partition.
    """
    return (np.arange(n) * S) // n


def adaptive_avg_pool_forward(x: Tensor, S: int):
    if x.ndim != 3:
        raise ShapeError(f"adaptive_avg_pool expects D x H x W, got ndim={x.ndim}")
    D, H, W = x.shape
    if not 1 <= S <= min(H, W):
        raise ShapeError(f"pool grid S={S} outside [1, min(H, W)={min(H, W)}]")
    if S == 1:
        # a matvec is several times faster than mean() for small maps
        out = (x.reshape(D, H * W) @ np.full(H * W, 1.0 / (H * W), dtype=x.dtype)).reshape(D, 1, 1)
    else:
        out = np.empty((D, S, S), dtype=x.dtype)
        for i, (y0, y1) in enumerate(pool_windows(H, S)):
            for j, (x0, x1) in enumerate(pool_windows(W, S)):
                out[:, i, j] = x[:, y0:y1, x0:x1].mean(axis=(1, 2))
    return out, (x.shape, S)


def adaptive_avg_pool_backward(dout, cache):
    _need_cache(cache, "adaptive_avg_pool_backward")
    (D, H, W), S = cache
    dx = np.zeros((D, H, W), dtype=dout.dtype)
    for i, (y0, y1) in enumerate(pool_windows(H, S)):
        for j, (x0, x1) in enumerate(pool_windows(W, S)):
            dx[:, y0:y1, x0:x1] += dout[:, i, j, None, None] / ((y1 - y0) * (x1 - x0))
    return dx


def adaptive_avg_pool(x, S):
    return adaptive_avg_pool_forward(x, S)[0]


# --------------------------------------------------------------------------
# normalization and elementwise ops


def layernorm_forward(x: Tensor, gamma: Tensor, beta: Tensor, eps=1e-5, axis=-1):
    """Normalise each slice along ``axis`` (the feature axis), then scale and shift.

    ``axis=-1`` is the usual N x D token layout; ``axis=0`` normalises the
    feature vector at every position of a channels-first D x N map.
    """
    if x.ndim != 2:
        raise ShapeError(f"layernorm expects a 2-D input, got ndim={x.ndim}")
    D = x.shape[axis]
    if gamma.shape != (D,) or beta.shape != (D,):
        raise ShapeError(f"layernorm: feature width {D}, gamma {gamma.shape}, beta {beta.shape} do not agree")
    if axis in (0, -2):
        if x.flags.c_contiguous and x.dtype == gamma.dtype == beta.dtype and x.dtype in DTYPES:
            # the cache keeps x and the statistics; xhat is rebuilt in backward
            out, mean, rstd = kernels.layernorm_columns(x, gamma, beta, eps)
            return _finite(out, "layernorm"), ((x, mean), rstd, gamma, 0)
        g, b = gamma[:, None], beta[:, None]
        axis = 0
    else:
        g, b = gamma, beta
        axis = 1
    xc = x - x.mean(axis=axis, keepdims=True)
    var = np.einsum("ij,ij->j" if axis == 0 else "ij,ij->i", xc, xc) / D
    rstd = 1.0 / np.sqrt(var + eps)
    rstd = rstd[None, :] if axis == 0 else rstd[:, None]
    xhat = xc
    xhat *= rstd
    out = xhat * g
    out += b
    return _finite(out, "layernorm"), (xhat, rstd, gamma, axis)


def add_layernorm_forward(x, gamma, beta, eps=1e-5, addend=None, shift=None):
    """Channels-first LayerNorm of ``x + addend + shift[:, None]``.

    ``x`` (D x N) is overwritten with the sum. Backward is
    ``layernorm_backward``; its dx is also the gradient of ``addend``, and
    dx summed over positions is the gradient of ``shift``.
    """
    if x.ndim == 2 and x.flags.c_contiguous and x.dtype in DTYPES and all(
            a is None or (a.dtype == x.dtype and a.flags.c_contiguous) for a in (gamma, beta, addend, shift)):
        if addend is not None and addend.shape != x.shape:
            raise ShapeError(f"add_layernorm: addend {addend.shape} != x {x.shape}")
        if shift is not None and shift.shape != (x.shape[0],):
            raise ShapeError(f"add_layernorm: shift {shift.shape} != ({x.shape[0]},)")
        if gamma.shape != (x.shape[0],) or beta.shape != (x.shape[0],):
            raise ShapeError(f"layernorm: feature width {x.shape[0]}, gamma {gamma.shape}, beta {beta.shape} do not agree")
        out, mean, rstd = kernels.layernorm_columns(x, gamma, beta, eps, addend, shift)
        return _finite(out, "layernorm"), ((x, mean), rstd, gamma, 0)
    if addend is not None:
        x += addend
    if shift is not None:
        x += shift[:, None]
    return layernorm_forward(x, gamma, beta, eps, axis=0)


def layernorm_backward(dout, cache):
    """Returns (dx, dgamma, dbeta)."""
    _need_cache(cache, "layernorm_backward")
    xhat, rstd, gamma, axis = cache
    if isinstance(xhat, tuple):
        x, mean = xhat
        xhat = (x - mean) * rstd
    other = 1 - axis
    dgamma = (dout * xhat).sum(axis=other)
    dbeta = dout.sum(axis=other)
    g = dout * (gamma[:, None] if axis == 0 else gamma)
    dx = rstd * (g - g.mean(axis=axis, keepdims=True) - xhat * (g * xhat).mean(axis=axis, keepdims=True))
    return dx, dgamma, dbeta


def layernorm(x, gamma, beta, eps=1e-5, axis=-1):
    return layernorm_forward(x, gamma, beta, eps, axis)[0]


def relu(x):
    return np.maximum(x, 0)


def relu_forward(x):
    return relu(x), x > 0


def relu_backward(dout, cache):
    _need_cache(cache, "relu_backward")
    return dout * cache


def bias_relu_forward(x, b):
    """``relu(x + b[:, None])`` for a D x N map, computed in place on ``x``.

    The output doubles as the cache: the ReLU passes gradient where it is positive.
    """
    if x.ndim != 2 or b.shape != (x.shape[0],):
        raise ShapeError(f"bias_relu expects D x N input and length-D bias, got {x.shape} and {b.shape}")
    if x.flags.c_contiguous and x.dtype == b.dtype and x.dtype in DTYPES:
        kernels.bias_relu_(x, b)
    else:
        x += b[:, None]
        np.maximum(x, 0, out=x)
    return x, x


def bias_relu_backward(dout, cache):
    """Returns (dx, db)."""
    _need_cache(cache, "bias_relu_backward")
    dx = dout * (cache > 0)
    return dx, dx.sum(axis=1)


def add(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return a + b


def scale(x, s):
    return x * x.dtype.type(s)


def batchnorm_inference_forward(x: Tensor, mean, var, gamma, beta, eps=1e-5):
    C = x.shape[0]
    for name, v in (("mean", mean), ("var", var), ("gamma", gamma), ("beta", beta)):
        if v.shape != (C,):
            raise ShapeError(f"batchnorm {name} has {v.shape[0] if v.ndim else 0} channels, input has {C}")
    k = gamma / np.sqrt(var + eps)
    out = x * k[:, None, None] + (beta - mean * k)[:, None, None]
    return _finite(out, "batchnorm"), (x, mean, var, eps, k)


def batchnorm_inference_backward(dout, cache):
    """Returns (dx, dgamma, dbeta); statistics are fixed and get no gradient."""
    _need_cache(cache, "batchnorm_inference_backward")
    x, mean, var, eps, k = cache
    xhat = (x - mean[:, None, None]) / np.sqrt(var + eps)[:, None, None]
    return dout * k[:, None, None], (dout * xhat).sum(axis=(1, 2)), dout.sum(axis=(1, 2))


def batchnorm_inference(x, mean, var, gamma, beta, eps=1e-5):
    return batchnorm_inference_forward(x, mean, var, gamma, beta, eps)[0]


def dropout_forward(x, rate, rng=None):
    """Inverted dropout; identity when ``rng`` is None (inference)."""
    if rng is None or rate == 0:
        return x, None
    mask = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1 - rate)
    return x * mask, mask


def dropout_backward(dout, mask):
    return dout if mask is None else dout * mask
