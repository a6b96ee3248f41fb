"""Pure numpy implementations of the hot kernels.

Same signatures as the compiled ``_kernels`` extension. Padding is always
given explicitly as (top, bottom, left, right).
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _out_size(n, k, stride, lo, hi):
    return (n + lo + hi - k) // stride + 1


def _pad(x, pt, pb, pl, pr):
    if pt == pb == pl == pr == 0:
        return x
    return np.pad(x, ((0, 0), (pt, pb), (pl, pr)))


def im2col(x, kh, kw, stride, pt, pb, pl, pr):
    C, H, W = x.shape
    Ho = _out_size(H, kh, stride, pt, pb)
    Wo = _out_size(W, kw, stride, pl, pr)
    xp = _pad(x, pt, pb, pl, pr)
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, : (Ho - 1) * stride + 1 : stride, : (Wo - 1) * stride + 1 : stride]
    # C, Ho, Wo, kh, kw -> C, kh, kw, Ho, Wo
    return np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(C * kh * kw, Ho * Wo)


def col2im(cols, C, H, W, kh, kw, stride, pt, pb, pl, pr):
    Ho = _out_size(H, kh, stride, pt, pb)
    Wo = _out_size(W, kw, stride, pl, pr)
    xp = np.zeros((C, H + pt + pb, W + pl + pr), dtype=cols.dtype)
    c6 = cols.reshape(C, kh, kw, Ho, Wo)
    for i in range(kh):
        for j in range(kw):
            xp[:, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += c6[:, i, j]
    return np.ascontiguousarray(xp[:, pt : pt + H, pl : pl + W])


def depthwise_conv2d(x, w, stride, pt, pb, pl, pr, bias=None):
    C, H, W = x.shape
    kh, kw = w.shape[1:]
    Ho = _out_size(H, kh, stride, pt, pb)
    Wo = _out_size(W, kw, stride, pl, pr)
    xp = _pad(x, pt, pb, pl, pr)
    out = np.zeros((C, Ho, Wo), dtype=x.dtype)
    if bias is not None:
        out += bias[:, None, None]
    for i in range(kh):
        for j in range(kw):
            out += w[:, i, j, None, None] * xp[:, i : i + stride * Ho : stride, j : j + stride * Wo : stride]
    return out


def depthwise_conv2d_backward(dout, x, w, stride, pt, pb, pl, pr):
    C, H, W = x.shape
    kh, kw = w.shape[1:]
    Ho, Wo = dout.shape[1:]
    xp = _pad(x, pt, pb, pl, pr)
    dxp = np.zeros_like(xp)
    dw = np.empty_like(w)
    for i in range(kh):
        for j in range(kw):
            sl = (slice(None), slice(i, i + stride * Ho, stride), slice(j, j + stride * Wo, stride))
            dw[:, i, j] = np.einsum("chw,chw->c", dout, xp[sl])
            dxp[sl] += w[:, i, j, None, None] * dout
    return np.ascontiguousarray(dxp[:, pt : pt + H, pl : pl + W]), dw


def layernorm_columns(x, gamma, beta, eps, addend=None, shift=None):
    if addend is not None:
        x += addend
    if shift is not None:
        x += shift[:, None]
    D = x.shape[0]
    mean = x.mean(axis=0, keepdims=True)
    xc = x - mean
    var = np.einsum("ij,ij->j", xc, xc) / D
    rstd = (1.0 / np.sqrt(var + eps)).astype(x.dtype)[None, :]
    xc *= rstd
    out = xc * gamma[:, None]
    out += beta[:, None]
    return out, mean, rstd


def bias_relu_(h, b):
    h += b[:, None]
    np.maximum(h, 0, out=h)
