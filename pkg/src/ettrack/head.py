"""Tracker head: correlation, classification/regression branches, box decoding.

Both branches read the same D x H x W correlation map. The classification
branch is 5 body modules plus a 1-channel 3x3 projection (6 modules); the
regression branch is 7 body modules plus a 4-channel 3x3 projection
(8 modules). Regression outputs go through ``exp`` and are pixel distances
from each cell centre to the four box sides.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import List, Optional, Union

import numpy as np

from . import attention as att
from . import kernels
from . import tensor as T
from .tensor import ShapeError

CLS_MODULES = 6
REG_MODULES = 8


class HeadKind(str, enum.Enum):
    CONV = "conv"
    EXEMPLAR = "exemplar"
    STANDARD_ATTN = "standard_attn"


@dataclass
class ConvModuleParams:
    """Depthwise-separable conv + BatchNorm (fixed statistics) + ReLU."""

    dw: np.ndarray  # D x 1 x Z x Z
    pw: np.ndarray  # D_out x D x 1 x 1
    pw_b: np.ndarray
    bn_mean: np.ndarray
    bn_var: np.ndarray
    bn_gamma: np.ndarray
    bn_beta: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        D = self.dw.shape[0]
        if self.dw.shape[1] != 1 or self.pw.shape[1:] != (D, 1, 1):
            raise ShapeError(f"depthwise {self.dw.shape} / pointwise {self.pw.shape} kernels do not fit")

    @property
    def D(self):
        return self.dw.shape[0]

    def arrays(self, prefix=""):
        return att._prefixed(prefix, {
            "dw": self.dw, "pw": self.pw, "pw_b": self.pw_b,
            "bn.mean": self.bn_mean, "bn.var": self.bn_var, "bn.gamma": self.bn_gamma, "bn.beta": self.bn_beta,
        })


@dataclass
class ResidualConvParams:
    """``LN(conv(x) + b + x)``: a dense convolution with a residual connection
    and LayerNorm, the exact counterpart of a single-exemplar ATT_ONLY layer."""

    w: np.ndarray  # D x D x Z x Z
    b: np.ndarray
    ln_gamma: np.ndarray
    ln_beta: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        D = self.w.shape[0]
        if self.w.shape[1] != D or self.w.shape[2] != self.w.shape[3]:
            raise ShapeError(f"residual conv kernel must be D x D x Z x Z, got {self.w.shape}")

    @property
    def D(self):
        return self.w.shape[0]

    def arrays(self, prefix=""):
        return att._prefixed(prefix, {"w": self.w, "b": self.b, "ln.gamma": self.ln_gamma, "ln.beta": self.ln_beta})


@dataclass
class ProjectionParams:
    w: np.ndarray  # O x D x 3 x 3
    b: np.ndarray

    def arrays(self, prefix=""):
        return att._prefixed(prefix, {"w": self.w, "b": self.b})


Module = Union[ConvModuleParams, ResidualConvParams, att.TransformerLayerParams, ProjectionParams]


@dataclass
class HeadParams:
    cls_modules: List[Module]
    reg_modules: List[Module]
    head_kind: HeadKind = HeadKind.CONV
    use_tcond: bool = False

    def __post_init__(self):
        self.head_kind = HeadKind(self.head_kind)
        if len(self.cls_modules) != CLS_MODULES or len(self.reg_modules) != REG_MODULES:
            raise ShapeError(f"branches must have {CLS_MODULES}/{REG_MODULES} modules, got "
                             f"{len(self.cls_modules)}/{len(self.reg_modules)}")
        for branch, out in ((self.cls_modules, 1), (self.reg_modules, 4)):
            last = branch[-1]
            if not isinstance(last, ProjectionParams) or last.w.shape[0] != out:
                raise ShapeError(f"branch must end in a {out}-channel projection")

    @property
    def D(self):
        return self.cls_modules[-1].w.shape[1]

    def arrays(self, prefix=""):
        out = {}
        for name, branch in (("cls", self.cls_modules), ("reg", self.reg_modules)):
            for i, m in enumerate(branch):
                out.update(m.arrays(f"{prefix}{name}.{i}."))
        return out

    def trainable(self):
        """Arrays updated by the toy trainer (BatchNorm stays frozen)."""
        return {k: v for k, v in self.arrays().items() if ".bn." not in k}

    def num_parameters(self):
        return int(sum(v.size for k, v in self.arrays().items() if not k.endswith(("bn.mean", "bn.var"))))


# --------------------------------------------------------------------------
# modules


def conv_module_forward(x, p: ConvModuleParams):
    D, H, W = x.shape
    if D != p.D:
        raise ShapeError(f"conv module expects {p.D} channels, got {D}")
    Z = p.dw.shape[-1]
    h, c1 = T.conv2d_forward(x, p.dw, None, T.ConvSpec.same(D, D, Z, groups=D))
    O = p.pw.shape[0]
    hf = h.reshape(D, H * W)
    y = p.pw[:, :, 0, 0] @ hf
    y += p.pw_b[:, None]
    y, bn = T.batchnorm_inference_forward(y.reshape(O, H, W), p.bn_mean, p.bn_var, p.bn_gamma, p.bn_beta, p.eps)
    y, rc = T.relu_forward(y)
    return y, (p, (D, H, W), c1, hf, bn, rc)


def conv_module_backward(dout, cache):
    p, (D, H, W), c1, hf, bn, rc = cache
    O = p.pw.shape[0]
    grads = {}
    g = T.relu_backward(dout, rc)
    g, grads["bn.gamma"], grads["bn.beta"] = T.batchnorm_inference_backward(g, bn)
    g = g.reshape(O, H * W)
    grads["pw"] = (g @ hf.T)[:, :, None, None]
    grads["pw_b"] = g.sum(axis=1)
    dh = (p.pw[:, :, 0, 0].T @ g).reshape(D, H, W)
    dx, grads["dw"], _ = T.conv2d_backward(dh, c1)
    return dx, grads


def residual_conv_forward(x, p: ResidualConvParams):
    D, H, W = x.shape
    if D != p.D:
        raise ShapeError(f"residual conv module expects {p.D} channels, got {D}")
    y, cc = T.conv2d_forward(x, p.w, p.b, T.ConvSpec.same(D, D, p.w.shape[-1]))
    y += x
    y, ln = T.layernorm_forward(y.reshape(D, H * W), p.ln_gamma, p.ln_beta, p.eps, axis=0)
    return y.reshape(D, H, W), (cc, ln, (D, H, W))


def residual_conv_backward(dout, cache):
    cc, ln, shape = cache
    g, dgamma, dbeta = T.layernorm_backward(dout.reshape(shape[0], -1), ln)
    g = g.reshape(shape)
    dx, dw, db = T.conv2d_backward(g, cc)
    return dx + g, {"w": dw, "b": db, "ln.gamma": dgamma, "ln.beta": dbeta}


def projection_forward(x, p: ProjectionParams):
    O, D, Z, _ = p.w.shape
    return T.conv2d_forward(x, p.w, p.b, T.ConvSpec.same(O, D, Z))


def _module_forward(x, m, tcond):
    if isinstance(m, att.TransformerLayerParams):
        return att.transformer_layer_forward(x, m, tcond)
    if isinstance(m, ConvModuleParams):
        return conv_module_forward(x, m)
    if isinstance(m, ResidualConvParams):
        return residual_conv_forward(x, m)
    return projection_forward(x, m)


def _module_backward(dout, m, cache):
    """Returns (dx, grads, dtcond)."""
    if isinstance(m, att.TransformerLayerParams):
        return att.transformer_layer_backward(dout, cache)
    if isinstance(m, ConvModuleParams):
        return conv_module_backward(dout, cache) + (None,)
    if isinstance(m, ResidualConvParams):
        return residual_conv_backward(dout, cache) + (None,)
    dx, dw, db = T.conv2d_backward(dout, cache)
    return dx, {"w": dw, "b": db}, None


# --------------------------------------------------------------------------
# head


def _run_branches(corr, p, tc, keep):
    outs, caches = [], []
    for branch in (p.cls_modules, p.reg_modules):
        h, bc = corr, []
        for m in branch:
            h, c = _module_forward(h, m, tc)
            if keep:
                bc.append(c)
        outs.append(h)
        caches.append(bc)
    return outs, caches


def _check_corr(corr, p):
    if corr.ndim != 3 or corr.shape[0] != p.D:
        raise ShapeError(f"correlation map must be {p.D} x H x W, got {corr.shape}")
    return corr


def head_forward(corr, p: HeadParams, tcond=None):
    """Returns ((cls_logits 1xHxW, ltrb 4xHxW), cache).

    ``tcond`` is only used when ``p.use_tcond`` is set; it is added to the
    input of every transformer layer.
    """
    tc = tcond if p.use_tcond else None
    (cls_logits, raw), caches = _run_branches(_check_corr(corr, p), p, tc, keep=True)
    ltrb = np.exp(raw)
    return (cls_logits, ltrb), (p, caches, ltrb, tc is not None)


def head(corr, p, tcond=None):
    """Inference forward. Per-module caches are dropped as soon as each module returns."""
    tc = tcond if p.use_tcond else None
    (cls_logits, raw), _ = _run_branches(_check_corr(corr, p), p, tc, keep=False)
    return cls_logits, np.exp(raw)


def head_backward(dcls, dltrb, cache):
    """Returns (dcorr, grads, dtcond); grads keyed like ``HeadParams.arrays()``."""
    if cache is None:
        raise ValueError("head_backward: missing forward cache")
    p, caches, ltrb, has_tc = cache
    grads = {}
    dcorr = 0
    dtc = 0
    for name, branch, bc, g in (("cls", p.cls_modules, caches[0], dcls), ("reg", p.reg_modules, caches[1], dltrb * ltrb)):
        for i in range(len(branch) - 1, -1, -1):
            g, mg, dt = _module_backward(g, branch[i], bc[i])
            grads.update({f"{name}.{i}.{k}": v for k, v in mg.items() if v is not None})
            if dt is not None:
                dtc = dtc + dt
        dcorr = dcorr + g
    return dcorr, grads, (dtc if has_tc else None)


# --------------------------------------------------------------------------
# construction


def _init_conv_module(D, Z, residual, rng, dtype):
    if residual:
        bound = math.sqrt(6.0 / (D * Z * Z))
        return ResidualConvParams(rng.uniform(-bound, bound, (D, D, Z, Z)).astype(dtype), np.zeros(D, dtype),
                                  np.ones(D, dtype), np.zeros(D, dtype))
    # unit gain on the depthwise kernel (no ReLU follows it), ReLU gain on the pointwise one
    bdw = math.sqrt(3.0 / (Z * Z))
    bpw = math.sqrt(6.0 / D)
    return ConvModuleParams(
        dw=rng.uniform(-bdw, bdw, (D, 1, Z, Z)).astype(dtype),
        pw=rng.uniform(-bpw, bpw, (D, D, 1, 1)).astype(dtype),
        pw_b=np.zeros(D, dtype),
        bn_mean=np.zeros(D, dtype), bn_var=np.ones(D, dtype),
        bn_gamma=np.ones(D, dtype), bn_beta=np.zeros(D, dtype),
    )


def _init_projection(D, O, bias, rng, dtype, std=0.01):
    # small weights: every cell starts near the bias output
    return ProjectionParams(rng.normal(0.0, std, (O, D, 3, 3)).astype(dtype), np.full(O, bias, dtype))


def init_head(kind=HeadKind.EXEMPLAR, D=128, E=4, S=1, Z=3, D_QK=64, variant=att.Variant.ATT_FFN,
              value_groups=1, use_tcond=False, ffn_residual=False, scale_after_softmax=False,
              conv_residual=False, ltrb_init=16.0, rng=0, dtype=np.float32) -> HeadParams:
    """Randomly initialised head.

    ``value_groups`` sets the grouping of the exemplar value kernels
    (1 = dense D x D x Z x Z kernels, D = depthwise). ``ltrb_init`` is the
    initial regression output in pixels (sets the regression bias).
    """
    rng = att._rng(rng)
    kind = HeadKind(kind)

    def body():
        if kind is HeadKind.CONV:
            return _init_conv_module(D, Z, conv_residual, rng, dtype)
        return att.init_transformer_layer(
            D, variant, "exemplar" if kind is HeadKind.EXEMPLAR else "standard", D_QK=D_QK, E=E, Z=Z, S=S,
            groups=value_groups, ffn_residual=ffn_residual, scale_after_softmax=scale_after_softmax,
            rng=rng, dtype=dtype)

    cls = [body() for _ in range(CLS_MODULES - 1)] + [_init_projection(D, 1, 0.0, rng, dtype)]
    reg = [body() for _ in range(REG_MODULES - 1)] + [_init_projection(D, 4, math.log(ltrb_init), rng, dtype)]
    return HeadParams(cls, reg, kind, use_tcond)


def conv_head_to_exemplar(conv: HeadParams, D_QK=8, rng=0) -> HeadParams:
    """Single-exemplar ATT_ONLY head computing exactly what a residual conv head computes.

    Each ``LN(conv(x) + x)`` module becomes ``LN(A(x) + x)`` whose only
    exemplar kernel is the conv kernel. Query and key weights are random:
    with one exemplar they cannot affect the output.
    """
    rng = att._rng(rng)

    def convert(m):
        if isinstance(m, ProjectionParams):
            return ProjectionParams(m.w.copy(), m.b.copy())
        if not isinstance(m, ResidualConvParams):
            raise ValueError("only residual conv modules have an exact exemplar counterpart")
        D = m.D
        dtype = m.w.dtype
        a = att.ExemplarAttentionParams(
            W_Q=rng.normal(0, 1, (D, D_QK)).astype(dtype),
            K_hat=rng.normal(0, 1, (1, D_QK)).astype(dtype),
            W_V=m.w[None].copy(),
            bias_V=m.b.copy(),
        )
        return att.TransformerLayerParams(a, m.ln_gamma.copy(), m.ln_beta.copy(), att.Variant.ATT_ONLY, eps=m.eps)

    return HeadParams([convert(m) for m in conv.cls_modules], [convert(m) for m in conv.reg_modules],
                      HeadKind.EXEMPLAR, conv.use_tcond)


# --------------------------------------------------------------------------
# correlation


def _same_pads(kh, kw):
    return ((kh - 1) // 2, kh // 2, (kw - 1) // 2, kw // 2)


def pointwise_xcorr(template_f, search_f):
    """Per-channel correlation of the search map with the template map, 'same' size output."""
    return pointwise_xcorr_forward(template_f, search_f)[0]


def pointwise_xcorr_forward(template_f, search_f):
    if template_f.ndim != 3 or search_f.ndim != 3:
        raise ShapeError("xcorr inputs must be D x H x W")
    if template_f.shape[0] != search_f.shape[0]:
        raise ShapeError(f"template channels {template_f.shape[0]} != search channels {search_f.shape[0]}")
    Dt, Ht, Wt = template_f.shape
    if Ht > search_f.shape[1] or Wt > search_f.shape[2]:
        raise ShapeError(f"template {Ht}x{Wt} larger than search {search_f.shape[1]}x{search_f.shape[2]}")
    pads = _same_pads(Ht, Wt)
    t = np.ascontiguousarray(template_f)
    s = np.ascontiguousarray(search_f)
    return kernels.depthwise_conv2d(s, t, 1, pads), (t, s, pads)


def pointwise_xcorr_backward(dout, cache):
    """Returns (dtemplate, dsearch)."""
    if cache is None:
        raise ValueError("pointwise_xcorr_backward: missing forward cache")
    t, s, pads = cache
    ds, dt = kernels.depthwise_conv2d_backward(np.ascontiguousarray(dout), s, t, 1, pads)
    return dt, ds


def xcorr_offset(template_hw):
    """Output position at which a template copy whose top-left corner sits at
    (0, 0) of the search map produces its response."""
    pt, _, pl, _ = _same_pads(*template_hw)
    return pt, pl


# --------------------------------------------------------------------------
# boxes


def cell_centers(H, W, stride, origin=(0.0, 0.0)):
    """(cx, cy) grids of cell centres in image coordinates."""
    cx = origin[0] + stride * (np.arange(W) + 0.5)
    cy = origin[1] + stride * (np.arange(H) + 0.5)
    return np.meshgrid(cx, cy)


def decode_boxes(ltrb, stride, origin=(0.0, 0.0)):
    """H*W x 4 array of (x1, y1, x2, y2), cells in row-major order."""
    _, H, W = ltrb.shape
    cx, cy = cell_centers(H, W, stride, origin)
    l, t, r, b = (np.asarray(c, dtype=np.float64) for c in ltrb)
    return np.stack([cx - l, cy - t, cx + r, cy + b], axis=-1).reshape(H * W, 4)


def encode_box(box, H, W, stride, origin=(0.0, 0.0)):
    """Regression targets and foreground mask for a ground-truth box.

    Foreground cells are those whose centre lies strictly inside the box.
    Returns (ltrb 4 x H x W, mask H x W bool).
    """
    x1, y1, x2, y2 = box
    cx, cy = cell_centers(H, W, stride, origin)
    ltrb = np.stack([cx - x1, cy - y1, x2 - cx, y2 - cy])
    mask = np.all(ltrb > 0, axis=0)
    return ltrb, mask


def hann_window(H, W):
    """Cosine window peaking at the map centre."""
    wy = 0.5 - 0.5 * np.cos(2 * np.pi * (np.arange(H) + 0.5) / H)
    wx = 0.5 - 0.5 * np.cos(2 * np.pi * (np.arange(W) + 0.5) / W)
    return np.outer(wy, wx)


@dataclass(frozen=True)
class PenaltyConfig:
    k: float = 0.04  # scale/aspect change penalty strength
    window_influence: float = 0.42
    lr: float = 0.7  # box smoothing towards the new estimate


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _change(r):
    return np.maximum(r, 1.0 / r)


def select_box(cls_logits, boxes, prev_box, cfg: PenaltyConfig = PenaltyConfig()):
    """Pick the best candidate and smooth it against the previous box.

    Returns (box, score, index) where ``score`` is the penalised,
    window-blended score of the chosen cell.
    """
    _, H, W = cls_logits.shape
    w = boxes[:, 2] - boxes[:, 0]
    h = boxes[:, 3] - boxes[:, 1]
    pw = prev_box[2] - prev_box[0]
    ph = prev_box[3] - prev_box[1]
    rc = (w / h) / (pw / ph)
    sc = np.sqrt(w * h) / math.sqrt(pw * ph)
    penalty = np.exp(-cfg.k * (_change(rc) * _change(sc) - 1.0))
    score = _sigmoid(cls_logits.reshape(-1).astype(np.float64)) * penalty
    score = score * (1 - cfg.window_influence) + cfg.window_influence * hann_window(H, W).reshape(-1)
    i = int(np.argmax(score))
    box = (1 - cfg.lr) * np.asarray(prev_box, dtype=np.float64) + cfg.lr * boxes[i]
    return box, float(score[i]), i
