"""Exemplar attention, the standard attention baseline and the transformer layer.

Feature maps are D x H x W. Exemplar attention pools the map to S x S query
tokens, scores them against a small learned key bank, and uses the softmax
weights to blend a bank of E convolution kernels; the blended kernel is then
applied to the map. Two routes compute the same thing:

* ``exemplar_attention_reference`` convolves with every exemplar kernel and
  blends the E value maps;
* ``exemplar_attention_efficient`` blends the kernels first and convolves
  once, so the cost is one convolution regardless of E.

Gradients for parameters are returned as dicts keyed like ``params.arrays()``.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Dict, Optional, Union

import numpy as np

from . import tensor as T
from .tensor import ShapeError


class Variant(str, enum.Enum):
    ATT_ONLY = "att_only"
    ATT_FFN = "att_ffn"


def _rng(seed_or_rng):
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.default_rng(seed_or_rng)


def _prefixed(prefix, d):
    return {f"{prefix}{k}": v for k, v in d.items() if v is not None}


# --------------------------------------------------------------------------
# parameters


@dataclass
class ExemplarAttentionParams:
    W_Q: np.ndarray  # D x D_QK
    K_hat: np.ndarray  # E x D_QK, input independent keys
    W_V: np.ndarray  # E x D_V x D/groups x Z x Z
    bias_V: Optional[np.ndarray] = None  # D_V
    S: int = 1
    d_k: Optional[float] = None
    groups: int = 1
    scale_after_softmax: bool = False

    def __post_init__(self):
        if self.d_k is None:
            self.d_k = float(self.K_hat.shape[1])
        self.validate()

    @property
    def E(self):
        return self.K_hat.shape[0]

    @property
    def D(self):
        return self.W_Q.shape[0]

    @property
    def D_V(self):
        return self.W_V.shape[1]

    @property
    def Z(self):
        return self.W_V.shape[-1]

    def validate(self):
        E, dqk = self.K_hat.shape
        if E < 1:
            raise ShapeError("need at least one exemplar")
        if self.S < 1:
            raise ShapeError(f"S must be >= 1, got {self.S}")
        if not self.d_k > 0:
            raise ShapeError(f"d_k must be positive, got {self.d_k}")
        if self.W_Q.ndim != 2 or self.W_Q.shape[1] != dqk:
            raise ShapeError(f"W_Q shape {self.W_Q.shape} does not match key width {dqk}")
        if self.W_V.ndim != 5 or self.W_V.shape[0] != E:
            raise ShapeError(f"W_V shape {self.W_V.shape} must be E={E} x D_V x D/groups x Z x Z")
        if self.W_V.shape[2] * self.groups != self.D:
            raise ShapeError(f"W_V input channels {self.W_V.shape[2]} x groups {self.groups} != D={self.D}")
        if self.W_V.shape[3] != self.W_V.shape[4] or self.Z % 2 == 0:
            raise ShapeError(f"value kernels must be square with odd size, got {self.W_V.shape[3:]}")
        if self.bias_V is not None and self.bias_V.shape != (self.D_V,):
            raise ShapeError(f"bias_V length {self.bias_V.shape} != D_V={self.D_V}")

    def arrays(self, prefix="") -> Dict[str, np.ndarray]:
        return _prefixed(prefix, {"W_Q": self.W_Q, "K_hat": self.K_hat, "W_V": self.W_V, "bias_V": self.bias_V})

    def conv_spec(self):
        return T.ConvSpec.same(self.D_V, self.D, self.Z, self.groups)


@dataclass
class StandardAttentionParams:
    Wq: np.ndarray  # D x D_QK
    Wk: np.ndarray  # D x D_QK
    Wv: np.ndarray  # D x D_V
    d_k: Optional[float] = None

    def __post_init__(self):
        if self.d_k is None:
            self.d_k = float(self.Wq.shape[1])
        if self.Wq.shape != self.Wk.shape:
            raise ShapeError(f"Wq {self.Wq.shape} and Wk {self.Wk.shape} differ")
        if self.Wv.shape[0] != self.Wq.shape[0]:
            raise ShapeError(f"Wv rows {self.Wv.shape[0]} != D={self.Wq.shape[0]}")

    @property
    def D(self):
        return self.Wq.shape[0]

    @property
    def D_V(self):
        return self.Wv.shape[1]

    def arrays(self, prefix=""):
        return _prefixed(prefix, {"Wq": self.Wq, "Wk": self.Wk, "Wv": self.Wv})


AttentionParams = Union[ExemplarAttentionParams, StandardAttentionParams]


@dataclass
class TransformerLayerParams:
    attn: AttentionParams
    ln1_gamma: np.ndarray
    ln1_beta: np.ndarray
    variant: Variant = Variant.ATT_FFN
    ffn_W1: Optional[np.ndarray] = None  # D x D_hid
    ffn_b1: Optional[np.ndarray] = None
    ffn_W2: Optional[np.ndarray] = None  # D_hid x D
    ffn_b2: Optional[np.ndarray] = None
    ln2_gamma: Optional[np.ndarray] = None
    ln2_beta: Optional[np.ndarray] = None
    dropout_rate: float = 0.1
    ffn_residual: bool = False
    eps: float = 1e-5

    def __post_init__(self):
        self.variant = Variant(self.variant)
        D = self.attn.D
        if self.attn.D_V != D:
            raise ShapeError(f"residual connection needs D_V == D, got D_V={self.attn.D_V}, D={D}")
        if not 0 <= self.dropout_rate < 1:
            raise ShapeError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.variant is Variant.ATT_FFN:
            if self.ffn_W1 is None or self.ffn_W2 is None or self.ln2_gamma is None:
                raise ShapeError("ATT_FFN layer needs FFN and second LayerNorm parameters")
            if self.ffn_W1.shape[0] != D or self.ffn_W2.shape != (self.ffn_W1.shape[1], D):
                raise ShapeError(f"FFN shapes {self.ffn_W1.shape}, {self.ffn_W2.shape} do not fit D={D}")

    @property
    def D(self):
        return self.attn.D

    def arrays(self, prefix=""):
        out = self.attn.arrays(prefix + "attn.")
        own = {
            "ln1.gamma": self.ln1_gamma,
            "ln1.beta": self.ln1_beta,
            "ffn.W1": self.ffn_W1,
            "ffn.b1": self.ffn_b1,
            "ffn.W2": self.ffn_W2,
            "ffn.b2": self.ffn_b2,
            "ln2.gamma": self.ln2_gamma,
            "ln2.beta": self.ln2_beta,
        }
        out.update(_prefixed(prefix, own))
        return out


# --------------------------------------------------------------------------
# initialization


def init_exemplar_attention(D, D_QK=64, E=4, Z=3, S=1, D_V=None, groups=1, bias=True,
                            scale_after_softmax=False, rng=0, dtype=np.float32):
    """Kaiming-uniform exemplar kernels; normal N(0, 1/sqrt(D_QK)) keys and query projection."""
    rng = _rng(rng)
    D_V = D if D_V is None else D_V
    fan_in = (D // groups) * Z * Z
    bound = math.sqrt(6.0 / fan_in)
    std = 1.0 / math.sqrt(D_QK)
    return ExemplarAttentionParams(
        W_Q=rng.normal(0.0, std, (D, D_QK)).astype(dtype),
        K_hat=rng.normal(0.0, std, (E, D_QK)).astype(dtype),
        W_V=rng.uniform(-bound, bound, (E, D_V, D // groups, Z, Z)).astype(dtype),
        bias_V=np.zeros(D_V, dtype) if bias else None,
        S=S,
        groups=groups,
        scale_after_softmax=scale_after_softmax,
    )


def init_standard_attention(D, D_QK=64, D_V=None, rng=0, dtype=np.float32):
    rng = _rng(rng)
    D_V = D if D_V is None else D_V
    std = 1.0 / math.sqrt(D)
    return StandardAttentionParams(
        Wq=rng.normal(0.0, std, (D, D_QK)).astype(dtype),
        Wk=rng.normal(0.0, std, (D, D_QK)).astype(dtype),
        Wv=rng.normal(0.0, std, (D, D_V)).astype(dtype),
    )


def init_transformer_layer(D, variant=Variant.ATT_FFN, attention="exemplar", D_QK=64, E=4, Z=3, S=1,
                           groups=1, D_hid=None, ffn_residual=False, scale_after_softmax=False,
                           dropout_rate=0.1, rng=0, dtype=np.float32):
    rng = _rng(rng)
    variant = Variant(variant)
    if attention == "exemplar":
        attn = init_exemplar_attention(D, D_QK, E, Z, S, groups=groups,
                                       scale_after_softmax=scale_after_softmax, rng=rng, dtype=dtype)
    elif attention == "standard":
        attn = init_standard_attention(D, D_QK, rng=rng, dtype=dtype)
    else:
        raise ValueError(f"unknown attention kind {attention!r}")
    p = dict(attn=attn, ln1_gamma=np.ones(D, dtype), ln1_beta=np.zeros(D, dtype), variant=variant,
             dropout_rate=dropout_rate, ffn_residual=ffn_residual)
    if variant is Variant.ATT_FFN:
        D_hid = D if D_hid is None else D_hid
        b1, b2 = 1.0 / math.sqrt(D), 1.0 / math.sqrt(D_hid)
        p.update(
            ffn_W1=rng.uniform(-b1, b1, (D, D_hid)).astype(dtype),
            ffn_b1=np.zeros(D_hid, dtype),
            ffn_W2=rng.uniform(-b2, b2, (D_hid, D)).astype(dtype),
            ffn_b2=np.zeros(D, dtype),
            ln2_gamma=np.ones(D, dtype),
            ln2_beta=np.zeros(D, dtype),
        )
    return TransformerLayerParams(**p)


# --------------------------------------------------------------------------
# exemplar attention


def _layer_input(X, D, tcond):
    if X.ndim != 3:
        raise ShapeError(f"attention input must be D x H x W, got ndim={X.ndim}")
    if X.shape[0] != D:
        raise ShapeError(f"input channels {X.shape[0]} != D={D}")
    if tcond is None:
        return X
    if tcond.shape != (D,):
        raise ShapeError(f"template vector length {tcond.shape} != D={D}")
    return X + tcond[:, None, None]


def patch_ranges(n, S):
    """Contiguous [start, end) ranges of the S-way spatial partition of an axis."""
    owner = T.patch_index(n, S)
    return [(int(np.searchsorted(owner, i)), int(np.searchsorted(owner, i, side="right"))) for i in range(S)]


def _similarity_forward(Xin, p: ExemplarAttentionParams):
    D, H, W = Xin.shape
    S = p.S
    if S > min(H, W):
        raise ShapeError(f"query grid S={S} exceeds min(H, W)={min(H, W)}")
    pooled, pool_cache = T.adaptive_avg_pool_forward(Xin, S)
    P = np.ascontiguousarray(pooled.reshape(D, S * S).T)
    Q, q_cache = T.linear_forward(P, p.W_Q, None)
    raw = Q @ p.K_hat.T
    r = Xin.dtype.type(math.sqrt(p.d_k))
    if p.scale_after_softmax:
        sim = T.softmax_lastdim(raw) / r
    else:
        sim = T.softmax_lastdim(raw / r)
    return sim, (pool_cache, q_cache, Q, sim, r, p.scale_after_softmax)


def _similarity_backward(dsim, cache, p):
    pool_cache, q_cache, Q, sim, r, after = cache
    if after:
        dlogits = T.softmax_backward(dsim / r, sim * r)
        draw = dlogits
    else:
        draw = T.softmax_backward(dsim, sim) / r
    dQ = draw @ p.K_hat
    dK = draw.T @ Q
    dP, dWQ, _ = T.linear_backward(dQ, q_cache)
    D = p.D
    S = p.S
    dXin = T.adaptive_avg_pool_backward(dP.T.reshape(D, S, S), pool_cache)
    return dXin, dWQ, dK


def similarity(X, p: ExemplarAttentionParams, tcond=None):
    """Softmax weights of the S*S pooled queries over the E exemplars (S^2 x E)."""
    return _similarity_forward(_layer_input(X, p.D, tcond), p)[0]


def _patches(H, W, S):
    return [(r, c) for r in patch_ranges(H, S) for c in patch_ranges(W, S)]


def exemplar_attention_forward(X, p: ExemplarAttentionParams, tcond=None):
    """Blend kernels, then convolve once per query patch."""
    Xin = _layer_input(X, p.D, tcond)
    D, H, W = Xin.shape
    sim, sim_cache = _similarity_forward(Xin, p)
    E = p.E
    W_A = (sim @ p.W_V.reshape(E, -1)).reshape((sim.shape[0],) + p.W_V.shape[1:])
    b_A = None if p.bias_V is None else sim.sum(axis=1)[:, None] * p.bias_V
    spec = p.conv_spec()
    if p.S == 1:
        out, cc = T.conv2d_forward(Xin, W_A[0], None if b_A is None else b_A[0], spec)
        conv_caches = [cc]
    else:
        pad = (p.Z - 1) // 2
        Xpad = np.pad(Xin, ((0, 0), (pad, pad), (pad, pad)))
        valid = T.ConvSpec(p.D_V, D, p.Z, 1, 0, p.groups)
        out = np.empty((p.D_V, H, W), dtype=Xin.dtype)
        conv_caches = []
        for s, ((r0, r1), (c0, c1)) in enumerate(_patches(H, W, p.S)):
            xs = np.ascontiguousarray(Xpad[:, r0 : r1 + 2 * pad, c0 : c1 + 2 * pad])
            o, cc = T.conv2d_forward(xs, W_A[s], None if b_A is None else b_A[s], valid)
            out[:, r0:r1, c0:c1] = o
            conv_caches.append(cc)
    cache = ("efficient", p, tcond is not None, Xin.shape, sim, sim_cache, W_A, conv_caches)
    return out, cache


def exemplar_attention_efficient(X, p, tcond=None):
    return exemplar_attention_forward(X, p, tcond)[0]


def exemplar_attention_reference_forward(X, p: ExemplarAttentionParams, tcond=None):
    """Convolve with every exemplar kernel, then blend the value maps per patch."""
    Xin = _layer_input(X, p.D, tcond)
    D, H, W = Xin.shape
    sim, sim_cache = _similarity_forward(Xin, p)
    spec = p.conv_spec()
    V, conv_caches = [], []
    for e in range(p.E):
        v, cc = T.conv2d_forward(Xin, p.W_V[e], p.bias_V, spec)
        V.append(v)
        conv_caches.append(cc)
    V = np.stack(V)
    out = np.empty((p.D_V, H, W), dtype=Xin.dtype)
    for s, ((r0, r1), (c0, c1)) in enumerate(_patches(H, W, p.S)):
        out[:, r0:r1, c0:c1] = np.tensordot(sim[s], V[:, :, r0:r1, c0:c1], axes=1)
    cache = ("reference", p, tcond is not None, Xin.shape, sim, sim_cache, V, conv_caches)
    return out, cache


def exemplar_attention_reference(X, p, tcond=None):
    return exemplar_attention_reference_forward(X, p, tcond)[0]


def exemplar_attention_backward(dout, cache):
    """Backward for either route. Returns (dX, grads, dtcond)."""
    if cache is None:
        raise ValueError("exemplar_attention_backward: missing forward cache")
    route, p, has_tcond, (D, H, W), sim, sim_cache, aux, conv_caches = cache
    E = p.E
    patches = _patches(H, W, p.S)
    dXin = np.zeros((D, H, W), dtype=dout.dtype)
    dsim = np.zeros_like(sim)
    dW_V = np.zeros_like(p.W_V)
    dbias = None if p.bias_V is None else np.zeros_like(p.bias_V)
    if route == "efficient":
        W_A = aux
        dW_A = np.empty_like(W_A)
        if p.S == 1:
            dx, dW_A[0], db = T.conv2d_backward(dout, conv_caches[0])
            dXin += dx
            dbs = [db]
        else:
            pad = (p.Z - 1) // 2
            dXpad = np.zeros((D, H + 2 * pad, W + 2 * pad), dtype=dout.dtype)
            dbs = []
            for s, ((r0, r1), (c0, c1)) in enumerate(patches):
                dx, dW_A[s], db = T.conv2d_backward(dout[:, r0:r1, c0:c1], conv_caches[s])
                dXpad[:, r0 : r1 + 2 * pad, c0 : c1 + 2 * pad] += dx
                dbs.append(db)
            dXin += dXpad[:, pad : pad + H, pad : pad + W]
        flatA = dW_A.reshape(len(patches), -1)
        dsim += flatA @ p.W_V.reshape(E, -1).T
        dW_V += (sim.T @ flatA).reshape(p.W_V.shape)
        if dbias is not None:
            dbs = np.stack(dbs)
            dsim += (dbs @ p.bias_V)[:, None]
            dbias += (sim.sum(axis=1)[:, None] * dbs).sum(axis=0)
    else:
        V = aux
        dV = np.zeros_like(V)
        for s, ((r0, r1), (c0, c1)) in enumerate(patches):
            g = dout[:, r0:r1, c0:c1]
            dsim[s] = np.tensordot(V[:, :, r0:r1, c0:c1], g, axes=3)
            dV[:, :, r0:r1, c0:c1] += sim[s][:, None, None, None] * g
        for e in range(E):
            dx, dW_V[e], db = T.conv2d_backward(dV[e], conv_caches[e])
            dXin += dx
            if dbias is not None:
                dbias += db
    dX_sim, dWQ, dK = _similarity_backward(dsim, sim_cache, p)
    dXin += dX_sim
    grads = {"W_Q": dWQ, "K_hat": dK, "W_V": dW_V}
    if dbias is not None:
        grads["bias_V"] = dbias
    dtcond = dXin.sum(axis=(1, 2)) if has_tcond else None
    return dXin, grads, dtcond


# --------------------------------------------------------------------------
# standard scaled dot-product attention


def standard_attention_forward(X, p: StandardAttentionParams, tcond=None):
    Xin = _layer_input(X, p.D, tcond)
    D, H, W = Xin.shape
    x = Xin.reshape(D, H * W).T
    Q, K, V = x @ p.Wq, x @ p.Wk, x @ p.Wv
    r = Xin.dtype.type(math.sqrt(p.d_k))
    A = T.softmax_lastdim((Q @ K.T) / r)
    out = A @ V
    cache = (p, tcond is not None, x, Q, K, V, A, r, (D, H, W))
    return np.ascontiguousarray(out.T).reshape(p.D_V, H, W), cache


def standard_attention_backward(dout, cache):
    if cache is None:
        raise ValueError("standard_attention_backward: missing forward cache")
    p, has_tcond, x, Q, K, V, A, r, (D, H, W) = cache
    g = dout.reshape(p.D_V, H * W).T
    dA = g @ V.T
    dV = A.T @ g
    dlog = T.softmax_backward(dA, A) / r
    dQ = dlog @ K
    dK = dlog.T @ Q
    dx = dQ @ p.Wq.T + dK @ p.Wk.T + dV @ p.Wv.T
    grads = {"Wq": x.T @ dQ, "Wk": x.T @ dK, "Wv": x.T @ dV}
    dXin = np.ascontiguousarray(dx.T).reshape(D, H, W)
    return dXin, grads, (dXin.sum(axis=(1, 2)) if has_tcond else None)


def standard_attention(X, Wq, Wk, Wv, d_k=None):
    return standard_attention_forward(X, StandardAttentionParams(Wq, Wk, Wv, d_k))[0]


def attention_forward(X, p: AttentionParams, tcond=None):
    if isinstance(p, ExemplarAttentionParams):
        return exemplar_attention_forward(X, p, tcond)
    return standard_attention_forward(X, p, tcond)


def attention_backward(dout, cache):
    if cache is not None and cache[0] in ("efficient", "reference"):
        return exemplar_attention_backward(dout, cache)
    return standard_attention_backward(dout, cache)


# --------------------------------------------------------------------------
# transformer layer


def transformer_layer_forward(X, p: TransformerLayerParams, tcond=None, rng=None):
    """LN1(A(x) + x), followed for ATT_FFN by LN2(FFN(.)).

    Normalisation and the FFN act on the feature vector at each position.
    ``rng`` enables dropout inside the FFN; without it the layer runs in
    inference mode.
    """
    Xin = _layer_input(X, p.D, tcond)
    D, H, W = Xin.shape
    A, a_cache = attention_forward(Xin, p.attn)
    y, ln1 = T.add_layernorm_forward(A.reshape(D, H * W), p.ln1_gamma, p.ln1_beta, p.eps,
                                     addend=Xin.reshape(D, H * W))
    ffn = None
    if p.variant is Variant.ATT_FFN:
        h, rc = T.bias_relu_forward(p.ffn_W1.T @ y, p.ffn_b1)
        h, dmask = T.dropout_forward(h, p.dropout_rate, rng)
        f = p.ffn_W2.T @ h
        y_in = y
        y, ln2 = T.add_layernorm_forward(f, p.ln2_gamma, p.ln2_beta, p.eps,
                                         addend=y if p.ffn_residual else None, shift=p.ffn_b2)
        ffn = (y_in, h, rc, dmask, ln2)
    return y.reshape(D, H, W), (p, tcond is not None, (D, H, W), a_cache, ln1, ffn)


def transformer_layer_backward(dout, cache):
    """Returns (dX, grads, dtcond)."""
    if cache is None:
        raise ValueError("transformer_layer_backward: missing forward cache")
    p, has_tcond, (D, H, W), a_cache, ln1, ffn = cache
    g = dout.reshape(D, H * W)
    grads = {}
    if ffn is not None:
        y_in, h, rc, dmask, ln2 = ffn
        df, grads["ln2.gamma"], grads["ln2.beta"] = T.layernorm_backward(g, ln2)
        grads["ffn.W2"] = h @ df.T
        grads["ffn.b2"] = df.sum(axis=1)
        dh, grads["ffn.b1"] = T.bias_relu_backward(T.dropout_backward(p.ffn_W2 @ df, dmask), rc)
        grads["ffn.W1"] = y_in @ dh.T
        g = p.ffn_W1 @ dh
        if p.ffn_residual:
            g = g + df
    dr, grads["ln1.gamma"], grads["ln1.beta"] = T.layernorm_backward(g, ln1)
    dr = dr.reshape(D, H, W)
    dXin, agrads, _ = attention_backward(dr, a_cache)
    dXin = dXin + dr
    grads.update({f"attn.{k}": v for k, v in agrads.items()})
    return dXin, grads, (dXin.sum(axis=(1, 2)) if has_tcond else None)


def transformer_layer(X, p, tcond=None):
    return transformer_layer_forward(X, p, tcond)[0]
