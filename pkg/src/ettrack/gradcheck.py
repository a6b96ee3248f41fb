"""Finite-difference gradient checks for every differentiable op (float64 only).

Each case builds random inputs and a closure ``fn(inputs) -> (out, backward)``
where ``backward(dout)`` returns gradients keyed like ``inputs``. The engine
compares them with central differences of ``sum(out * R)`` for a random R.
The error reported per tensor is ``|a - n| / max(|a|, |n|)`` over the checked
entries (vector 2-norms), which stays meaningful when single entries are ~0.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Dict, List, Optional

import numpy as np

from . import attention as att
from . import head as hd
from . import tensor as T
from .eval import losses

TOLERANCE = 1e-6
STEP = 1e-5


def rel_error(a, b):
    a = np.ravel(a)
    b = np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-8))


@contextlib.contextmanager
def _branch_masks():
    """Record every ReLU mask and IoU-loss min() selection computed inside the block."""
    log = []
    relu, bias_relu, iou = T.relu_forward, T.bias_relu_forward, losses.iou_loss

    def recording_relu(x):
        out = relu(x)
        log.append(out[1])
        return out

    def recording_bias_relu(x, b):
        out = bias_relu(x, b)
        log.append(out[0] > 0)
        return out

    def recording_iou(pred, target, mask):
        m = np.asarray(mask, dtype=bool)
        log.append(np.asarray(pred)[:, m] < np.asarray(target)[:, m])
        return iou(pred, target, mask)

    T.relu_forward, T.bias_relu_forward, losses.iou_loss = recording_relu, recording_bias_relu, recording_iou
    try:
        yield log
    finally:
        T.relu_forward, T.bias_relu_forward, losses.iou_loss = relu, bias_relu, iou


def _same_masks(a, b):
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


_STENCILS = {2: ((1, 0.5), (-1, -0.5)), 4: ((2, -1 / 12), (1, 8 / 12), (-1, -8 / 12), (-2, 1 / 12))}


def check_case(fn, inputs, rng, max_coords=None, step=STEP, skipped=None, order=2):
    """Return {input name: relative error} for every input that gets a gradient.

    ``order`` selects the central-difference stencil (2 or 4 points).
    Coordinates whose probes land on different sides of a kink (a ReLU or a
    min() in the IoU loss) are not differentiable in the finite-difference
    sense and are skipped; their count per input is added to ``skipped``.
    """
    stencil = _STENCILS[order]
    out, backward = fn(inputs)
    R = rng.standard_normal(np.shape(out))
    grads = backward(R)
    errors = {}
    for name, x in inputs.items():
        g = grads.get(name)
        if g is None:
            continue
        n = x.size
        idx = np.arange(n) if max_coords is None or n <= max_coords else rng.choice(n, max_coords, replace=False)
        keep, num = [], []
        flat = x.reshape(-1)
        for i in idx:
            old = flat[i]
            total, masks = 0.0, []
            for k, c in stencil:
                flat[i] = old + k * step
                with _branch_masks() as m:
                    total += c * np.sum(fn(inputs)[0] * R)
                masks.append(m)
            flat[i] = old
            if all(_same_masks(masks[0], m) for m in masks[1:]):
                keep.append(i)
                num.append(total / step)
        if skipped is not None and len(keep) < len(idx):
            skipped[name] = len(idx) - len(keep)
        if keep:
            errors[name] = rel_error(np.asarray(g).reshape(-1)[keep], np.array(num))
    return errors


# --------------------------------------------------------------------------
# cases


def _conv_case(C, O, k, stride, pads, groups, H=6, W=6, bias=True):
    def build(rng):
        spec = T.ConvSpec(O, C, k, stride, pads, groups)
        inputs = {"x": rng.standard_normal((C, H, W)), "w": rng.standard_normal((O, C // groups, k, k))}
        if bias:
            inputs["b"] = rng.standard_normal(O)

        def fn(p):
            out, cache = T.conv2d_forward(p["x"], p["w"], p.get("b"), spec)

            def back(d):
                dx, dw, db = T.conv2d_backward(d, cache)
                return {"x": dx, "w": dw, "b": db}

            return out, back

        return inputs, fn

    return build


def _linear(rng):
    inputs = {"x": rng.standard_normal((5, 4)), "W": rng.standard_normal((4, 3)), "b": rng.standard_normal(3)}

    def fn(p):
        out, cache = T.linear_forward(p["x"], p["W"], p["b"])
        return out, lambda d: dict(zip(("x", "W", "b"), T.linear_backward(d, cache)))

    return inputs, fn


def _softmax(rng):
    inputs = {"x": rng.standard_normal((4, 6))}

    def fn(p):
        out, cache = T.softmax_forward(p["x"])
        return out, lambda d: {"x": T.softmax_backward(d, cache)}

    return inputs, fn


def _pool(S, H, W):
    def build(rng):
        inputs = {"x": rng.standard_normal((3, H, W))}

        def fn(p):
            out, cache = T.adaptive_avg_pool_forward(p["x"], S)
            return out, lambda d: {"x": T.adaptive_avg_pool_backward(d, cache)}

        return inputs, fn

    return build


def _layernorm(axis):
    def build(rng):
        D = 6
        shape = (5, D) if axis == -1 else (D, 5)
        inputs = {"x": rng.standard_normal(shape), "gamma": rng.standard_normal(D), "beta": rng.standard_normal(D)}

        def fn(p):
            out, cache = T.layernorm_forward(p["x"], p["gamma"], p["beta"], axis=axis)
            return out, lambda d: dict(zip(("x", "gamma", "beta"), T.layernorm_backward(d, cache)))

        return inputs, fn

    return build


def _relu(rng):
    x = rng.standard_normal((3, 4, 4))
    x[np.abs(x) < 0.05] = 0.5  # stay clear of the kink
    inputs = {"x": x}

    def fn(p):
        out, cache = T.relu_forward(p["x"])
        return out, lambda d: {"x": T.relu_backward(d, cache)}

    return inputs, fn


def _batchnorm(rng):
    C = 4
    mean, var = rng.standard_normal(C), rng.uniform(0.5, 2.0, C)
    inputs = {"x": rng.standard_normal((C, 3, 3)), "gamma": rng.standard_normal(C), "beta": rng.standard_normal(C)}

    def fn(p):
        out, cache = T.batchnorm_inference_forward(p["x"], mean, var, p["gamma"], p["beta"])
        return out, lambda d: dict(zip(("x", "gamma", "beta"), T.batchnorm_inference_backward(d, cache)))

    return inputs, fn


def _dropout(rng):
    inputs = {"x": rng.standard_normal((4, 5))}

    def fn(p):
        out, mask = T.dropout_forward(p["x"], 0.3, np.random.default_rng(7))
        return out, lambda d: {"x": T.dropout_backward(d, mask)}

    return inputs, fn


def _with_layer_grads(prefix, dX, grads, dtcond):
    out = {f"{prefix}{k}": v for k, v in grads.items()}
    out["X"] = dX
    if dtcond is not None:
        out["tcond"] = dtcond
    return out


def _exemplar(S=1, route="efficient", tcond=False, groups=1, scale_after=False, D=8, H=6, E=4, Z=3):
    def build(rng):
        p0 = att.init_exemplar_attention(D, D_QK=6, E=E, Z=Z, S=S, groups=groups, scale_after_softmax=scale_after,
                                         rng=rng, dtype=np.float64)
        inputs = {f"attn.{k}": v.copy() for k, v in p0.arrays().items()}
        inputs["X"] = rng.standard_normal((D, H, H))
        if tcond:
            inputs["tcond"] = rng.standard_normal(D)
        forward = att.exemplar_attention_forward if route == "efficient" else att.exemplar_attention_reference_forward

        def fn(p):
            ap = att.ExemplarAttentionParams(p["attn.W_Q"], p["attn.K_hat"], p["attn.W_V"], p["attn.bias_V"], S=S,
                                             groups=groups, scale_after_softmax=scale_after)
            out, cache = forward(p["X"], ap, p.get("tcond"))
            return out, lambda d: _with_layer_grads("attn.", *att.exemplar_attention_backward(d, cache))

        return inputs, fn

    return build


def _standard(rng, D=8, H=6):
    p0 = att.init_standard_attention(D, D_QK=6, rng=rng, dtype=np.float64)
    inputs = {f"attn.{k}": v.copy() for k, v in p0.arrays().items()}
    inputs["X"] = rng.standard_normal((D, H, H))

    def fn(p):
        ap = att.StandardAttentionParams(p["attn.Wq"], p["attn.Wk"], p["attn.Wv"])
        out, cache = att.standard_attention_forward(p["X"], ap)
        return out, lambda d: _with_layer_grads("attn.", *att.standard_attention_backward(d, cache))

    return inputs, fn


def _randomise_norms(inputs, rng):
    # Unit-gamma LayerNorm is nearly flat under a squared loss, and a position whose FFN units
    # are all dead feeds LayerNorm a zero-variance input (rstd ~ 1/sqrt(eps)). Random affine
    # terms, positive FFN input biases and nonzero output biases keep the checks well conditioned.
    for k in inputs:
        if k.endswith("gamma"):
            inputs[k] = rng.uniform(0.5, 1.5, inputs[k].shape)
        elif k.endswith("beta") or k.endswith("ffn.b2"):
            inputs[k] = rng.standard_normal(inputs[k].shape)
        elif k.endswith("ffn.b1"):
            inputs[k] = rng.uniform(0.0, 1.0, inputs[k].shape)


def _layer(variant, attention="exemplar", tcond=False, ffn_residual=False, dropout=False, D=8, H=6, E=4, Z=3, S=1):
    def build(rng):
        lp = att.init_transformer_layer(D, variant, attention, D_QK=6, E=E, Z=Z, S=S, D_hid=2 * D,
                                        ffn_residual=ffn_residual, rng=rng, dtype=np.float64)
        inputs = {k: v.copy() for k, v in lp.arrays().items()}
        _randomise_norms(inputs, rng)
        inputs["X"] = rng.standard_normal((D, H, H))
        if tcond:
            inputs["tcond"] = rng.standard_normal(D)

        def fn(p):
            for k, v in lp.arrays().items():
                v[...] = p[k]
            drng = np.random.default_rng(11) if dropout else None
            out, cache = att.transformer_layer_forward(p["X"], lp, p.get("tcond"), rng=drng)
            return out, lambda d: _with_layer_grads("", *att.transformer_layer_backward(d, cache))

        return inputs, fn

    return build


def _xcorr(rng):
    inputs = {"template": rng.standard_normal((3, 4, 4)), "search": rng.standard_normal((3, 7, 7))}

    def fn(p):
        out, cache = hd.pointwise_xcorr_forward(p["template"], p["search"])
        return out, lambda d: dict(zip(("template", "search"), hd.pointwise_xcorr_backward(d, cache)))

    return inputs, fn


def _module(kind):
    def build(rng):
        D = 6
        m = hd._init_conv_module(D, 3, kind == "residual", rng, np.float64)
        inputs = {k: v.copy() for k, v in m.arrays().items()}
        _randomise_norms(inputs, rng)
        if kind != "residual":
            inputs["pw_b"] = rng.standard_normal(D)  # keep ReLU inputs away from zero on average
        inputs["x"] = rng.standard_normal((D, 6, 6))

        def fn(p):
            for k, v in m.arrays().items():
                v[...] = p[k]
            out, cache = hd._module_forward(p["x"], m, None)

            def back(d):
                dx, grads, _ = hd._module_backward(d, m, cache)
                grads = dict(grads)
                grads["x"] = dx
                return grads

            return out, back

        return inputs, fn

    return build


def _bce(rng):
    labels = (rng.random((1, 5, 5)) > 0.7).astype(np.float64)
    inputs = {"logits": rng.standard_normal((1, 5, 5)) * 2}

    def fn(p):
        loss, d = losses.bce_loss(p["logits"], labels)
        return np.array(loss), lambda g: {"logits": d * g}

    return inputs, fn


def _iou(rng):
    target = rng.uniform(2, 10, (4, 5, 5))
    mask = rng.random((5, 5)) > 0.4
    inputs = {"pred": rng.uniform(2, 10, (4, 5, 5))}

    def fn(p):
        loss, d = losses.iou_loss(p["pred"], target, mask)
        return np.array(loss), lambda g: {"pred": d * g}

    return inputs, fn


def head_loss_case(kind="exemplar", D=4, H=8, use_tcond=True, variant=att.Variant.ATT_ONLY, conv_residual=False):
    """total_loss through a miniature head, from the correlation map to every parameter.

    The exemplar head uses ATT_ONLY layers: in a 7-deep ATT_FFN stack at
    D=4 the first layers' gradients fall to ~1e-7 of the loss and central
    differences cannot resolve them to 1e-6 (ATT_FFN is checked per layer).
    """

    def build(rng):
        hp = hd.init_head(kind, D=D, E=4, D_QK=4, variant=variant, use_tcond=use_tcond, conv_residual=conv_residual,
                          rng=rng, dtype=np.float64)
        inputs = {k: v.copy() for k, v in hp.trainable().items()}
        _randomise_norms(inputs, rng)
        for k in inputs:
            if k.endswith(".w") and (k.startswith("cls.5") or k.startswith("reg.7")):
                inputs[k] = rng.normal(0, 0.1, inputs[k].shape)
        inputs["corr"] = rng.standard_normal((D, H, H))
        if use_tcond:
            inputs["tcond"] = rng.standard_normal(D)
        box = (8.0 * 2.5, 8.0 * 2.5, 8.0 * 6.5, 8.0 * 5.5)
        target, mask = hd.encode_box(box, H, H, 8)
        labels = mask[None].astype(np.float64)

        def fn(p):
            params = hp.trainable()
            for k, v in params.items():
                v[...] = p[k]
            (cls, ltrb), cache = hd.head_forward(p["corr"], hp, p.get("tcond"))
            loss, dcls, dltrb, _ = losses.total_loss(cls, ltrb, labels, target, mask)

            def back(g):
                dcorr, grads, dtcond = hd.head_backward(dcls * g, dltrb * g, cache)
                grads = dict(grads)
                grads["corr"] = dcorr
                if dtcond is not None:
                    grads["tcond"] = dtcond
                return grads

            return np.array(loss), back

        return inputs, fn

    return build


D8 = dict(D=8, H=6, E=4, Z=3)

CASES: Dict[str, Callable] = {
    "conv2d.dense": _conv_case(3, 4, 3, 1, 1, 1),
    "conv2d.narrow_output": _conv_case(8, 2, 3, 1, 1, 1),
    "conv2d.strided": _conv_case(3, 4, 3, 2, (1, 0, 1, 0), 1),
    "conv2d.grouped": _conv_case(4, 6, 3, 1, 1, 2),
    "conv2d.depthwise": _conv_case(5, 5, 3, 1, 1, 5, bias=False),
    "conv2d.depthwise_strided": _conv_case(5, 5, 3, 2, (1, 0, 1, 0), 5),
    "conv2d.pointwise": _conv_case(4, 3, 1, 1, 0, 1),
    "linear": _linear,
    "softmax": _softmax,
    "adaptive_avg_pool.S2": _pool(2, 5, 5),
    "adaptive_avg_pool.S3": _pool(3, 7, 8),
    "layernorm.rows": _layernorm(-1),
    "layernorm.columns": _layernorm(0),
    "relu": _relu,
    "batchnorm": _batchnorm,
    "dropout": _dropout,
    "pointwise_xcorr": _xcorr,
    "exemplar_attention.S1": _exemplar(1, **D8),
    "exemplar_attention.S2_tcond": _exemplar(2, tcond=True, **D8),
    "exemplar_attention.S4": _exemplar(4, **D8),
    "exemplar_attention.reference_S2": _exemplar(2, route="reference", **D8),
    "exemplar_attention.depthwise": _exemplar(1, groups=8, **D8),
    "exemplar_attention.scale_after_softmax": _exemplar(1, scale_after=True, **D8),
    "exemplar_attention.Z1": _exemplar(2, D=8, H=6, E=4, Z=1),
    "standard_attention": _standard,
    "layer.att_only": _layer(att.Variant.ATT_ONLY, **D8),
    "layer.att_ffn": _layer(att.Variant.ATT_FFN, **D8),
    "layer.att_ffn_tcond_dropout": _layer(att.Variant.ATT_FFN, tcond=True, dropout=True, **D8),
    "layer.att_ffn_residual_S2": _layer(att.Variant.ATT_FFN, ffn_residual=True, S=2, **D8),
    "layer.standard_att_ffn": _layer(att.Variant.ATT_FFN, attention="standard", D=8, H=6),
    "head.conv_module": _module("plain"),
    "head.residual_conv_module": _module("residual"),
    "loss.bce": _bce,
    "loss.iou": _iou,
    "head.total_loss.exemplar": head_loss_case("exemplar"),
    "head.total_loss.conv": head_loss_case("conv", use_tcond=False),
    "head.total_loss.residual_conv": head_loss_case("conv", use_tcond=False, conv_residual=True),
}

# Whole-head cases: a random subset of entries per tensor, and a 4-point stencil
# with a larger step because deep-layer gradients are small next to the loss.
_HEAD = dict(max_coords=12, step=1e-4, order=4)
OPTIONS = {"head.total_loss.exemplar": _HEAD, "head.total_loss.conv": _HEAD, "head.total_loss.residual_conv": _HEAD}


def run_gradcheck(cases: Optional[List[str]] = None, seed=0, dtype=np.float64, tolerance=TOLERANCE):
    """Run the suite and return a JSON-ready report.

    report["passed"] is True iff every tensor's error is below ``tolerance``;
    report["failures"] lists "case:tensor" names that are not.
    """
    if np.dtype(dtype) != np.float64:
        raise ValueError(f"gradient checks run in float64 only, got {np.dtype(dtype).name}")
    names = list(CASES) if cases is None else cases
    unknown = [n for n in names if n not in CASES]
    if unknown:
        raise KeyError(f"unknown gradcheck cases {unknown}")
    results, failures, kinks = {}, [], {}
    for i, name in enumerate(names):
        rng = np.random.default_rng([seed, i])
        inputs, fn = CASES[name](rng)
        skipped = {}
        with np.errstate(over="raise", invalid="raise"):
            errs = check_case(fn, inputs, rng, skipped=skipped, **OPTIONS.get(name, {}))
        results[name] = errs
        if skipped:
            kinks[name] = skipped
        failures += [f"{name}:{k}" for k, e in errs.items() if not e < tolerance]
    worst = max((e for errs in results.values() for e in errs.values()), default=0.0)
    return {"tolerance": tolerance, "step": STEP, "passed": not failures, "failures": failures,
            "max_rel_error": worst, "cases": results, "skipped_at_kinks": kinks}
