"""Overfit a head on a single template/search pair with SGD + momentum."""
from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from .. import head as hd
from .. import pipeline as pl
from .losses import total_loss
from .synth import synth_sequence


class DivergenceError(FloatingPointError):
    """Raised when the training loss or a gradient becomes non-finite."""


@dataclass
class TrainingPair:
    corr: np.ndarray  # D x H x W correlation map
    template_vector: np.ndarray  # D
    labels: np.ndarray  # 1 x H x W, 1 inside the target box
    target_ltrb: np.ndarray  # 4 x H x W
    mask: np.ndarray  # H x W bool


def make_training_pair(backbone=None, seed=0, offset=(24.0, -16.0), config=None, dtype=np.float32):
    """Template and search crops of one synthetic frame, correlated through ``backbone``.

    The search crop is centred ``offset`` frame pixels away from the target so
    the positive cells are off-centre. The correlation map is scaled to unit
    RMS so randomly initialised heads start in a sane range.
    """
    backbone = backbone if backbone is not None else pl.init_backbone(pl.BackboneKind.TOY, rng=seed)
    cfg = config or pl.TrackerConfig()
    seq = synth_sequence("translate", length=2, seed=seed, speed=0.0)
    frame, box = seq.frames[0], seq.boxes[0]
    cx, cy = pl.box_center(box)
    tpatch = pl.crop_resize(frame, (cx, cy), pl.box_extent(box, cfg.template_context), cfg.template_px)
    tf = pl.backbone_forward(tpatch, backbone)
    geo = pl.CropGeometry(cx + offset[0], cy + offset[1], pl.box_extent(box, cfg.search_context), cfg.search_px)
    spatch = pl.crop_resize(frame, (geo.cx, geo.cy), geo.size, cfg.search_px)
    sf = pl.backbone_forward(spatch, backbone)
    corr = hd.pointwise_xcorr(tf, sf)
    corr = corr / (np.sqrt(np.mean(corr * corr)) + 1e-12)
    stride = backbone.stride
    _, H, W = corr.shape
    ltrb, mask = hd.encode_box(geo.to_crop(box), H, W, stride, pl.xcorr_origin(tf.shape[1:], stride))
    return TrainingPair(corr.astype(dtype), tf.mean(axis=(1, 2)).astype(dtype), mask[None].astype(dtype),
                        ltrb.astype(dtype), mask)


def loss_and_grads(head, pair: TrainingPair, lam=1.0):
    tcond = pair.template_vector if head.use_tcond else None
    (cls, ltrb), cache = hd.head_forward(pair.corr, head, tcond)
    if not (np.all(np.isfinite(cls)) and np.all(np.isfinite(ltrb)) and np.all(ltrb[:, pair.mask] > 0)):
        raise DivergenceError("head outputs left the valid range (non-finite logits or ltrb <= 0)")
    loss, dcls, dltrb, parts = total_loss(cls, ltrb, pair.labels, pair.target_ltrb, pair.mask, lam)
    _, grads, _ = hd.head_backward(dcls, dltrb, cache)
    return loss, grads


def toy_train(head: hd.HeadParams, pair: TrainingPair, steps=200, lr=0.01, momentum=0.9, lam=1.0,
              inplace=False, max_loss=None):
    """Plain SGD with momentum on the trainable head arrays. Returns the per-step loss trace.

    The loss at step i is measured before the i-th update. BatchNorm
    statistics and affine terms stay frozen; dropout is off. A loss above
    ``max_loss`` (if given) raises DivergenceError.
    """
    if steps < 0 or lr < 0:
        raise ValueError("steps and lr must be non-negative")
    if not inplace:
        head = copy.deepcopy(head)
    params = head.trainable()
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    trace = []
    for step in range(steps):
        loss, grads = loss_and_grads(head, pair, lam)
        if not np.isfinite(loss):
            raise DivergenceError(f"loss became {loss} at step {step} (lr={lr})")
        if max_loss is not None and loss > max_loss:
            raise DivergenceError(f"loss {loss:.4g} exceeded {max_loss:.4g} at step {step} (lr={lr})")
        trace.append(loss)
        for k, v in params.items():
            g = grads.get(k)
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise DivergenceError(f"non-finite gradient for {k} at step {step} (lr={lr})")
            velocity[k] *= momentum
            velocity[k] -= lr * g
            v += velocity[k]
    return trace


def overfit(head, pair, steps=200, lr=0.01, min_lr=1e-5, **kw):
    """Run toy_train, halving lr until training does not diverge.

    A run diverges if the loss goes non-finite or rises above its initial
    value at any step. Returns (trace, lr_used).
    """
    while lr >= min_lr:
        initial, _ = loss_and_grads(head, pair, kw.get("lam", 1.0))
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                return toy_train(head, pair, steps, lr, max_loss=initial, **kw), lr
        except DivergenceError:
            lr /= 2
    raise DivergenceError(f"training diverged for every lr down to {min_lr}")
