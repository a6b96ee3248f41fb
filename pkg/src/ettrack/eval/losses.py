"""Training losses with hand-written gradients.

Classification uses mean binary cross-entropy over all score-map cells.
Regression uses -ln(IoU) between predicted and target ltrb distances,
averaged over the positive cells only.
"""
from __future__ import annotations

import warnings

import numpy as np


class EmptyMaskWarning(UserWarning):
    pass


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def bce_loss(logits, labels):
    """Mean BCE with logits. Returns (loss, dlogits)."""
    z = np.asarray(logits)
    y = np.asarray(labels, dtype=z.dtype)
    if z.shape != y.shape:
        raise ValueError(f"logits {z.shape} and labels {y.shape} differ")
    n = z.size
    loss = float(np.mean(np.logaddexp(0, z) - y * z))
    return loss, ((_sigmoid(z) - y) / n).astype(z.dtype)


def iou_loss(pred, target, mask):
    """Mean -ln IoU over masked cells of 4 x H x W ltrb maps.

    Returns (loss, dpred). An empty mask gives zero loss and gradient and
    emits an EmptyMaskWarning.
    """
    pred = np.asarray(pred)
    target = np.asarray(target, dtype=pred.dtype)
    mask = np.asarray(mask, dtype=bool)
    if pred.shape != target.shape or pred.shape[0] != 4 or mask.shape != pred.shape[1:]:
        raise ValueError(f"need 4 x H x W pred/target and H x W mask, got {pred.shape}, {target.shape}, {mask.shape}")
    n = int(mask.sum())
    if n == 0:
        warnings.warn("regression mask is empty; IoU loss set to 0", EmptyMaskWarning, stacklevel=2)
        return 0.0, np.zeros_like(pred)
    p = pred[:, mask]
    g = target[:, mask]
    if np.any(p <= 0) or np.any(g <= 0):
        raise ValueError("ltrb distances must be positive on masked cells")
    l, t, r, b = p
    lg, tg, rg, bg = g
    area_p = (l + r) * (t + b)
    area_g = (lg + rg) * (tg + bg)
    wi = np.minimum(l, lg) + np.minimum(r, rg)
    hi = np.minimum(t, tg) + np.minimum(b, bg)
    inter = wi * hi
    union = area_p + area_g - inter
    loss = float(np.mean(np.log(union) - np.log(inter)))

    d_inter = (-1.0 / union - 1.0 / inter) / n
    d_area = (1.0 / union) / n
    dl = d_area * (t + b) + d_inter * hi * (l < lg)
    dr = d_area * (t + b) + d_inter * hi * (r < rg)
    dt = d_area * (l + r) + d_inter * wi * (t < tg)
    db = d_area * (l + r) + d_inter * wi * (b < bg)
    dpred = np.zeros_like(pred)
    dpred[:, mask] = np.stack([dl, dt, dr, db])
    return loss, dpred


def total_loss(cls_logits, ltrb, labels, target_ltrb, mask, lam=1.0):
    """BCE + lam * IoU loss. Returns (loss, dcls, dltrb, parts)."""
    lc, dcls = bce_loss(cls_logits, labels)
    lr, dltrb = iou_loss(ltrb, target_ltrb, mask)
    return lc + lam * lr, dcls, lam * dltrb, {"cls": lc, "reg": lr}
