"""Per-frame box metrics and sequence summaries (AO, success AUC, precision)."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

THRESHOLDS = np.arange(21) / 20.0


class Box(NamedTuple):
    """Axis-aligned box in corner form."""

    x1: float
    y1: float
    x2: float
    y2: float

    @classmethod
    def from_xywh(cls, x, y, w, h):
        return cls(x, y, x + w, y + h)

    @property
    def width(self):
        return self.x2 - self.x1

    @property
    def height(self):
        return self.y2 - self.y1

    @property
    def area(self):
        return max(self.width, 0.0) * max(self.height, 0.0)

    @property
    def center(self):
        return 0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2)


def _as_boxes(b):
    b = np.asarray(b, dtype=np.float64)
    if b.shape[-1] != 4:
        raise ValueError(f"boxes must have 4 coordinates in the last axis, got shape {b.shape}")
    return b


def iou_many(a, b):
    """Elementwise IoU of two ... x 4 box arrays. Degenerate pairs give 0."""
    a, b = _as_boxes(a), _as_boxes(b)
    iw = np.clip(np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]), 0, None)
    ih = np.clip(np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]), 0, None)
    inter = iw * ih
    area_a = np.clip(a[..., 2] - a[..., 0], 0, None) * np.clip(a[..., 3] - a[..., 1], 0, None)
    area_b = np.clip(b[..., 2] - b[..., 0], 0, None) * np.clip(b[..., 3] - b[..., 1], 0, None)
    union = area_a + area_b - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    return out


def iou(a, b):
    return float(iou_many(a, b))


def center_error(a, b):
    """Euclidean distance between box centres (elementwise over leading axes)."""
    a, b = _as_boxes(a), _as_boxes(b)
    dx = 0.5 * (a[..., 0] + a[..., 2] - b[..., 0] - b[..., 2])
    dy = 0.5 * (a[..., 1] + a[..., 3] - b[..., 1] - b[..., 3])
    return np.hypot(dx, dy)


def success_curve(ious, thresholds=THRESHOLDS):
    """Fraction of frames whose IoU is at least each threshold."""
    ious = np.asarray(ious, dtype=np.float64)
    if ious.size == 0:
        raise ValueError("success curve needs at least one frame")
    return (ious[None, :] >= np.asarray(thresholds)[:, None]).mean(axis=1)


def success_auc(ious, thresholds=THRESHOLDS):
    """Mean of the success curve over the threshold grid."""
    return float(success_curve(ious, thresholds).mean())


def precision(center_errors, threshold=20.0):
    """Fraction of frames with centre error within ``threshold`` pixels."""
    e = np.asarray(center_errors, dtype=np.float64)
    if e.size == 0:
        raise ValueError("precision needs at least one frame")
    return float((e <= threshold).mean())


@dataclass
class SequenceResult:
    pred: np.ndarray  # N x 4
    gt: np.ndarray  # N x 4

    def __post_init__(self):
        self.pred = _as_boxes(self.pred).reshape(-1, 4)
        self.gt = _as_boxes(self.gt).reshape(-1, 4)
        if len(self.pred) != len(self.gt):
            raise ValueError(f"{len(self.pred)} predictions for {len(self.gt)} ground-truth boxes")
        self.ious = iou_many(self.pred, self.gt)
        self.center_errors = center_error(self.pred, self.gt)

    @property
    def ao(self):
        return float(np.mean(self.ious))

    @property
    def auc(self):
        return success_auc(self.ious)

    @property
    def precision(self):
        return precision(self.center_errors)

    def summary(self):
        return {"ao": self.ao, "auc": self.auc, "precision": self.precision}

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["frame", "iou", "center_err"])
            for i, (o, e) in enumerate(zip(self.ious, self.center_errors)):
                w.writerow([i, repr(float(o)), repr(float(e))])

    def to_json(self, path):
        with open(path, "w") as f:
            json.dump(self.summary(), f, indent=2)
