"""Siamese tracking loop: crop, extract features, correlate, run the head, pick a box.

Geometry follows the usual Siamese protocol: the template crop spans twice
the square-root box area around the first box and is resized to 128 px; the
search crop spans four times that around the previous box and is resized to
256 px. Backbones have a total stride of 16, giving 8x8 template and 16x16
search feature maps.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import List, Optional, Tuple, Union

import numpy as np

from . import head as hd
from . import tensor as T
from .attention import _rng
from .tensor import ShapeError


class BackboneKind(str, enum.Enum):
    TOY = "toy"
    ORACLE = "oracle"


TOY_CHANNELS = (3, 32, 64, 96, 128)


@dataclass
class ConvBlock:
    w: np.ndarray
    b: np.ndarray
    bn_mean: np.ndarray
    bn_var: np.ndarray
    bn_gamma: np.ndarray
    bn_beta: np.ndarray

    def arrays(self, prefix=""):
        return {f"{prefix}{k}": v for k, v in self.__dict__.items()}


@dataclass
class BackboneParams:
    """Feature extractor with total stride 16.

    TOY: four 3x3 stride-2 conv+BN+ReLU blocks (3-32-64-96-128 channels),
    randomly initialised; a stand-in, not a trained backbone.
    ORACLE: 16x16 average pooling of the raw RGB patch (3 channels).
    """

    kind: BackboneKind = BackboneKind.ORACLE
    blocks: List[ConvBlock] = field(default_factory=list)
    stride: int = 16

    def __post_init__(self):
        self.kind = BackboneKind(self.kind)

    @property
    def channels(self):
        return 3 if self.kind is BackboneKind.ORACLE else self.blocks[-1].w.shape[0]

    def arrays(self, prefix=""):
        out = {}
        for i, b in enumerate(self.blocks):
            out.update(b.arrays(f"{prefix}{i}."))
        return out


def init_backbone(kind=BackboneKind.TOY, rng=0, dtype=np.float32) -> BackboneParams:
    kind = BackboneKind(kind)
    if kind is BackboneKind.ORACLE:
        return BackboneParams(kind)
    rng = _rng(rng)
    blocks = []
    for cin, cout in zip(TOY_CHANNELS[:-1], TOY_CHANNELS[1:]):
        bound = math.sqrt(6.0 / (cin * 9))
        blocks.append(ConvBlock(
            rng.uniform(-bound, bound, (cout, cin, 3, 3)).astype(dtype), np.zeros(cout, dtype),
            np.zeros(cout, dtype), np.ones(cout, dtype), np.ones(cout, dtype), np.zeros(cout, dtype)))
    return BackboneParams(kind, blocks)


def backbone_forward(img, p: BackboneParams):
    """3 x H x W image in [0, 1] -> D x H/16 x W/16 features."""
    C, H, W = img.shape
    if C != 3 or H % p.stride or W % p.stride:
        raise ShapeError(f"backbone input must be 3 x H x W with H, W multiples of {p.stride}, got {img.shape}")
    if p.kind is BackboneKind.ORACLE:
        s = p.stride
        return img.reshape(3, H // s, s, W // s, s).mean(axis=(2, 4))
    x = img
    for b in p.blocks:
        spec = T.ConvSpec(b.w.shape[0], b.w.shape[1], 3, 2, (1, 0, 1, 0))
        x = T.conv2d_forward(x, b.w, b.b, spec)[0]
        x = T.relu(T.batchnorm_inference(x, b.bn_mean, b.bn_var, b.bn_gamma, b.bn_beta))
    return x


# --------------------------------------------------------------------------
# cropping and coordinate maps


def crop_resize(frame, center, size, out_px):
    """Square crop of side ``size`` (frame px) around ``center``, bilinearly
    resampled to ``out_px``. Pixels outside the frame take the frame's mean
    colour. Returns 3 x out_px x out_px float32 in [0, 1]."""
    if not size > 0:
        raise ValueError(f"crop size must be positive, got {size}")
    if frame.ndim != 3 or frame.shape[2] != 3:
        raise ShapeError(f"frame must be H x W x 3, got {frame.shape}")
    img = frame.astype(np.float32) / 255.0
    Hf, Wf, _ = img.shape
    mean = img.reshape(-1, 3).mean(axis=0)
    step = size / out_px
    u = np.arange(out_px)
    xs = center[0] - size / 2.0 + (u + 0.5) * step - 0.5
    ys = center[1] - size / 2.0 + (u + 0.5) * step - 0.5
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    fx = (xs - x0).astype(np.float32)
    fy = (ys - y0).astype(np.float32)

    def gather(yi, xi):
        inside = ((yi >= 0) & (yi < Hf))[:, None] & ((xi >= 0) & (xi < Wf))[None, :]
        v = img[np.clip(yi, 0, Hf - 1)[:, None], np.clip(xi, 0, Wf - 1)[None, :]]
        return np.where(inside[..., None], v, mean)

    top = gather(y0, x0) * (1 - fx)[None, :, None] + gather(y0, x0 + 1) * fx[None, :, None]
    bot = gather(y0 + 1, x0) * (1 - fx)[None, :, None] + gather(y0 + 1, x0 + 1) * fx[None, :, None]
    out = top * (1 - fy)[:, None, None] + bot * fy[:, None, None]
    return np.ascontiguousarray(out.transpose(2, 0, 1), dtype=np.float32)


@dataclass(frozen=True)
class CropGeometry:
    """Similarity map between frame coordinates and a crop's pixel coordinates."""

    cx: float
    cy: float
    size: float  # crop side in frame pixels
    out_px: int

    @property
    def scale(self):
        return self.out_px / self.size

    def to_crop(self, box):
        b = np.asarray(box, dtype=np.float64)
        s, h = self.scale, self.out_px / 2.0
        return np.array([(b[0] - self.cx) * s + h, (b[1] - self.cy) * s + h,
                         (b[2] - self.cx) * s + h, (b[3] - self.cy) * s + h])

    def to_frame(self, box):
        b = np.asarray(box, dtype=np.float64)
        s, h = self.scale, self.out_px / 2.0
        return np.array([(b[0] - h) / s + self.cx, (b[1] - h) / s + self.cy,
                         (b[2] - h) / s + self.cx, (b[3] - h) / s + self.cy])


def box_center(box):
    return 0.5 * (box[0] + box[2]), 0.5 * (box[1] + box[3])


def box_extent(box, context):
    """Crop side: ``context`` times the square root of the box area."""
    return context * math.sqrt((box[2] - box[0]) * (box[3] - box[1]))


def check_box(box):
    b = np.asarray(box, dtype=np.float64)
    if b.shape != (4,) or not np.all(np.isfinite(b)) or b[2] <= b[0] or b[3] <= b[1]:
        raise ValueError(f"invalid box {box!r}; need x1 < x2 and y1 < y2")
    return b


# --------------------------------------------------------------------------
# tracker


@dataclass(frozen=True)
class MatchedFilterHead:
    """Untrained head for the ORACLE backbone.

    Classification logits are ``gain`` times the normalised cross-correlation
    of the search features with the template features; regression outputs
    the previous box's half extents at every cell.
    """

    gain: float = 10.0


@dataclass
class TrackerConfig:
    template_px: int = 128
    search_px: int = 256
    template_context: float = 2.0
    search_context: float = 4.0
    penalty: hd.PenaltyConfig = field(default_factory=hd.PenaltyConfig)
    min_size: float = 4.0


@dataclass
class TrackerParams:
    backbone: BackboneParams
    head: Union[hd.HeadParams, MatchedFilterHead]
    config: TrackerConfig = field(default_factory=TrackerConfig)

    def __post_init__(self):
        cfg = self.config
        s = self.backbone.stride
        if cfg.template_px % s or cfg.search_px % s:
            raise ShapeError(f"stride {s} must divide template ({cfg.template_px}) and search ({cfg.search_px}) sizes")
        if isinstance(self.head, hd.HeadParams) and self.head.D != self.backbone.channels:
            raise ShapeError(f"head width {self.head.D} != backbone channels {self.backbone.channels}")


@dataclass
class TrackState:
    template_features: np.ndarray
    template_vector: np.ndarray
    prev_box: np.ndarray
    frame_hw: Tuple[int, int]
    search: Optional[CropGeometry] = None
    score: float = float("nan")


def xcorr_origin(template_hw, stride):
    """Image offset of cell centres so that a template match decodes to the template centre."""
    pt, pl = hd.xcorr_offset(template_hw)
    return (stride * (template_hw[1] / 2.0 - pl - 0.5), stride * (template_hw[0] / 2.0 - pt - 0.5))


def init(frame, gt_box, params: TrackerParams) -> TrackState:
    box = check_box(gt_box)
    cfg = params.config
    cx, cy = box_center(box)
    patch = crop_resize(frame, (cx, cy), box_extent(box, cfg.template_context), cfg.template_px)
    feats = backbone_forward(patch, params.backbone)
    return TrackState(feats, feats.mean(axis=(1, 2)), box, frame.shape[:2])


def _matched_filter(tf, sf, prev_crop, head: MatchedFilterHead):
    tz = tf - tf.mean(axis=(1, 2), keepdims=True)
    n = tf.shape[1] * tf.shape[2]
    num = hd.pointwise_xcorr(tz, sf).sum(axis=0)
    ones = np.ones_like(tf)
    s1 = hd.pointwise_xcorr(ones, sf)
    s2 = hd.pointwise_xcorr(ones, sf * sf)
    local_var = np.maximum(s2 - s1 * s1 / n, 0).sum(axis=0)
    ncc = num / (np.sqrt(local_var) * np.sqrt((tz * tz).sum()) + 1e-6)
    _, H, W = sf.shape
    w = prev_crop[2] - prev_crop[0]
    h = prev_crop[3] - prev_crop[1]
    ltrb = np.broadcast_to(np.array([w / 2, h / 2, w / 2, h / 2])[:, None, None], (4, H, W))
    return head.gain * ncc[None], ltrb


def update(state: TrackState, frame, params: TrackerParams):
    """Track one frame. Returns (new_state, box) with ``box`` in frame coordinates."""
    cfg = params.config
    cx, cy = box_center(state.prev_box)
    geo = CropGeometry(cx, cy, box_extent(state.prev_box, cfg.search_context), cfg.search_px)
    patch = crop_resize(frame, (cx, cy), geo.size, cfg.search_px)
    sf = backbone_forward(patch, params.backbone)
    prev_crop = geo.to_crop(state.prev_box)
    tf = state.template_features
    if isinstance(params.head, MatchedFilterHead):
        cls_logits, ltrb = _matched_filter(tf, sf, prev_crop, params.head)
    else:
        corr = hd.pointwise_xcorr(tf, sf)
        cls_logits, ltrb = hd.head(corr, params.head, state.template_vector)
    stride = params.backbone.stride
    boxes = hd.decode_boxes(ltrb, stride, xcorr_origin(tf.shape[1:], stride))
    crop_box, score, _ = hd.select_box(cls_logits, boxes, prev_crop, cfg.penalty)
    box = _clip(geo.to_frame(crop_box), state.frame_hw, cfg.min_size)
    return replace(state, prev_box=box, search=geo, score=score), box


def _clip(box, frame_hw, min_size):
    H, W = frame_hw
    cx = min(max(0.5 * (box[0] + box[2]), 0.0), W)
    cy = min(max(0.5 * (box[1] + box[3]), 0.0), H)
    w = min(max(box[2] - box[0], min_size), W)
    h = min(max(box[3] - box[1], min_size), H)
    return np.array([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2])


def track_sequence(frames, first_box, params: TrackerParams):
    """Run the tracker over a frame sequence; the first frame's output is ``first_box``."""
    state = init(frames[0], first_box, params)
    boxes = [np.asarray(first_box, dtype=np.float64)]
    for frame in frames[1:]:
        state, box = update(state, frame, params)
        boxes.append(box)
    return np.stack(boxes)
