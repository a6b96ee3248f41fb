"""Deterministic synthetic sequences: a textured square moving over a textured background."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np


class Motion(str, enum.Enum):
    TRANSLATE = "translate"
    SCALE = "scale"
    TURN = "turn"


@dataclass
class SynthSequence:
    frames: List[np.ndarray]  # H x W x 3 uint8
    boxes: np.ndarray  # N x 4 float64, corner form
    motion: Motion
    seed: int

    def __len__(self):
        return len(self.frames)


def _blocky_noise(rng, h, w, cell, lo, hi):
    """Colour noise constant over cell x cell blocks, values in [lo, hi]."""
    gh, gw = -(-h // cell), -(-w // cell)
    g = rng.uniform(lo, hi, (gh, gw, 3))
    return np.kron(g, np.ones((cell, cell, 1)))[:h, :w]


def _background(rng, H, W):
    yy, xx = np.mgrid[0:H, 0:W]
    base = 0.45 + 0.1 * np.sin(xx / 37.0)[..., None] * np.array([1.0, 0.6, 0.3])
    base = base + 0.05 * np.cos(yy / 23.0)[..., None]
    return base + _blocky_noise(rng, H, W, 4, -0.06, 0.06)


def _paint(frame, texture, box):
    """Paint ``texture`` stretched over ``box`` (nearest sampling at pixel centres)."""
    H, W, _ = frame.shape
    th, tw, _ = texture.shape
    x1, y1, x2, y2 = box
    xs = np.arange(max(int(np.floor(x1)), 0), min(int(np.ceil(x2)), W))
    ys = np.arange(max(int(np.floor(y1)), 0), min(int(np.ceil(y2)), H))
    xs = xs[(xs + 0.5 >= x1) & (xs + 0.5 < x2)]
    ys = ys[(ys + 0.5 >= y1) & (ys + 0.5 < y2)]
    if xs.size == 0 or ys.size == 0:
        return
    u = np.clip(((xs + 0.5 - x1) / (x2 - x1) * tw).astype(int), 0, tw - 1)
    v = np.clip(((ys + 0.5 - y1) / (y2 - y1) * th).astype(int), 0, th - 1)
    frame[ys[:, None], xs[None, :]] = texture[v[:, None], u[None, :]]


def _centres(motion, n, frame_hw, size, speed, out_of_view):
    H, W = frame_hw
    t = np.arange(n, dtype=np.float64)
    if motion is Motion.TURN:
        # half circle: left to right over the top, then the target faces the other way
        R = min(W, H) / 2.0 - size
        if R <= 0:
            raise ValueError("frame too small for a turning target")
        theta = np.pi * (1 - t / max(n - 1, 1))
        return W / 2.0 + R * np.cos(theta), H / 2.0 + 0.5 * R - R * np.sin(theta)
    if out_of_view:
        cx = W - 1.5 * size + speed * t
    else:
        cx = size + speed * t
        if cx[-1] + size / 2.0 > W:
            raise ValueError(f"target leaves a {W} px wide frame; lower speed or length")
    return cx, np.full(n, H / 2.0)


def synth_sequence(motion="translate", length=50, seed=0, frame_hw=(240, 320), size=40.0,
                   speed=2.0, out_of_view=False, min_scale=math.sqrt(0.5)) -> SynthSequence:
    """Render ``length`` frames with exact ground-truth boxes.

    translate: the target moves right at ``speed`` px/frame.
    scale: the target stays put and its side shrinks linearly to ``min_scale``
    times the start (by default the last frame has half the first frame's area).
    turn: the target follows a half circle and its texture is mirrored halfway.
    ``out_of_view`` starts a translating target near the right edge so it leaves the frame.
    """
    motion = Motion(motion)
    if length < 2:
        raise ValueError("a sequence needs at least 2 frames")
    if speed < 0 or size <= 0 or not 0 < min_scale <= 1:
        raise ValueError("speed must be >= 0, size > 0 and 0 < min_scale <= 1")
    H, W = frame_hw
    if size * 2 > min(H, W):
        raise ValueError(f"target of size {size} does not fit a {frame_hw} frame")
    rng = np.random.default_rng(seed)
    background = _background(rng, H, W)
    texture = _blocky_noise(rng, 32, 32, 8, 0.0, 1.0)

    if motion is Motion.SCALE:
        sides = size * np.linspace(1.0, min_scale, length)
        cx, cy = np.full(length, W / 2.0), np.full(length, H / 2.0)
    else:
        sides = np.full(length, float(size))
        cx, cy = _centres(motion, length, frame_hw, size, speed, out_of_view)

    frames, boxes = [], []
    for i in range(length):
        s = sides[i]
        box = np.array([cx[i] - s / 2, cy[i] - s / 2, cx[i] + s / 2, cy[i] + s / 2])
        tex = texture[:, ::-1] if motion is Motion.TURN and i >= length // 2 else texture
        f = background.copy()
        _paint(f, tex, box)
        frames.append(np.clip(np.round(f * 255), 0, 255).astype(np.uint8))
        boxes.append(box)
    return SynthSequence(frames, np.stack(boxes), motion, seed)
