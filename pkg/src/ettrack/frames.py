"""Frame files: binary PPM read/write, optional PNG via Pillow, box overlays.

A sequence directory holds frames named ``00000.ppm`` (or ``.png``),
``00001.ppm``, ... and a ``boxes.txt`` with one ``x1,y1,x2,y2`` line per
frame. Only the first line is needed to track; further lines are ground
truth for scoring.
"""
from __future__ import annotations

import os
import re

import numpy as np

FRAME_RE = re.compile(r"^(\d+)\.(ppm|png)$")
BOXES_FILE = "boxes.txt"


class MissingFrameError(FileNotFoundError):
    def __init__(self, directory, index):
        super().__init__(f"{directory}: missing frame {index} (first missing index)")
        self.index = index


def _token(data, pos):
    # skip whitespace and '#' comments between header fields
    while True:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        break
    end = pos
    while end < len(data) and not data[end:end + 1].isspace():
        end += 1
    return data[pos:end], end


def read_ppm(path):
    """Binary (P6, maxval 255) PPM -> H x W x 3 uint8."""
    with open(path, "rb") as f:
        data = f.read()
    magic, pos = _token(data, 0)
    if magic != b"P6":
        raise ValueError(f"{path}: not a binary PPM (magic {magic!r})")
    vals = []
    for _ in range(3):
        tok, pos = _token(data, pos)
        vals.append(int(tok))
    W, H, maxval = vals
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported, got {maxval}")
    pix = data[pos + 1:pos + 1 + H * W * 3]
    if len(pix) != H * W * 3:
        raise ValueError(f"{path}: truncated pixel data")
    return np.frombuffer(pix, dtype=np.uint8).reshape(H, W, 3).copy()


def write_ppm(path, img):
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected H x W x 3 uint8, got {img.dtype} {img.shape}")
    H, W, _ = img.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{W} {H}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(img).tobytes())


def read_frame(path):
    if str(path).lower().endswith(".png"):
        try:
            from PIL import Image
        except ImportError:
            raise RuntimeError("reading PNG frames needs Pillow; convert to PPM or install Pillow") from None
        return np.asarray(Image.open(path).convert("RGB"), dtype=np.uint8)
    return read_ppm(path)


def draw_box(img, box, color=(255, 0, 0)):
    """Copy of ``img`` with a 1-px rectangle outline, clipped to the frame."""
    out = img.copy()
    H, W, _ = out.shape
    x1, y1, x2, y2 = (int(round(v)) for v in box)
    xa, xb = max(x1, 0), min(x2, W - 1)
    ya, yb = max(y1, 0), min(y2, H - 1)
    if xa > xb or ya > yb:
        return out
    for y in (y1, y2):
        if 0 <= y < H:
            out[y, xa:xb + 1] = color
    for x in (x1, x2):
        if 0 <= x < W:
            out[ya:yb + 1, x] = color
    return out


def write_sequence(directory, frames, boxes):
    os.makedirs(directory, exist_ok=True)
    for i, fr in enumerate(frames):
        write_ppm(os.path.join(directory, f"{i:05d}.ppm"), fr)
    with open(os.path.join(directory, BOXES_FILE), "w") as f:
        for b in boxes:
            f.write(",".join(repr(float(v)) for v in b) + "\n")


def read_boxes(path):
    rows = []
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.replace(" ", ",").replace("\t", ",").split(",")
            parts = [p for p in parts if p]
            if len(parts) != 4:
                raise ValueError(f"{path}:{ln}: expected x1,y1,x2,y2, got {line!r}")
            rows.append([float(p) for p in parts])
    if not rows:
        raise ValueError(f"{path}: no boxes")
    return np.array(rows)


def read_sequence(directory):
    """Returns (frames, boxes). Raises MissingFrameError on gaps in the numbering."""
    if not os.path.isdir(directory):
        raise FileNotFoundError(f"{directory}: not a directory")
    found = {}
    for name in os.listdir(directory):
        m = FRAME_RE.match(name)
        if m:
            found[int(m.group(1))] = os.path.join(directory, name)
    boxes_path = os.path.join(directory, BOXES_FILE)
    if not os.path.exists(boxes_path):
        raise FileNotFoundError(f"{directory}: missing {BOXES_FILE}")
    boxes = read_boxes(boxes_path)
    n = max(len(boxes), max(found) + 1 if found else 0)
    for i in range(n):
        if i not in found:
            raise MissingFrameError(directory, i)
    return [read_frame(found[i]) for i in range(n)], boxes
