"""Binary weight files.

Layout (little-endian throughout)::

    b"ETWB"  u16 version  u32 count
    count x [u16 name_len, name (UTF-8), u8 dtype (0=f32, 1=f64), u8 ndim, ndim x u32 dims, raw data]
"""
from __future__ import annotations

import os
import struct
from typing import Dict

import numpy as np

MAGIC = b"ETWB"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class WeightsFormatError(ValueError):
    pass


def save_weights(path, arrays: Dict[str, np.ndarray]):
    with open(path, "wb") as f:
        f.write(MAGIC + struct.pack("<HI", VERSION, len(arrays)))
        for name, a in arrays.items():
            a = np.asarray(a)
            if a.dtype not in _CODES:
                raise WeightsFormatError(f"{name}: unsupported dtype {a.dtype}")
            raw = name.encode("utf-8")
            if len(raw) > 0xFFFF or a.ndim > 0xFF:
                raise WeightsFormatError(f"{name}: name or rank too large")
            code = _CODES[a.dtype]
            f.write(struct.pack("<H", len(raw)) + raw)
            f.write(struct.pack(f"<BB{a.ndim}I", code, a.ndim, *a.shape))
            f.write(np.ascontiguousarray(a, dtype=_DTYPES[code]).tobytes())


def _read(f, n, end):
    # compare against the bytes left so a corrupt header cannot trigger a huge allocation
    if f.tell() + n > end:
        raise WeightsFormatError("truncated weights file")
    return f.read(n)


def load_weights(path) -> Dict[str, np.ndarray]:
    out = {}
    with open(path, "rb") as f:
        end = os.fstat(f.fileno()).st_size
        if f.read(4) != MAGIC:
            raise WeightsFormatError(f"{path}: not a weights file (bad magic)")
        version, count = struct.unpack("<HI", _read(f, 6, end))
        if version != VERSION:
            raise WeightsFormatError(f"{path}: unsupported version {version}")
        for _ in range(count):
            (n,) = struct.unpack("<H", _read(f, 2, end))
            name = _read(f, n, end).decode("utf-8")
            code, ndim = struct.unpack("<BB", _read(f, 2, end))
            if code not in _DTYPES:
                raise WeightsFormatError(f"{name}: unknown dtype code {code}")
            shape = struct.unpack(f"<{ndim}I", _read(f, 4 * ndim, end))
            dt = _DTYPES[code]
            size = int(np.prod(shape, dtype=np.int64))
            a = np.frombuffer(_read(f, size * dt.itemsize, end), dtype=dt).reshape(shape)
            out[name] = a.astype(dt.newbyteorder("="))
    return out


def assign_weights(params, arrays: Dict[str, np.ndarray], strict=True):
    """Copy ``arrays`` into the matching arrays of ``params`` (anything with ``.arrays()``)."""
    target = params.arrays()
    missing = sorted(set(target) - set(arrays))
    extra = sorted(set(arrays) - set(target))
    if strict and (missing or extra):
        raise WeightsFormatError(f"name mismatch; missing {missing[:5]}, unexpected {extra[:5]}")
    for k, v in target.items():
        if k not in arrays:
            continue
        if arrays[k].shape != v.shape:
            raise WeightsFormatError(f"{k}: shape {arrays[k].shape} does not match {v.shape}")
        v[...] = arrays[k]
    return params
