"""Wall-clock latency of head forwards and of the conv kernels.

Timings use medians and interquartile ranges over repeated runs after a
warmup. BLAS is limited to ``ETTK_THREADS`` threads (default 1) while
timing, so numbers are comparable across runs.
"""
from __future__ import annotations

import contextlib
import csv
import os
import time
from dataclasses import astuple, dataclass, fields

import numpy as np
from threadpoolctl import threadpool_limits

from . import head as hd
from . import kernels

MIN_WARMUP = 3
MIN_REPEATS = 30
SIZES = (16, 32, 64)
HEAD_KINDS = (hd.HeadKind.CONV, hd.HeadKind.EXEMPLAR, hd.HeadKind.STANDARD_ATTN)


def thread_cap():
    return max(1, int(os.environ.get("ETTK_THREADS", "1")))


@contextlib.contextmanager
def pinned_threads(n=None):
    with threadpool_limits(limits=n or thread_cap()):
        yield


def time_call(fn, warmup=MIN_WARMUP, repeats=MIN_REPEATS):
    """Per-call wall-clock seconds for ``repeats`` calls after ``warmup`` calls."""
    return time_interleaved([fn], warmup, repeats)[0]


def time_interleaved(fns, warmup=MIN_WARMUP, repeats=MIN_REPEATS):
    """Time several callables in alternating rounds.

    Round-robin order means slow drifts in machine load hit every callable
    alike, so ratios between them are far steadier than back-to-back runs.
    Returns one array of ``repeats`` per-call seconds for each callable.
    """
    if warmup < MIN_WARMUP or repeats < MIN_REPEATS:
        raise ValueError(f"need warmup >= {MIN_WARMUP} and repeats >= {MIN_REPEATS}")
    for fn in fns:
        for _ in range(warmup):
            fn()
    out = np.empty((len(fns), repeats))
    for i in range(repeats):
        for j, fn in enumerate(fns):
            t0 = time.perf_counter()
            fn()
            out[j, i] = time.perf_counter() - t0
    return list(out)


def median_iqr(samples):
    q1, med, q3 = np.percentile(samples, [25, 50, 75])
    return float(med), float(q3 - q1)


@dataclass
class BenchRow:
    head_kind: str
    H: int
    W: int
    D: int
    median_us: float
    iqr_us: float


def _bench_input(head, H, W, seed):
    dtype = head.cls_modules[-1].w.dtype
    corr = np.random.default_rng(seed).standard_normal((head.D, H, W)).astype(dtype)
    tcond = corr.mean(axis=(1, 2)) if head.use_tcond else None
    return corr, tcond


def _row(head, H, W, samples):
    med, iqr = median_iqr(samples * 1e6)
    return BenchRow(head.head_kind.value, H, W, head.D, med, iqr)


def bench_head(head, H, W, warmup=MIN_WARMUP, repeats=MIN_REPEATS, seed=0):
    corr, tcond = _bench_input(head, H, W, seed)
    with pinned_threads():
        t = time_call(lambda: hd.head(corr, head, tcond), warmup, repeats)
    return _row(head, H, W, t)


def default_head(kind, D=128, seed=0, **kw):
    """Head used for latency comparisons. Exemplar value kernels are depthwise unless overridden."""
    kind = hd.HeadKind(kind)
    if kind is hd.HeadKind.EXEMPLAR:
        kw.setdefault("value_groups", D)
    return hd.init_head(kind, D=D, rng=seed, **kw)


def bench_heads(kinds=HEAD_KINDS, sizes=SIZES, D=128, warmup=MIN_WARMUP, repeats=MIN_REPEATS, seed=0,
                heads=None, progress=None):
    """One row per (kind, size); at each size the heads are timed in interleaved rounds.

    ``heads`` maps kind -> prebuilt HeadParams.
    """
    built = []
    for kind in kinds:
        kind = hd.HeadKind(kind)
        built.append((heads or {}).get(kind) or default_head(kind, D, seed))
    rows = []
    for n in sizes:
        fns = []
        for head in built:
            corr, tcond = _bench_input(head, n, n, seed)
            fns.append(lambda h=head, c=corr, t=tcond: hd.head(c, h, t))
        with pinned_threads():
            samples = time_interleaved(fns, warmup, repeats)
        for head, t in zip(built, samples):
            rows.append(_row(head, n, n, t))
            if progress:
                progress(rows[-1])
    rows.sort(key=lambda r: [h.head_kind.value for h in built].index(r.head_kind))
    return rows


def write_rows(rows, path_or_file):
    own = isinstance(path_or_file, (str, os.PathLike))
    f = open(path_or_file, "w", newline="") if own else path_or_file
    try:
        w = csv.writer(f)
        w.writerow([fl.name for fl in fields(rows[0])] if rows else [fl.name for fl in fields(BenchRow)])
        for r in rows:
            w.writerow([f"{v:.1f}" if isinstance(v, float) else v for v in astuple(r)])
    finally:
        if own:
            f.close()


@dataclass
class KernelRow:
    kernel: str
    backend: str
    shape: str
    median_us: float
    iqr_us: float


def bench_kernels(C=128, H=16, W=16, Z=3, warmup=MIN_WARMUP, repeats=MIN_REPEATS, dtype=np.float32, seed=0):
    """Time every compiled kernel against its numpy fallback, on each available backend."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((C, H, W)).astype(dtype)
    w = rng.standard_normal((C, Z, Z)).astype(dtype)
    p = (Z - 1) // 2
    pads = (p, p, p, p)
    shape = f"{C}x{H}x{W} k{Z}"
    rows = []
    for name in kernels.available_backends():
        k = kernels.get_backend(name)
        cols = k.im2col(x, Z, Z, 1, *pads)
        dout = rng.standard_normal((C, H, W)).astype(dtype)
        x2 = x.reshape(C, H * W)
        gamma = np.ones(C, dtype)
        beta = rng.standard_normal(C).astype(dtype)
        cases = {
            "im2col": lambda: k.im2col(x, Z, Z, 1, *pads),
            "col2im": lambda: k.col2im(cols, C, H, W, Z, Z, 1, *pads),
            "depthwise_conv2d": lambda: k.depthwise_conv2d(x, w, 1, *pads),
            "depthwise_conv2d_backward": lambda: k.depthwise_conv2d_backward(dout, x, w, 1, *pads),
            "layernorm_columns": lambda: k.layernorm_columns(x2, gamma, beta, 1e-5),
            "bias_relu_": lambda: k.bias_relu_(x2.copy(), beta),
        }
        with pinned_threads():
            for kernel, fn in cases.items():
                med, iqr = median_iqr(time_call(fn, warmup, repeats) * 1e6)
                rows.append(KernelRow(kernel, name, shape, med, iqr))
    return rows
