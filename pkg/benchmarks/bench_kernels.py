"""Compiled kernels vs the numpy fallback.

Times each kernel on both backends, then a full head forward with every
kernel routed through one backend or the other.

    python3 benchmarks/bench_kernels.py [--repeats 30] [--csv out.csv]
"""
import argparse
import csv
import sys

import numpy as np

from ettrack import bench, kernels


def head_rows(kinds, size, D, repeats):
    rows = []
    heads = {k: bench.default_head(k, D) for k in kinds}
    for name in kernels.available_backends():
        with kernels.use_backend(name):
            for k, h in heads.items():
                r = bench.bench_head(h, size, size, repeats=repeats)
                rows.append(bench.KernelRow(f"head[{k}]", name, f"{D}x{size}x{size}", r.median_us, r.iqr_us))
    return rows


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeats", type=int, default=bench.MIN_REPEATS)
    p.add_argument("--C", type=int, default=128)
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--csv")
    args = p.parse_args(argv)

    if "cython" not in kernels.available_backends():
        print("compiled extension not built; only the numpy fallback is timed", file=sys.stderr)
    rows = bench.bench_kernels(C=args.C, H=args.size, W=args.size, repeats=args.repeats)
    rows += head_rows(("conv", "exemplar"), args.size, args.C, args.repeats)

    by_kernel = {}
    for r in rows:
        by_kernel.setdefault((r.kernel, r.shape), {})[r.backend] = r
    print(f"{'kernel':<28}{'shape':<16}{'python us':>12}{'cython us':>12}{'speedup':>10}")
    for (kernel, shape), b in by_kernel.items():
        py = b.get("python")
        cy = b.get("cython")
        speed = f"{py.median_us / cy.median_us:.2f}x" if py and cy else "-"
        print(f"{kernel:<28}{shape:<16}{py.median_us if py else np.nan:>12.1f}"
              f"{cy.median_us if cy else np.nan:>12.1f}{speed:>10}")

    if args.csv:
        with open(args.csv, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["kernel", "backend", "shape", "median_us", "iqr_us"])
            for r in rows:
                w.writerow([r.kernel, r.backend, r.shape, f"{r.median_us:.1f}", f"{r.iqr_us:.1f}"])


if __name__ == "__main__":
    main()
