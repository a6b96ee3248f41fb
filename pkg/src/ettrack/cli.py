"""Command-line entry point: ``ettrack {gradcheck,bench,track,ablate,make-synth}``.

Exit codes: 0 success, 1 invalid input or configuration, 2 numerical
failure (non-finite values, divergence, or a failed gradient check).
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import replace

import numpy as np

from . import bench as bn
from . import frames as fio
from . import head as hd
from . import pipeline as pl
from .attention import Variant
from .config import ConfigError, RunConfig
from .eval import SequenceResult, synth_sequence
from .eval.train import make_training_pair, overfit, loss_and_grads
from .gradcheck import CASES, run_gradcheck
from .tensor import ShapeError
from .weights import WeightsFormatError, assign_weights, load_weights, save_weights

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_NUMERIC = 2

CONFIG_FLAGS = {
    "head_kind": dict(choices=[k.value for k in hd.HeadKind]),
    "variant": dict(choices=[v.value for v in Variant]),
    "E": dict(type=int), "S": dict(type=int), "Z": dict(type=int), "D": dict(type=int),
    "D_QK": dict(type=int), "value_groups": dict(type=int),
    "tcond": dict(action="store_true", default=None),
    "ffn_residual": dict(action="store_true", default=None),
    "scale_after_softmax": dict(action="store_true", default=None),
    "seed": dict(type=int),
}

ABLATE_VARIANTS = ("conv", "att_only", "att_ffn", "att_ffn_tcond")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage, which would read as a numerical failure here
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


def _add_config_flags(p):
    g = p.add_argument_group("run configuration (override --config)")
    g.add_argument("--config", help="JSON file with RunConfig fields")
    for name, kw in CONFIG_FLAGS.items():
        g.add_argument("--" + name.replace("_", "-"), dest=name, **kw)


def load_config(args, **forced):
    d = {}
    if getattr(args, "config", None):
        d = RunConfig.from_json(args.config).to_dict()
    for name in CONFIG_FLAGS:
        v = getattr(args, name, None)
        if v is not None:
            d[name] = v
    d.update(forced)
    return RunConfig.from_dict(d)


def _head_from_config(cfg, kind=None, D=None, **kw):
    hk = cfg.head_kwargs()
    hk.update(kind=kind or cfg.head_kind)
    if D is not None:
        hk.update(D=D, value_groups=D if cfg.value_groups == 0 else cfg.value_groups)
        if D % hk["value_groups"]:
            raise ConfigError(f"value_groups={hk['value_groups']} must divide D={D}")
    hk.update(kw)
    return hd.init_head(**hk)


# --------------------------------------------------------------------------
# gradcheck


def cmd_gradcheck(args):
    if args.list:
        print("\n".join(CASES))
        return EXIT_OK
    if np.dtype(args.dtype) != np.float64:
        raise ConfigError(f"gradcheck runs in float64 only, got --dtype {args.dtype}")
    report = run_gradcheck(args.cases, seed=args.seed)
    if args.out:
        with open(args.out, "w") as f:
            json.dump(report, f, indent=2)
    status = "PASS" if report["passed"] else "FAIL"
    print(f"gradcheck {status}: {len(report['cases'])} cases, max rel error {report['max_rel_error']:.2e} "
          f"(tolerance {report['tolerance']:.0e})")
    for name in report["failures"]:
        case, tensor = name.split(":", 1)
        print(f"  failed {name}: rel error {report['cases'][case][tensor]:.2e}")
    return EXIT_OK if report["passed"] else EXIT_NUMERIC


# --------------------------------------------------------------------------
# bench


def cmd_bench(args):
    cfg = load_config(args)
    heads = {hd.HeadKind(k): _head_from_config(cfg, kind=k) for k in args.kinds}
    rows = bn.bench_heads(list(heads), args.sizes, cfg.D, args.warmup, args.repeats, cfg.seed, heads=heads,
                          progress=lambda r: print(f"{r.head_kind:>14} {r.H}x{r.W}x{r.D}: "
                                                   f"median {r.median_us:.0f} us, IQR {r.iqr_us:.0f} us",
                                                   file=sys.stderr))
    bn.write_rows(rows, args.out if args.out else sys.stdout)
    return EXIT_OK


# --------------------------------------------------------------------------
# track


class _TrackerArrays:
    def __init__(self, params):
        self.params = params

    def arrays(self):
        out = {}
        if isinstance(self.params.head, hd.HeadParams):
            out.update(self.params.head.arrays("head."))
        out.update(self.params.backbone.arrays("backbone."))
        return out


def build_tracker(cfg, backbone, head_kind, weights=None, init=None):
    bb = pl.init_backbone(backbone, rng=cfg.seed if init is None else init)
    if head_kind == "matched":
        if weights:
            raise ConfigError("the matched-filter head has no weights")
        head = pl.MatchedFilterHead()
    else:
        if weights is None and init is None:
            raise ConfigError(f"head '{head_kind}' needs --weights or --init SEED")
        seed = cfg.seed if init is None else init
        head = _head_from_config(replace(cfg, seed=seed), kind=head_kind, D=bb.channels)
    params = pl.TrackerParams(bb, head, pl.TrackerConfig(penalty=cfg.penalty_config))
    if weights:
        arrays = load_weights(weights)
        target = _TrackerArrays(params)
        have_bb = any(k.startswith("backbone.") for k in arrays)
        if not have_bb:
            arrays.update(params.backbone.arrays("backbone."))
        assign_weights(target, arrays)
    return params


def _load_input(args):
    if args.synth:
        seq = synth_sequence(args.synth, args.length, seed=args.synth_seed, out_of_view=args.out_of_view)
        return seq.frames, seq.boxes
    return fio.read_sequence(args.frames)


def cmd_track(args):
    cfg = load_config(args)
    params = build_tracker(cfg, args.backbone, args.head, args.weights, args.init)
    if args.save_weights:
        save_weights(args.save_weights, _TrackerArrays(params).arrays())
    frames, boxes = _load_input(args)
    pred = pl.track_sequence(frames, boxes[0], params)
    if not np.all(np.isfinite(pred)):
        raise FloatingPointError("tracker produced non-finite boxes")
    out_dir = os.path.dirname(args.out)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    with open(args.out + ".boxes.txt", "w") as f:
        for b in pred:
            f.write(",".join(repr(float(v)) for v in b) + "\n")
    summary = {"frames": len(frames), "head": args.head, "backbone": args.backbone}
    if len(boxes) == len(frames):
        res = SequenceResult(pred, boxes)
        res.to_csv(args.out + ".csv")
        summary.update(res.summary())
        print(f"AO {res.ao:.3f}  AUC {res.auc:.3f}  precision@20px {res.precision:.3f}  ({len(frames)} frames)")
    else:
        print(f"tracked {len(frames)} frames; no ground truth beyond frame 0, metrics skipped")
    with open(args.out + ".json", "w") as f:
        json.dump(summary, f, indent=2)
    if args.overlay:
        os.makedirs(args.overlay, exist_ok=True)
        for i, fr in enumerate(frames):
            img = fr
            if len(boxes) == len(frames):
                img = fio.draw_box(img, boxes[i], (0, 255, 0))
            img = fio.draw_box(img, pred[i], (255, 0, 0))
            fio.write_ppm(os.path.join(args.overlay, f"{i:05d}.ppm"), img)
    return EXIT_OK


# --------------------------------------------------------------------------
# ablate


def ablation_cells(Es, Ss, variants):
    """Yields (variant, E, S, skip_reason or None) over the full grid."""
    for v in variants:
        for E in Es:
            for S in Ss:
                note = None
                if v == "conv" and (E != 1 or S != 1):
                    note = "E and S do not apply to the conv head; kept only at E=1, S=1"
                yield v, E, S, note


def _ablation_head(cfg, variant, E, S, D):
    if variant == "conv":
        return _head_from_config(cfg, kind="conv", D=D)
    base = dict(kind="exemplar", E=E, S=S)
    if variant == "att_ffn_tcond":
        return _head_from_config(cfg, D=D, variant="att_ffn", use_tcond=True, **base)
    return _head_from_config(cfg, D=D, variant=variant, use_tcond=False, **base)


ABLATE_COLUMNS = ["variant", "E", "S", "params", "initial_loss", "final_loss", "lr", "latency_us"]


def run_ablation(cfg, Es, Ss, variants, steps, lr, size, warmup, repeats, notes=None):
    pair = make_training_pair(seed=cfg.seed)
    D = pair.corr.shape[0]
    _, H, W = pair.corr.shape
    rows = []
    for v, E, S, note in ablation_cells(Es, Ss, variants):
        if note is None and S > min(H, W, size):
            note = f"S={S} exceeds the {min(H, W, size)}-cell feature map"
        if note:
            if notes is not None:
                notes.append(f"skipped variant={v} E={E} S={S}: {note}")
            continue
        head = _ablation_head(cfg, v, E, S, D)
        initial, _ = loss_and_grads(head, pair)
        trace, used = overfit(head, pair, steps=steps, lr=lr) if steps else ([initial], lr)
        lat = bn.bench_head(head, size, size, warmup, repeats, cfg.seed)
        rows.append(dict(variant=v, E=E, S=S, params=head.num_parameters(), initial_loss=float(initial),
                         final_loss=float(trace[-1]), lr=used, latency_us=lat.median_us))
    return rows


def cmd_ablate(args):
    cfg = load_config(args)
    notes = []
    rows = run_ablation(cfg, args.grid_E, args.grid_S, args.variants, args.steps, args.lr, args.size,
                        args.warmup, args.repeats, notes)
    for n in notes:
        print(n, file=sys.stderr)
    own = bool(args.out)
    f = open(args.out, "w", newline="") if own else sys.stdout
    try:
        w = csv.DictWriter(f, ABLATE_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in r.items()})
    finally:
        if own:
            f.close()
    return EXIT_OK


# --------------------------------------------------------------------------
# make-synth


def cmd_make_synth(args):
    seq = synth_sequence(args.motion, args.length, seed=args.seed, out_of_view=args.out_of_view)
    fio.write_sequence(args.out, seq.frames, seq.boxes)
    print(f"wrote {len(seq.frames)} frames to {args.out}")
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser():
    p = _Parser(prog="ettrack", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gradcheck", help="finite-difference gradient suite (float64)")
    g.add_argument("--out", help="JSON report path")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--dtype", default="float64")
    g.add_argument("--cases", nargs="+", choices=list(CASES), metavar="CASE")
    g.add_argument("--list", action="store_true", help="list case names and exit")
    g.set_defaults(fn=cmd_gradcheck)

    b = sub.add_parser("bench", help="head forward latency table (CSV)")
    b.add_argument("--sizes", type=int, nargs="+", default=list(bn.SIZES))
    b.add_argument("--kinds", nargs="+", default=[k.value for k in bn.HEAD_KINDS],
                   choices=[k.value for k in hd.HeadKind])
    b.add_argument("--warmup", type=int, default=bn.MIN_WARMUP)
    b.add_argument("--repeats", type=int, default=bn.MIN_REPEATS)
    b.add_argument("--out", help="CSV path (default stdout)")
    _add_config_flags(b)
    b.set_defaults(fn=cmd_bench)

    t = sub.add_parser("track", help="track a sequence and score it")
    src = t.add_mutually_exclusive_group(required=True)
    src.add_argument("--synth", choices=["translate", "scale", "turn"])
    src.add_argument("--frames", help="sequence directory (NNNNN.ppm/png + boxes.txt)")
    t.add_argument("--length", type=int, default=50)
    t.add_argument("--synth-seed", type=int, default=0)
    t.add_argument("--out-of-view", action="store_true")
    t.add_argument("--backbone", choices=[k.value for k in pl.BackboneKind], default="oracle")
    t.add_argument("--head", choices=["matched"] + [k.value for k in hd.HeadKind], default="matched")
    w = t.add_mutually_exclusive_group()
    w.add_argument("--weights", help="weights file for the head (and optionally the backbone)")
    w.add_argument("--init", type=int, metavar="SEED", help="random initialisation seed")
    t.add_argument("--save-weights", help="write the tracker's arrays to this file")
    t.add_argument("--out", required=True, help="output prefix for .csv, .json and .boxes.txt")
    t.add_argument("--overlay", help="directory for per-frame PPMs with boxes drawn")
    _add_config_flags(t)
    t.set_defaults(fn=cmd_track)

    a = sub.add_parser("ablate", help="grid over E, S and layer variant (CSV)")
    a.add_argument("--grid-E", type=int, nargs="+", default=[1, 4, 16])
    a.add_argument("--grid-S", type=int, nargs="+", default=[1, 2, 4])
    a.add_argument("--variants", nargs="+", default=list(ABLATE_VARIANTS), choices=ABLATE_VARIANTS)
    a.add_argument("--steps", type=int, default=200)
    a.add_argument("--lr", type=float, default=0.01)
    a.add_argument("--size", type=int, default=16, help="map side for the latency column")
    a.add_argument("--warmup", type=int, default=bn.MIN_WARMUP)
    a.add_argument("--repeats", type=int, default=bn.MIN_REPEATS)
    a.add_argument("--out", help="CSV path (default stdout)")
    _add_config_flags(a)
    a.set_defaults(fn=cmd_ablate)

    m = sub.add_parser("make-synth", help="write a synthetic sequence directory")
    m.add_argument("--motion", choices=["translate", "scale", "turn"], default="translate")
    m.add_argument("--length", type=int, default=50)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--out-of-view", action="store_true")
    m.add_argument("--out", required=True)
    m.set_defaults(fn=cmd_make_synth)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        return args.fn(args)
    except FloatingPointError as e:
        print(f"ettrack: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_INVALID
    except (ConfigError, ShapeError, WeightsFormatError, ValueError, KeyError, OSError,
            RuntimeError) as e:
        print(f"ettrack: error: {e}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
