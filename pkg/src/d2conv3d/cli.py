"""Command-line interface.

Exit codes: 0 success, 1 check/tolerance failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _backend, bench, conv_ops, gradcheck, viz
from .blocks import D2Block
from .conv_ops import ConvConfig
from .sampler import SamplingStats
from .tensor import npy_read, npy_write

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
log = logging.getLogger("d2conv3d")


class UsageError(Exception):
    pass


def _shape(text: str, ndim: int = 5) -> tuple:
    try:
        dims = tuple(int(v) for v in text.replace("x", ",").split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid shape {text!r}") from None
    if len(dims) != ndim or any(d < 1 for d in dims):
        raise argparse.ArgumentTypeError(f"shape must be {ndim} positive integers, got {text!r}")
    return dims


def _triple(text: str) -> tuple:
    try:
        vals = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid triple {text!r}") from None
    if len(vals) != 3:
        raise argparse.ArgumentTypeError(f"expected three comma-separated numbers, got {text!r}")
    return vals


def _open_out(path):
    return open(path, "w", newline="") if path else sys.stdout


# ---------------------------------------------------------------- gradcheck


def cmd_gradcheck(args) -> int:
    rng = np.random.default_rng(args.seed)
    ok = True
    for _ in range(args.instances):
        try:
            report = gradcheck.run_check(args.op, rng, args.shape, args.width, corrupt=args.corrupt_gradient)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        for line in report.lines():
            print(line)
        ok &= report.passed
    print(f"{args.op}: {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_FAIL


# ---------------------------------------------------------------- bench


def cmd_bench(args) -> int:
    if args.reps < 3:
        raise UsageError(f"--reps must be >= 3, got {args.reps}")
    ops = [o for o in args.ops.split(",") if o]
    bad = [o for o in ops if o not in bench.BENCH_OPS]
    if bad:
        raise UsageError(f"unknown operator(s) {bad}; choose from {list(bench.BENCH_OPS)}")
    backends = list(_backend.BACKENDS) if args.backend == "both" else args.backend.split(",")
    for b in backends:
        if b not in _backend.BACKENDS:
            raise UsageError(f"unknown backend {b!r}")
    shapes = args.shape or [(1, 8, 8, 32, 32)]
    records = bench.run_bench(ops, shapes, args.width, args.reps, backends)
    if args.out:
        bench.write_csv(records, args.out)
    for r in records:
        print(f"{r.op:9s} {r.shape:14s} {r.backend:6s} median {r.median_ms:9.2f} ms  "
              f"p10 {r.p10_ms:9.2f}  p90 {r.p90_ms:9.2f}  peak {r.peak_bytes / 2**20:8.1f} MiB")
    return EXIT_OK


# ---------------------------------------------------------------- oob-stats

OOB_COLUMNS = ["layer", "total", "oob", "percent", "mean_sequence_percent"]


def _oob_rows(per_seq: list[dict]) -> list[dict]:
    """Rows per layer plus the two aggregate rows, from per-sequence ``{layer: SamplingStats}``."""
    layers = list(per_seq[0]) if per_seq else []
    rows = []
    for name in layers:
        pooled = SamplingStats(name)
        for seq in per_seq:
            pooled.merge(seq[name])
        rows.append({"layer": name, "total": pooled.total_samples, "oob": pooled.oob_samples,
                     "percent": pooled.percent,
                     "mean_sequence_percent": float(np.mean([seq[name].percent for seq in per_seq]))})
    total = sum(r["total"] for r in rows)
    oob = sum(r["oob"] for r in rows)
    seq_pooled = []
    for seq in per_seq:
        s = SamplingStats()
        for v in seq.values():
            s.merge(v)
        seq_pooled.append(s.percent)
    rows.append({"layer": "ALL_pooled", "total": total, "oob": oob,
                 "percent": 100.0 * oob / total if total else 0.0,
                 "mean_sequence_percent": float(np.mean(seq_pooled)) if seq_pooled else 0.0})
    rows.append({"layer": "ALL_layer_mean", "total": total, "oob": oob,
                 "percent": float(np.mean([r["percent"] for r in rows[:-1]])) if layers else 0.0,
                 "mean_sequence_percent": float(np.mean([r["mean_sequence_percent"] for r in rows[:-1]]))
                 if layers else 0.0})
    return rows


def _oob_synthetic(args) -> list[dict]:
    shape = args.shape or (1, 1, 8, 16, 16)
    cfg = ConvConfig.same()
    out = cfg.output_shape(shape[2:])
    K = cfg.num_points
    rng = np.random.default_rng(args.seed)
    kwargs = {}
    if args.synthetic_dilations is not None:
        if args.variant != "d2conv3d":
            raise UsageError("--synthetic-dilations only applies to --variant d2conv3d")
        kwargs["dilation"] = np.broadcast_to(
            np.asarray(args.synthetic_dilations).reshape(1, 3, 1, 1, 1), (shape[0], 3, *out)).copy()
    elif args.variant == "d2conv3d":
        kwargs["dilation"] = np.ones((shape[0], 3, *out))
    if args.variant in ("dcn1", "dcn2"):
        std = args.synthetic_offsets if args.synthetic_offsets is not None else 0.0
        kwargs["offsets"] = rng.normal(0.0, std, size=(shape[0], 3 * K, *out))
    elif args.synthetic_offsets is not None:
        raise UsageError("--synthetic-offsets only applies to dcn1/dcn2")
    per_seq = []
    for n in range(shape[0]):
        sub = {k: v[n : n + 1] for k, v in kwargs.items()}
        st = conv_ops.oob_stats_for(args.variant, (1, *shape[1:]), cfg, region=args.region, label=args.variant, **sub)
        per_seq.append({args.variant: st})
    return per_seq


def _oob_checkpoint(args) -> list[dict]:
    from .train.data import make_dataset
    from .train.net import ToyNet
    from .train.trainer import TrainConfig

    if not Path(args.checkpoint, "manifest.json").exists():
        raise UsageError(f"missing checkpoint: {args.checkpoint}")
    net = ToyNet.load(args.checkpoint)
    if net.cfg.variant != args.variant:
        raise UsageError(f"checkpoint uses variant {net.cfg.variant!r}, not {args.variant!r}")
    tc = TrainConfig()
    base = tc.clip_spec()
    if args.shape:
        from dataclasses import replace
        base = replace(base, frames=args.shape[2], height=args.shape[3], width=args.shape[4])
    X, _ = make_dataset(args.clips, args.seed, base, tc.max_speed)
    per_seq = []
    for clip in X:
        stats: dict = {}
        net.forward(clip[None], stats=stats)
        per_seq.append(stats)
    return per_seq


def cmd_oob_stats(args) -> int:
    per_seq = _oob_checkpoint(args) if args.checkpoint else _oob_synthetic(args)
    rows = _oob_rows(per_seq)
    fh = _open_out(args.out)
    try:
        w = csv.DictWriter(fh, fieldnames=OOB_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow(r)
    finally:
        if fh is not sys.stdout:
            fh.close()
    return EXIT_OK


# ---------------------------------------------------------------- viz


def cmd_viz(args) -> int:
    from scipy.special import expit
    from .train.net import ToyNet

    if not Path(args.checkpoint, "manifest.json").exists():
        raise UsageError(f"missing checkpoint: {args.checkpoint}")
    net = ToyNet.load(args.checkpoint)
    x = npy_read(args.input)
    if x.shape[1] != net.cfg.in_channels:
        raise UsageError(f"input has {x.shape[1]} channels, network expects {net.cfg.in_channels}")
    logits = net.forward(x[:1], capture=True)
    layers = [l for l in net.dynamic_layers() if isinstance(l.op, D2Block)]
    if not layers:
        raise UsageError("checkpoint has no D2Conv3D layers to visualise")
    _, D, _, M = layers[-1].maps
    mask = expit(logits[0, 0]) > args.threshold
    written = viz.emit_maps(args.out, D[0], None if M is None else M[0], mask)
    print(f"wrote {len(written)} images to {args.out} (layer {layers[-1].name})")
    return EXIT_OK


# ---------------------------------------------------------------- training / inference


@dataclass
class InferConfig:
    checkpoint: str = ""
    input: str = ""
    frames: int = 16
    clip_len: int = 8
    overlap: int = 3
    threshold: float = 0.5
    seed: int = 0


def cmd_train_toy(args) -> int:
    from .train.trainer import TrainConfig, compare_variants, load_config, train_toy

    cfg = load_config(args.config) if args.config else TrainConfig()
    out = Path(args.out)
    if args.variants:
        rows = compare_variants(cfg, args.variants.split(","), out)
        for r in rows:
            print(f"{r['variant']:9s} steps={r['steps']} final_iou={r['final_iou']:.4f}")
        return EXIT_OK
    res = train_toy(cfg, out)
    print(f"{cfg.variant}: {len(res.steps)} steps, final IoU {res.final_iou:.4f}; outputs in {out}")
    return EXIT_OK


def cmd_infer(args) -> int:
    from .train.data import SyntheticClipSpec, random_spec, synth_generate
    from .train.inference import mean_frame_iou
    from .train.net import ToyNet
    from .train.trainer import infer_video, load_config

    cfg = load_config(args.config, InferConfig, required=("checkpoint",))
    overlap = cfg.overlap if args.overlap is None else args.overlap
    if not Path(cfg.checkpoint, "manifest.json").exists():
        raise UsageError(f"missing checkpoint: {cfg.checkpoint}")
    net = ToyNet.load(cfg.checkpoint)
    gt = None
    if cfg.input:
        video = npy_read(cfg.input)
    else:
        rng = np.random.default_rng(cfg.seed)
        spec = random_spec(rng, SyntheticClipSpec(frames=cfg.frames), max_speed=1.0)
        video, gt = synth_generate(spec)
    try:
        probs, mask, starts = infer_video(net, video, cfg.clip_len, overlap, cfg.threshold)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    npy_write(probs, out / "probs.npy")
    npy_write(mask, out / "mask.npy")
    (out / "starts.json").write_text(json.dumps(starts) + "\n")
    print(f"clip starts: {starts}")
    if gt is not None:
        print(f"mean frame IoU vs synthetic ground truth: {mean_frame_iou(mask, gt):.4f}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="d2conv3d", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--backend", dest="global_backend", choices=_backend.BACKENDS,
                   help="kernel backend (default from D2CONV_BACKEND)")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gradcheck", help="finite-difference gradient check of one operator")
    g.add_argument("--op", required=True, choices=gradcheck.OPS)
    g.add_argument("--shape", type=_shape, default=None, help="input shape N,C,T,H,W")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--width", type=int, choices=(32, 64), default=64)
    g.add_argument("--instances", type=int, default=1)
    g.add_argument("--corrupt-gradient", action="store_true", help=argparse.SUPPRESS)
    g.set_defaults(func=cmd_gradcheck)

    b = sub.add_parser("bench", help="time operator forward passes")
    b.add_argument("--ops", default=",".join(bench.BENCH_OPS))
    b.add_argument("--shape", type=_shape, action="append", help="N,C,T,H,W; repeatable")
    b.add_argument("--reps", type=int, default=5)
    b.add_argument("--width", type=int, choices=(32, 64), default=32)
    b.add_argument("--backend", default=_backend.active_backend(), help="numba, numpy, or both")
    b.add_argument("--out", help="CSV output path")
    b.set_defaults(func=cmd_bench)

    o = sub.add_parser("oob-stats", help="out-of-bounds sampling statistics")
    o.add_argument("--variant", required=True, choices=("conv3d", "dcn1", "dcn2", "d2conv3d"))
    src = o.add_mutually_exclusive_group()
    src.add_argument("--checkpoint")
    src.add_argument("--synthetic-dilations", type=_triple, metavar="DT,DY,DX")
    src.add_argument("--synthetic-offsets", type=float, metavar="STD")
    o.add_argument("--shape", type=_shape)
    o.add_argument("--clips", type=int, default=4, help="synthetic clips fed through a checkpoint")
    o.add_argument("--region", choices=("all", "interior"), default="all")
    o.add_argument("--seed", type=int, default=0)
    o.add_argument("--out")
    o.set_defaults(func=cmd_oob_stats)

    v = sub.add_parser("viz", help="write PGM images of dilation/modulation/mask maps")
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--input", required=True, help="NPY clip (T,H,W), (C,T,H,W) or (N,C,T,H,W)")
    v.add_argument("--out", required=True)
    v.add_argument("--threshold", type=float, default=0.5)
    v.set_defaults(func=cmd_viz)

    t = sub.add_parser("train-toy", help="train the toy segmentation network")
    t.add_argument("--config", help="JSON config (defaults used when omitted)")
    t.add_argument("--out", required=True)
    t.add_argument("--variants", help="comma list: train each and write comparison.csv")
    t.set_defaults(func=cmd_train_toy)

    i = sub.add_parser("infer", help="sliding-clip inference with a trained checkpoint")
    i.add_argument("--config", required=True)
    i.add_argument("--overlap", type=int)
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_infer)
    return p


def main(argv=None) -> int:
    from .train.trainer import ConfigError

    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.global_backend:
            _backend.set_backend(args.global_backend)
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
