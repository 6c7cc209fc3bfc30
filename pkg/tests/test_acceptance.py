"""Acceptance suite: one test per criterion, each recording a pass/fail line.

The lines are printed in the "acceptance criteria" section at the end of the
pytest run. Run alone with ``pytest tests/test_acceptance.py``.
"""

import csv
import itertools
import time

import numpy as np
import pytest

from d2conv3d import _backend, bench, gradcheck
from d2conv3d.blocks import (
    D2Block,
    DeformBlock,
    d2block_forward,
    d2block_maps,
    deform_block_maps,
    dilation_activation,
    dropin_init,
    load_block,
    save_block,
)
from d2conv3d.conv_ops import (
    ConvConfig,
    conv3d_forward,
    d2conv3d_forward,
    dcn1_3d_forward,
    dcn2_3d_forward,
    kernel_grid,
    oob_stats_for,
    reference_direct_conv,
)
from d2conv3d.sampler import is_oob
from d2conv3d.train.inference import split_into_clips, stitch_overlapping
from d2conv3d.train.trainer import TrainConfig, compare_variants, load_config

from conftest import random_weights
from test_conv_ops import random_case

BACKENDS = [b for b in _backend.BACKENDS if b != "numba" or _backend.HAS_NUMBA]


def test_criterion_01_reductions(acceptance):
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst, n = 0.0, 0
    for _ in range(60):
        x, w, cfg, out = random_case(rng, max_dim=6)
        N, K = x.shape[0], cfg.num_points
        base = conv3d_forward(x, w, cfg)
        ones = np.ones((N, K, *out))
        for backend in BACKENDS:
            with _backend.use_backend(backend):
                for y in (d2conv3d_forward(x, w, np.ones((N, 3, *out)), ones, cfg),
                          dcn1_3d_forward(x, w, np.zeros((N, 3 * K, *out)), cfg),
                          dcn2_3d_forward(x, w, np.zeros((N, 3 * K, *out)), ones, cfg)):
                    worst = max(worst, float(np.max(np.abs(y - base))))
        n += 1
    dt = time.perf_counter() - t0
    ok = worst <= 1e-12 and dt <= 60
    acceptance(1, "reductions", ok, f"{n} configs x {len(BACKENDS)} backends, max abs err {worst:.1e}, {dt:.1f}s")
    assert ok


def test_criterion_02_oracle(acceptance):
    rng = np.random.default_rng(202)
    t0 = time.perf_counter()
    worst, n, dilated = 0.0, 0, 0
    for _ in range(110):
        x, w, cfg, out = random_case(rng, max_dim=6)
        N, K = x.shape[0], cfg.num_points
        dilated += cfg.fixed_dilation != (1, 1, 1)
        dil = rng.uniform(-1.0, 2.5, size=(N, 3, *out))
        mod = rng.uniform(0.0, 1.0, size=(N, K, *out))
        off = rng.normal(0.0, 1.5, size=(N, 3 * K, *out))
        refs = {
            "conv": reference_direct_conv(x, w, cfg),
            "d2": reference_direct_conv(x, w, cfg, dilation=dil, modulation=mod),
            "dcn1": reference_direct_conv(x, w, cfg, offsets=off),
            "dcn2": reference_direct_conv(x, w, cfg, offsets=off, modulation=mod),
        }
        worst = max(worst, float(np.max(np.abs(conv3d_forward(x, w, cfg) - refs["conv"]))))
        for backend in BACKENDS:
            with _backend.use_backend(backend):
                got = {"d2": d2conv3d_forward(x, w, dil, mod, cfg), "dcn1": dcn1_3d_forward(x, w, off, cfg),
                       "dcn2": dcn2_3d_forward(x, w, off, mod, cfg)}
            for k, v in got.items():
                worst = max(worst, float(np.max(np.abs(v - refs[k]))))
        n += 1
    dt = time.perf_counter() - t0
    ok = worst <= 1e-12 and dt <= 120
    acceptance(2, "oracle equivalence", ok,
               f"{n} instances ({dilated} with fixed dilation), 4 operators, max abs err {worst:.1e}, {dt:.1f}s")
    assert ok


def test_criterion_03_gradients(acceptance):
    rng = np.random.default_rng(303)
    t0 = time.perf_counter()
    worst, failures, count = {}, [], 0
    for op in gradcheck.OPS:
        for _ in range(20):
            r = gradcheck.run_check(op, rng, None, 64)
            worst[op] = max(worst.get(op, 0.0), r.worst)
            count += 1
            if not r.passed:
                failures.append((op, r.lines()))
    dt = time.perf_counter() - t0
    ok = not failures and max(worst.values()) <= 1e-5 and dt <= 300
    top = max(worst, key=worst.get)
    acceptance(3, "gradient suite", ok,
               f"{count} checks over {len(worst)} ops, worst rel err {worst[top]:.1e} ({top}), {dt:.1f}s")
    assert ok, failures[:3]


def test_criterion_04_dropin_identity(acceptance):
    rng = np.random.default_rng(404)
    worst, n = {}, 0
    for mode in ("compensated", "disabled"):
        worst[mode] = 0.0
        for i in range(20):
            C, O = int(rng.integers(1, 4)), int(rng.integers(1, 4))
            blk = gradcheck.random_block(rng, C, O, modulation=mode)
            pre = random_weights(rng, O, C)
            b = dropin_init(blk, pre)
            x = rng.normal(size=(int(rng.integers(1, 3)), C, *rng.integers(2, 7, size=3)))
            err = float(np.max(np.abs(d2block_forward(x, b) - conv3d_forward(x, pre, b.cfg))))
            worst[mode] = max(worst[mode], err)
            n += 1
    ok = all(v == 0.0 for v in worst.values())
    acceptance(4, "drop-in identity", ok,
               f"{n} inputs, max abs err {worst['compensated']:.1e} (compensated) / {worst['disabled']:.1e} (disabled)")
    assert ok


def test_criterion_05_activation_ranges(acceptance):
    rng = np.random.default_rng(505)
    raw = np.concatenate([
        rng.normal(0.0, 1.0, 400_000), rng.normal(0.0, 1e3, 300_000),
        rng.uniform(-1e9, 1e9, 299_990),
        [-1e9, 1e9, -1e9 + 1, 1e9 - 1, 0.0, -0.0, -745.2, -800.0, 709.0, -1e-300],
    ])
    assert raw.size == 1_000_000
    e = dilation_activation(raw, "one_plus_elu")
    r1 = dilation_activation(raw, "one_plus_relu")
    r0 = dilation_activation(raw, "relu")
    ok = bool(np.all(e > 0) and np.all(r1 >= 1) and np.all(r0 >= 0) and np.all(np.isfinite(e)))
    acceptance(5, "activation ranges", ok,
               f"{raw.size} values, min one_plus_elu {e.min():.3g}, min one_plus_relu {r1.min():g}, min relu {r0.min():g}")
    assert ok


def test_criterion_06_channel_counts(acceptance):
    rng = np.random.default_rng(606)
    x = rng.normal(size=(1, 4, 3, 5, 5))
    d2 = D2Block.create(4, 6, rng=rng)
    _, D, _, M = d2block_maps(x, d2)
    dcn = DeformBlock.create(4, 6, rng=rng, variant="dcn2")
    off, _, Mo = deform_block_maps(x, dcn)
    got = (D.shape[1], M.shape[1], off.shape[1], Mo.shape[1], d2.f_d.c_out, d2.f_m.c_out, dcn.f_o.c_out)
    ok = got == (3, 27, 81, 27, 3, 27, 81)
    acceptance(6, "channel counts", ok, f"dilation {got[0]}, modulation {got[1]}, offsets {got[2]} (3x3x3 kernel)")
    assert ok


def _brute_oob(ext, dil):
    grid = kernel_grid((3, 3, 3))
    total = oob = 0
    for o in itertools.product(*(range(e) for e in ext)):
        for pn in grid:
            total += 1
            oob += is_oob([o[a] + pn[a] * dil[a] for a in range(3)], ext)
    return total, oob


def test_criterion_07_oob(acceptance, tmp_path):
    cfg = ConvConfig.same()
    t0 = time.perf_counter()
    mismatches, cases = [], 0
    for ext in itertools.product(range(1, 9), repeat=3):
        for d in (0.0, 0.5, 1.0, 2.0, 10.0):
            s = oob_stats_for("d2conv3d", (1, 1, *ext), cfg, dilation=np.full((1, 3, *ext), d))
            if (s.total_samples, s.oob_samples) != _brute_oob(ext, (d, d, d)):
                mismatches.append((ext, d))
            cases += 1
        if oob_stats_for("conv3d", (1, 1, *ext), cfg).oob_samples != _brute_oob(ext, (1, 1, 1))[1]:
            mismatches.append((ext, "conv3d"))
    for dil in itertools.product((0.0, 0.5, 1.0, 2.0, 10.0), repeat=3):
        ext = (8, 8, 8)
        s = oob_stats_for("d2conv3d", (1, 1, *ext), cfg, dilation=np.broadcast_to(
            np.array(dil).reshape(1, 3, 1, 1, 1), (1, 3, *ext)).copy())
        if (s.total_samples, s.oob_samples) != _brute_oob(ext, dil):
            mismatches.append((ext, dil))
        cases += 1
    sweep_s = time.perf_counter() - t0

    # directional check on a fixed, seeded block saved and reloaded as a checkpoint
    rng = np.random.default_rng(707)
    save_block(gradcheck.random_block(rng, 4, 4, scale=0.3), tmp_path / "blk")
    blk = load_block(tmp_path / "blk")
    x = rng.normal(size=(1, 4, 8, 16, 16))
    _, D, _, _ = d2block_maps(x, blk)
    d2 = oob_stats_for("d2conv3d", x.shape, blk.cfg, dilation=D).percent
    dcn = {}
    for std in (2.0, 3.0):
        off = rng.normal(0.0, std, size=(1, 81, 8, 16, 16))
        dcn[std] = oob_stats_for("dcn1", x.shape, blk.cfg, offsets=off).percent
    directional = all(d2 <= v for v in dcn.values())
    ok = not mismatches and directional
    acceptance(7, "OOB accounting", ok,
               f"{cases} sweep cases exact ({len(mismatches)} mismatches, {sweep_s:.1f}s); "
               f"D2Conv3D {d2:.2f}% <= DCNv1 {dcn[2.0]:.2f}% (std 2) / {dcn[3.0]:.2f}% (std 3)")
    assert ok, mismatches[:5]


@pytest.mark.slow
def test_criterion_08_toy_training(acceptance, tmp_path_factory):
    from pathlib import Path

    cfg = load_config(Path(__file__).resolve().parents[1] / "configs" / "toy_default.json")
    assert cfg == TrainConfig() and cfg.variant == "d2conv3d"
    out = tmp_path_factory.mktemp("toy")
    rows = {r["variant"]: r for r in compare_variants(cfg, ["d2conv3d", "conv3d"], out)}
    with open(out / "comparison.csv") as fh:
        csv_rows = list(csv.DictReader(fh))
    d2, std = rows["d2conv3d"], rows["conv3d"]
    ok = (d2["final_iou"] >= 0.80 and d2["steps"] <= 500 and d2["seconds"] <= 900
          and std["final_iou"] >= 0.75 and std["steps"] <= 500 and len(csv_rows) == 2)
    acceptance(8, "toy training", ok,
               f"D2Conv3D IoU {d2['final_iou']:.4f} in {d2['steps']} steps ({d2['seconds']:.0f}s); "
               f"Conv3D IoU {std['final_iou']:.4f} in {std['steps']} steps ({std['seconds']:.0f}s); "
               f"comparison CSV {out / 'comparison.csv'}")
    assert ok


def test_criterion_09_split_stitch(acceptance):
    cases = 0
    bad = []
    for L in range(1, 65):
        for c in range(1, min(L, 16) + 1):
            for o in range(c):
                starts = split_into_clips(L, c, o)
                cover = np.zeros(L, dtype=int)
                for s in starts:
                    cover[s : s + c] += 1
                probs = [np.full((1, 1, c, 1, 1), float(s)) for s in starts]
                stitched = stitch_overlapping(probs, starts, L)[0, 0, :, 0, 0]
                expect = [np.mean([s for s in starts if s <= t < s + c]) for t in range(L)]
                if cover.min() < 1 or not np.allclose(stitched, expect, atol=1e-12):
                    bad.append((L, c, o))
                cases += 1
    hand = {(8, 8, 3): [0], (16, 8, 3): [0, 5, 8], (13, 8, 7): [0, 1, 2, 3, 4, 5], (16, 8, 7): list(range(9))}
    hand_ok = all(split_into_clips(*k) == v for k, v in hand.items())
    ok = not bad and hand_ok
    acceptance(9, "clip split/stitch", ok, f"{cases} (len, clip, overlap) cases covered, {len(hand)} hand enumerations match")
    assert ok, bad[:5]


def test_criterion_10_bench(acceptance, tmp_path):
    shapes = [(1, 4, 4, 8, 8), (1, 4, 8, 16, 16), (1, 8, 8, 32, 32)]
    recs = bench.run_bench(list(bench.BENCH_OPS), shapes, width=32, reps=3)
    path = tmp_path / "bench.csv"
    bench.write_csv(recs, path)
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    combos = {(r["op"], r["shape"]) for r in rows}
    valid = all(r.reps >= 3 and r.p10_ms <= r.median_ms <= r.p90_ms and r.peak_bytes >= 0 for r in recs)
    complete = len(rows) == 15 and len(combos) == 15 and all(all(v != "" for v in r.values()) for r in rows)
    ok = valid and complete
    acceptance(10, "bench harness", ok, f"{len(rows)} rows (5 operators x 3 shapes, backend {recs[0].backend}), invariants hold")
    assert ok


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q"]))
