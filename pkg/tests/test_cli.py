import csv
import io
import json

import numpy as np
import pytest

from d2conv3d.cli import main
from d2conv3d.tensor import npy_read, npy_write
from d2conv3d.train.trainer import TrainConfig, train_toy

SMALL = dict(n_train=4, n_val=2, epochs=1, max_steps=2, frames=4, height=16, width=16,
             object_size=4, widths=[2, 2, 4], gn_groups=2)


@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    train_toy(TrainConfig(**SMALL), out)
    return out / "checkpoint"


def _rows(text):
    return {r["layer"]: r for r in csv.DictReader(io.StringIO(text))}


def test_gradcheck_pass_fail_usage(capsys):
    assert main(["gradcheck", "--op", "d2conv3d"]) == 0
    out = capsys.readouterr().out
    assert "dilation" in out and "modulation" in out and "PASS" in out
    assert main(["gradcheck", "--op", "conv3d", "--corrupt-gradient"]) == 1
    with pytest.raises(SystemExit) as e:
        main(["gradcheck", "--op", "nope"])
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        main(["gradcheck", "--op", "conv3d", "--shape", "1,2,3"])
    assert e.value.code == 2


def test_gradcheck_width_32(capsys):
    assert main(["gradcheck", "--op", "groupnorm", "--width", "32", "--seed", "3"]) == 0
    assert "tol=1e-04" in capsys.readouterr().out


def test_bench_csv_and_reps(tmp_path, capsys):
    out = tmp_path / "b.csv"
    assert main(["bench", "--shape", "1,2,3,6,6", "--reps", "3", "--backend", "numpy", "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out)))
    assert [r["op"] for r in rows] == ["conv3d", "dilated", "dcn1", "dcn2", "d2conv3d"]
    assert main(["bench", "--reps", "1"]) == 2
    assert main(["bench", "--ops", "fft", "--reps", "3"]) == 2


def test_oob_conv3d_interior_zero(capsys):
    assert main(["oob-stats", "--variant", "conv3d", "--shape", "1,1,8,16,16", "--region", "interior"]) == 0
    assert float(_rows(capsys.readouterr().out)["conv3d"]["percent"]) == 0.0


def test_oob_unit_dilation_equals_conv3d(capsys):
    main(["oob-stats", "--variant", "conv3d", "--shape", "2,1,8,16,16"])
    a = _rows(capsys.readouterr().out)["conv3d"]
    main(["oob-stats", "--variant", "d2conv3d", "--synthetic-dilations", "1,1,1", "--shape", "2,1,8,16,16"])
    b = _rows(capsys.readouterr().out)["d2conv3d"]
    assert (a["total"], a["oob"]) == (b["total"], b["oob"])


def test_oob_large_temporal_dilation_hand_count(tmp_path):
    # t +- 10 leaves an 8-frame clip for all 18 off-centre-in-time points; the 9 points with
    # p_t = 0 fall outside only at the 16x16 border: 9*256 - 46*46 = 188 per frame
    out = tmp_path / "o.csv"
    assert main(["oob-stats", "--variant", "d2conv3d", "--synthetic-dilations", "10,1,1",
                 "--shape", "1,1,8,16,16", "--out", str(out)]) == 0
    r = _rows(out.read_text())
    assert int(r["d2conv3d"]["total"]) == 27 * 8 * 256
    assert int(r["d2conv3d"]["oob"]) == 18 * 8 * 256 + 188 * 8
    assert {"ALL_pooled", "ALL_layer_mean"} <= set(r)


def test_oob_argument_errors(checkpoint):
    assert main(["oob-stats", "--variant", "conv3d", "--synthetic-dilations", "1,1,1"]) == 2
    assert main(["oob-stats", "--variant", "d2conv3d", "--checkpoint", "/nonexistent"]) == 2
    assert main(["oob-stats", "--variant", "conv3d", "--checkpoint", str(checkpoint)]) == 2


def test_oob_from_checkpoint(checkpoint, capsys):
    assert main(["oob-stats", "--variant", "d2conv3d", "--checkpoint", str(checkpoint),
                 "--clips", "2", "--shape", "1,1,4,16,16"]) == 0
    rows = _rows(capsys.readouterr().out)
    assert "up1_block" in rows and "up2_block" in rows
    total = sum(int(r["total"]) for k, r in rows.items() if not k.startswith("ALL"))
    assert int(rows["ALL_pooled"]["total"]) == total


def test_viz(checkpoint, tmp_path, rng, capsys):
    npy_write(rng.normal(size=(4, 16, 16)), tmp_path / "clip.npy")
    assert main(["viz", "--checkpoint", str(checkpoint), "--input", str(tmp_path / "clip.npy"),
                 "--out", str(tmp_path / "v")]) == 0
    assert len(list((tmp_path / "v").glob("*.pgm"))) == 3 * 4
    assert main(["viz", "--checkpoint", str(tmp_path), "--input", str(tmp_path / "clip.npy"),
                 "--out", str(tmp_path / "v")]) == 2


def test_infer_overlaps(checkpoint, tmp_path, capsys):
    cfg = tmp_path / "inf.json"
    cfg.write_text(json.dumps({"checkpoint": str(checkpoint), "frames": 16, "clip_len": 8}))
    assert main(["infer", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
    assert json.loads((tmp_path / "a" / "starts.json").read_text()) == [0, 5, 8]
    assert main(["infer", "--config", str(cfg), "--overlap", "7", "--out", str(tmp_path / "b")]) == 0
    assert json.loads((tmp_path / "b" / "starts.json").read_text()) == list(range(9))
    assert npy_read(tmp_path / "b" / "probs.npy").shape == (1, 1, 16, 32, 32)


def test_infer_config_errors(tmp_path, capsys):
    cfg = tmp_path / "inf.json"
    cfg.write_text(json.dumps({"frames": 16}))
    assert main(["infer", "--config", str(cfg), "--out", str(tmp_path)]) == 2
    assert "checkpoint" in capsys.readouterr().err
    cfg.write_text(json.dumps({"checkpoint": "x", "clip_len": "eight"}))
    assert main(["infer", "--config", str(cfg), "--out", str(tmp_path)]) == 2
    assert "clip_len" in capsys.readouterr().err


def test_train_toy_cli(tmp_path, capsys):
    cfg = tmp_path / "t.json"
    cfg.write_text(json.dumps({**SMALL, "max_steps": 1}))
    assert main(["train-toy", "--config", str(cfg), "--out", str(tmp_path / "r"),
                 "--variants", "conv3d,d2conv3d"]) == 0
    assert (tmp_path / "r" / "comparison.csv").exists()
    assert (tmp_path / "r" / "d2conv3d" / "checkpoint" / "manifest.json").exists()
    cfg.write_text(json.dumps({"variant": "dcn9"}))
    assert main(["train-toy", "--config", str(cfg), "--out", str(tmp_path / "x")]) == 2
