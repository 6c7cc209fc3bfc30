import csv
import json

import numpy as np
import pytest

from d2conv3d.train import trainer
from d2conv3d.train.net import ToyNet
from d2conv3d.train.trainer import (
    ConfigError,
    TrainConfig,
    TrainingDiverged,
    compare_variants,
    config_from_dict,
    infer_video,
    load_config,
    train_toy,
)

SMALL = dict(n_train=6, n_val=2, epochs=2, max_steps=4, frames=4, height=16, width=16,
             object_size=4, widths=[2, 2, 4], gn_groups=2, batch_size=2)


def small(**kw):
    return TrainConfig(**{**SMALL, **kw})


def test_zero_steps_checkpoint_equals_init(tmp_path):
    cfg = small(max_steps=0)
    train_toy(cfg, tmp_path)
    init = ToyNet(cfg.net_config())
    back = ToyNet.load(tmp_path / "checkpoint")
    for k, v in init.params().items():
        assert np.array_equal(back.params()[k], v)
    rows = list(csv.DictReader(open(tmp_path / "train_log.csv")))
    assert rows == []


def test_runs_are_deterministic(tmp_path):
    cfg = small(variant="d2conv3d")
    train_toy(cfg, tmp_path / "a")
    train_toy(cfg, tmp_path / "b")
    for name in ("train_log.csv", "epoch_log.csv"):
        assert (tmp_path / "a" / name).read_text() == (tmp_path / "b" / name).read_text()


def test_logs_and_schedule(tmp_path):
    cfg = small(lr=1e-2, lr_decay=0.1, lr_decay_epoch=1, max_steps=10)
    res = train_toy(cfg, tmp_path)
    assert [s["step"] for s in res.steps] == list(range(6))
    assert {s["lr"] for s in res.steps if s["epoch"] == 0} == {1e-2}
    assert all(s["lr"] == pytest.approx(1e-3) for s in res.steps if s["epoch"] == 1)
    rows = list(csv.DictReader(open(tmp_path / "train_log.csv")))
    assert list(rows[0]) == ["step", "epoch", "loss", "lr", "grad_norm"]
    epochs = list(csv.DictReader(open(tmp_path / "epoch_log.csv")))
    assert len(epochs) == 2 and 0.0 <= float(epochs[-1]["mean_iou"]) <= 1.0
    meta = json.loads((tmp_path / "checkpoint" / "manifest.json").read_text())
    assert meta["meta"]["train"]["lr"] == 1e-2


def test_divergence_is_reported(monkeypatch):
    monkeypatch.setattr(trainer, "loss_and_grad", lambda name, z, y: (float("nan"), np.zeros_like(z)))
    with pytest.raises(TrainingDiverged, match="step 0"):
        train_toy(small())


def test_compare_variants_writes_csv(tmp_path):
    rows = compare_variants(small(max_steps=1, epochs=1), ["conv3d", "dcn2"], tmp_path)
    assert [r["variant"] for r in rows] == ["conv3d", "dcn2"]
    lines = (tmp_path / "comparison.csv").read_text().splitlines()
    assert lines[0] == "variant,steps,final_loss,final_iou,seconds" and len(lines) == 3


def test_config_validation(tmp_path):
    assert config_from_dict({}) == TrainConfig()
    assert config_from_dict({"lr": 1}).lr == 1.0
    with pytest.raises(ConfigError, match="bogus"):
        config_from_dict({"bogus": 1})
    with pytest.raises(ConfigError, match="'epochs'"):
        config_from_dict({"epochs": "3"})
    with pytest.raises(ConfigError, match="'variant'"):
        config_from_dict({"variant": "dcn9"})
    with pytest.raises(ConfigError, match="'lr'"):
        config_from_dict({"lr": -1.0})
    with pytest.raises(ConfigError, match="'widths'"):
        config_from_dict({"widths": [8, 8, 12], "gn_groups": 8})
    with pytest.raises(ConfigError, match="'decoder_blocks'"):
        config_from_dict({"decoder_blocks": 3})
    with pytest.raises(ConfigError, match="checkpoint"):
        config_from_dict({}, required=("checkpoint",))
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.json")


def test_shipped_config_matches_defaults():
    from pathlib import Path
    path = Path(__file__).resolve().parents[1] / "configs" / "toy_default.json"
    assert load_config(path) == TrainConfig()


def test_infer_video_single_clip_is_identity(rng):
    net = ToyNet(small().net_config())
    video = rng.normal(size=(1, 1, 8, 16, 16))
    probs, mask, starts = infer_video(net, video, clip_len=8, overlap=3)
    assert starts == [0]
    np.testing.assert_array_equal(probs, trainer.predict_probs(net, video))
    assert set(np.unique(mask)) <= {0.0, 1.0}
