"""Config parsing, checkpointing, and training-loop determinism."""

import json

import numpy as np
import pytest
import torch

from keygrid.training import (
    CheckpointError,
    ConfigError,
    TrainConfig,
    build_model,
    checkpoint_loss_history,
    load_checkpoint,
    parse_config,
    resolve_dataset,
    restore_model,
    save_checkpoint,
    train,
)

TINY_MODEL_LINES = """
model.num_points = 96
model.num_keypoints = 4
model.level_sizes = 96,32,16,8
model.level_widths = 8,12,16,24
model.group_size = 8
model.grid_m = 6
loss.num_far_points = 6
loss.warmup_epochs = 1
"""


def tiny_config(tmp_path, **top):
    text = TINY_MODEL_LINES + "\n".join(f"{k} = {v}" for k, v in top.items())
    cfg = parse_config(text)
    cfg.dataset = top.get("dataset", "synth:folded_sheet?frames=4&points=96&seed=1")
    cfg.output_dir = str(tmp_path / top.get("output_dir", "run"))
    return cfg


# --- config parsing --------------------------------------------------------------

def test_parse_config_basics():
    cfg = parse_config("epochs = 3\nbatch_size = 2\nmodel.num_keypoints = 8\n"
                       "loss.alpha_sim = 0.5\n# a comment\n")
    assert cfg.epochs == 3
    assert cfg.model.num_keypoints == 8
    assert cfg.loss.alpha_sim == 0.5


def test_parse_config_unknown_key():
    with pytest.raises(ConfigError, match="foo"):
        parse_config("foo = 1\n")


def test_parse_config_bad_value():
    with pytest.raises(ConfigError, match="epochs"):
        parse_config("epochs = soon\n")


def test_parse_config_tuple_field():
    cfg = parse_config("model.num_points = 64\nmodel.num_keypoints = 4\n"
                       "model.level_sizes = 64,16,8\nmodel.level_widths = 8,16,24\n")
    assert cfg.model.level_sizes == (64, 16, 8)


def test_config_validation():
    with pytest.raises(ConfigError):
        parse_config("epochs = 0\n")
    with pytest.raises(ConfigError):
        parse_config("learning_rate = -1\n")


def test_resolve_synth_dataset():
    clouds = resolve_dataset("synth:folded_sheet?frames=3&points=50&seed=2")
    assert len(clouds) == 3
    for c in clouds:
        assert len(c) == 50
        assert c.points.abs().max() <= 0.5 + 1e-9


def test_resolve_missing_dataset():
    from keygrid.data import DataError

    with pytest.raises(DataError):
        resolve_dataset("/no/such/dir")


# --- checkpoints -------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    cfg = tiny_config(tmp_path)
    model = build_model(cfg)
    path = save_checkpoint(model, cfg, epoch=5, path=tmp_path / "ck.bin")
    arrays, cfg2, epoch = load_checkpoint(path)
    assert epoch == 5
    assert cfg2.model.num_keypoints == cfg.model.num_keypoints
    for name, tensor in model.state_dict().items():
        assert np.array_equal(arrays[f"model.{name}"], tensor.numpy())


def test_checkpoint_bad_magic(tmp_path):
    p = tmp_path / "bad.bin"
    p.write_bytes(b"NOTMAGIC" + b"\x00" * 64)
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(p)


def test_checkpoint_truncated(tmp_path):
    cfg = tiny_config(tmp_path)
    model = build_model(cfg)
    path = save_checkpoint(model, cfg, epoch=0, path=tmp_path / "ck.bin")
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_restore_model_matches_saved(tmp_path):
    cfg = tiny_config(tmp_path)
    model = build_model(cfg)
    path = save_checkpoint(model, cfg, epoch=1, path=tmp_path / "ck.bin")
    restored, _, _ = restore_model(path)
    for a, b in zip(model.state_dict().values(), restored.state_dict().values()):
        assert torch.equal(a, b)


# --- the loop -----------------------------------------------------------------------

def test_train_bookkeeping(tmp_path):
    cfg = tiny_config(tmp_path, epochs=2, batch_size=2, seed=3)
    ckpt = train(cfg)
    assert ckpt.exists()
    lines = (tmp_path / "run" / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 2
    for line in lines:
        entry = json.loads(line)
        assert set(entry) == {"epoch", "l_sim", "l_far", "l_total"}


def test_train_warmup_schedule_in_log(tmp_path):
    cfg = tiny_config(tmp_path, epochs=2, batch_size=4, seed=3)
    cfg.loss.warmup_epochs = 1
    train(cfg)
    entries = [json.loads(l) for l in
               (tmp_path / "run" / "metrics.jsonl").read_text().splitlines()]
    e0, e1 = entries
    # epoch 0: l_sim recorded but excluded from the total
    assert e0["l_sim"] > 0
    assert e0["l_total"] == pytest.approx(cfg.loss.alpha_far * e0["l_far"], rel=1e-6)
    assert e1["l_total"] == pytest.approx(
        cfg.loss.alpha_far * e1["l_far"] + cfg.loss.alpha_sim * e1["l_sim"], rel=1e-6)


def test_train_deterministic(tmp_path):
    cfg_a = tiny_config(tmp_path, epochs=2, seed=9, output_dir="a")
    cfg_b = tiny_config(tmp_path, epochs=2, seed=9, output_dir="b")
    train(cfg_a)
    train(cfg_b)
    la = (tmp_path / "a" / "metrics.jsonl").read_text()
    lb = (tmp_path / "b" / "metrics.jsonl").read_text()
    assert la == lb


def test_resume_equivalence(tmp_path):
    # uninterrupted 2-epoch run
    cfg_full = tiny_config(tmp_path, epochs=2, seed=4, output_dir="full")
    ckpt_full = train(cfg_full)

    # 1 epoch, then resume for 1 more
    cfg_half = tiny_config(tmp_path, epochs=1, seed=4, output_dir="half")
    ckpt_half = train(cfg_half)
    cfg_half.epochs = 2
    ckpt_resumed = train(cfg_half, resume_from=ckpt_half)

    a, _, _ = load_checkpoint(ckpt_full)
    b, _, _ = load_checkpoint(ckpt_resumed)
    assert set(a) == set(b)
    for name in a:
        assert np.array_equal(a[name], b[name]), name
    assert checkpoint_loss_history(ckpt_full) == checkpoint_loss_history(ckpt_resumed)


def test_train_rejects_wrong_point_count(tmp_path):
    cfg = tiny_config(tmp_path, epochs=1)
    cfg.dataset = "synth:folded_sheet?frames=3&points=40&seed=1"
    with pytest.raises(ConfigError, match="num_points"):
        train(cfg)


def test_parameters_stay_finite(tmp_path):
    cfg = tiny_config(tmp_path, epochs=3, seed=6)
    train(cfg)
    model, _, _ = restore_model(tmp_path / "run" / "checkpoint.bin")
    for p in model.parameters():
        assert torch.isfinite(p).all()
