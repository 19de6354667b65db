from __future__ import annotations

import json

import numpy as np
import pytest
import torch

from xmodal import trainer as TR
from xmodal.dataio import SampleSource, Split, make_synthetic_manifest
from xmodal.errors import CheckpointMismatchError, ConfigError, DataError, NaNLossError
from xmodal.model import build_model, load_checkpoint, load_model
from xmodal.teachers import MockTeacher
from xmodal.trainer import TrainConfig, lr_schedule, resume, train

SMALL = TrainConfig(epochs=3, batch_size=4, lr0=1e-3, seed=0)


def _entries():
    return make_synthetic_manifest(24, T=6)


def _metrics(run_dir):
    return [json.loads(l) for l in (run_dir / TR.METRICS_FILE).read_text().splitlines()]


def test_lr_schedule_exact_values():
    cfg = TrainConfig()
    assert [lr_schedule(e, cfg) for e in range(3)] == [1e-4, 9.5e-05, 9.025e-05]
    assert lr_schedule(10, cfg) == pytest.approx(1e-4 * 0.95**10, rel=1e-15)
    with pytest.raises(ValueError):
        lr_schedule(-1, cfg)


@pytest.mark.parametrize("bad", [dict(lr0=0), dict(lr_decay_per_epoch=1.0), dict(batch_size=0),
                                 dict(contra_mode="x"), dict(optimizer="lbfgs"), dict(loss_weights=(1, 1))])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        TrainConfig(**bad)


def test_config_dict_round_trip():
    cfg = TrainConfig(lr0=3e-4, loss_weights=(1.0, 0.5, 2.0), heads=2)
    assert TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_same_seed_runs_give_identical_metrics(tmp_path):
    a = train(_entries(), SampleSource(), MockTeacher(), SMALL, tmp_path / "a")
    b = train(_entries(), SampleSource(), MockTeacher(), SMALL, tmp_path / "b")
    assert (tmp_path / "a" / TR.METRICS_FILE).read_bytes() == (tmp_path / "b" / TR.METRICS_FILE).read_bytes()
    assert a.epoch == 2 and a.step == 3 * 4  # 14 train clips at batch 4 -> 4 steps per epoch
    rec = _metrics(tmp_path / "a")
    assert [r["lr"] for r in rec] == [lr_schedule(e, SMALL) for e in range(3)]
    for r in rec:
        assert r["total"] == pytest.approx(r["cls"] + r["dist"] + r["contra"], rel=1e-12)


def test_threaded_preparation_matches_serial(tmp_path):
    train(_entries(), SampleSource(), MockTeacher(), SMALL, tmp_path / "a")
    cfg = TrainConfig(**{**SMALL.to_dict(), "loss_weights": SMALL.loss_weights, "workers": 3})
    train(_entries(), SampleSource(), MockTeacher(), cfg, tmp_path / "b")
    assert (tmp_path / "a" / TR.METRICS_FILE).read_bytes() == (tmp_path / "b" / TR.METRICS_FILE).read_bytes()


def test_resume_matches_uninterrupted_run(tmp_path):
    full = train(_entries(), SampleSource(), MockTeacher(), SMALL, tmp_path / "full")
    part = train(_entries(), SampleSource(), MockTeacher(), SMALL, tmp_path / "part", stop_after_epoch=0)
    assert part.epoch == 0
    done = resume(part.checkpoint, _entries(), SampleSource(), MockTeacher())
    assert done.epoch == full.epoch and done.step == full.step
    a, b = _metrics(tmp_path / "full"), _metrics(tmp_path / "part")
    assert len(a) == len(b) == 3
    for ra, rb in zip(a, b):
        for k in ra:
            if ra[k] is None:
                assert rb[k] is None
            else:
                assert abs(ra[k] - rb[k]) <= 1e-6
    ta, _ = load_checkpoint(full.checkpoint)
    tb, _ = load_checkpoint(done.checkpoint)
    for k in ta:
        if k.startswith("model."):
            assert torch.allclose(ta[k].double(), tb[k].double(), atol=1e-6)


def test_resume_drops_metrics_past_the_checkpoint(tmp_path):
    part = train(_entries(), SampleSource(), MockTeacher(), SMALL, tmp_path, stop_after_epoch=0)
    # a crashed epoch 1 left a record behind without a checkpoint
    with (tmp_path / TR.METRICS_FILE).open("a") as fh:
        fh.write(json.dumps({"epoch": 1, "step": 99}) + "\n")
    resume(part.checkpoint, _entries(), SampleSource(), MockTeacher(), stop_after_epoch=1)
    assert [r["epoch"] for r in _metrics(tmp_path)] == [0, 1]
    assert _metrics(tmp_path)[1]["step"] == 8


def test_resume_rejects_preset_mismatch(tmp_path):
    part = train(_entries(), SampleSource(), MockTeacher(), SMALL, tmp_path, stop_after_epoch=0)
    cfg = TrainConfig(**{**SMALL.to_dict(), "loss_weights": SMALL.loss_weights, "preset": "paper"})
    with pytest.raises(CheckpointMismatchError):
        resume(part.checkpoint, _entries(), SampleSource(), MockTeacher(), cfg)
    with pytest.raises(CheckpointMismatchError):
        resume(part.best_checkpoint, _entries(), SampleSource(), MockTeacher())


def test_checkpoints_written(tmp_path):
    state = train(_entries(), SampleSource(), MockTeacher(), SMALL, tmp_path)
    tensors, meta = load_checkpoint(state.checkpoint)
    assert meta["epoch"] == 2 and meta["train_config"] == SMALL.to_dict()
    assert any(k.startswith("optim.") for k in tensors)
    assert "rng.torch" in tensors
    model = load_model(state.best_checkpoint, expect_preset="tiny")
    assert not model.training


def test_empty_training_split(tmp_path):
    entries = [e for e in _entries() if e.split is not Split.TRAIN]
    with pytest.raises(DataError, match="empty"):
        train(entries, SampleSource(), MockTeacher(), SMALL, tmp_path)


def test_nan_loss_aborts_with_batch_ids(tmp_path, monkeypatch):
    real = TR.batch_losses

    def poisoned(model, samples, conts, cfg):
        cls, dist, contra = real(model, samples, conts, cfg)
        return cls * float("nan"), dist, contra

    monkeypatch.setattr(TR, "batch_losses", poisoned)
    with pytest.raises(NaNLossError) as exc:
        train(_entries(), SampleSource(), MockTeacher(), SMALL, tmp_path)
    assert exc.value.epoch == 0 and exc.value.step == 0
    assert len(exc.value.batch_ids) == 4
    dump = json.loads((tmp_path / "nan_dump.json").read_text())
    assert dump["batch"] == exc.value.batch_ids


def test_val_auc_none_for_single_class_val(tmp_path):
    entries = [e for e in _entries() if not (e.split is Split.VAL and e.label == 0)]
    state = train(entries, SampleSource(), MockTeacher(), TrainConfig(epochs=1, batch_size=4), tmp_path)
    assert state.metrics[0]["val_auc"] is None
    assert not state.best_checkpoint.exists()


def test_batch_losses_shapes():
    samples = SampleSource().load_all(_entries()[:3])
    conts = [np.full(s.T, 0.5, np.float32) for s in samples]
    model = build_model(SMALL.model_config)
    cls, dist, contra = TR.batch_losses(model, samples, conts, SMALL)
    assert cls.shape == dist.shape == contra.shape == (3,)
