from __future__ import annotations

import logging

import pytest

from xmodal import cli
from xmodal import config as C
from xmodal.dataio import Split, load_manifest, write_manifest
from xmodal.errors import ConfigError


def _cfg(tmp_path, body):
    p = tmp_path / "run.cfg"
    p.write_text("[xmodal]\nconfig_version = 1\n" + body)
    return p


# config file --------------------------------------------------------------------


def test_defaults_and_types(tmp_path):
    cfg = C.load_config(_cfg(tmp_path, "lr0 = 3e-4\nepochs = 4\nloss_weights = 1,0.5,2\nheads = none\nrender = yes\n"))
    assert cfg["lr0"] == 3e-4 and cfg["epochs"] == 4
    assert cfg["loss_weights"] == [1.0, 0.5, 2.0]
    assert cfg["heads"] is None and cfg["render"] is True
    assert cfg["bins"] == 50


@pytest.mark.parametrize("body, msg", [
    ("bogus = 1\n", "unknown key"),
    ("epochs = many\n", "epochs"),
    ("render = maybe\n", "render"),
])
def test_bad_config_values(tmp_path, body, msg):
    with pytest.raises(ConfigError, match=msg):
        C.load_config(_cfg(tmp_path, body))


def test_version_and_section_checked(tmp_path):
    p = tmp_path / "v.cfg"
    p.write_text("[xmodal]\nconfig_version = 2\n")
    with pytest.raises(ConfigError, match="config_version"):
        C.load_config(p)
    p.write_text("[other]\nx = 1\n")
    with pytest.raises(ConfigError, match="section"):
        C.load_config(p)
    with pytest.raises(ConfigError, match="not found"):
        C.load_config(tmp_path / "missing.cfg")


def test_overrides_beat_file_and_are_logged(tmp_path, caplog):
    cfg = C.load_config(_cfg(tmp_path, "epochs = 4\n"))
    with caplog.at_level(logging.INFO, logger="xmodal.config"):
        cfg = C.apply_overrides(cfg, ["epochs=7", "preset = paper"])
    assert cfg["epochs"] == 7 and cfg["preset"] == "paper"
    assert "override epochs: 4 -> 7" in caplog.text
    with pytest.raises(ConfigError):
        C.apply_overrides(cfg, ["nokey=1"])
    with pytest.raises(ConfigError):
        C.apply_overrides(cfg, ["epochs"])


def test_snapshot_round_trip(tmp_path):
    cfg = C.apply_overrides(C.load_config(None), ["lr0=0.00123", "loss_weights=1,2,3", "embed_dim=24"])
    C.save_config(cfg, tmp_path / "snap.cfg")
    assert C.load_config(tmp_path / "snap.cfg") == cfg
    assert C.train_config(cfg).loss_weights == (1.0, 2.0, 3.0)


# commands -----------------------------------------------------------------------


def test_selftest_passes(capsys):
    assert cli.main(["selftest"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and out.count("PASS") >= 6


def test_missing_config_exits_1(tmp_path):
    assert cli.main(["train", "--config", str(tmp_path / "missing.cfg"), "--run-dir", str(tmp_path)]) == 1


def test_unknown_override_exits_1(tmp_path):
    assert cli.main(["train", "--set", "nope=1", "--run-dir", str(tmp_path)]) == 1


def test_missing_manifest_file_exits_2(tmp_path):
    assert cli.main(["train", "--set", f"manifest={tmp_path / 'none.tsv'}", "--run-dir", str(tmp_path)]) == 2


def test_bad_holdout_exits_1(tmp_path):
    args = ["train", "--set", "synthetic_size=8", "--set", "protocol=leave_one_out", "--set", "holdout=W2L",
            "--run-dir", str(tmp_path)]
    assert cli.main(args) == 1


@pytest.fixture(scope="module")
def trained_dir(tmp_path_factory):
    run = tmp_path_factory.mktemp("cli_run")
    args = ["train", "--set", "synthetic_size=24", "--set", "synthetic_frames=6", "--set", "epochs=2",
            "--set", "batch_size=4", "--set", "lr0=1e-3", "--run-dir", str(run)]
    assert cli.main(args) == 0
    return run


def test_train_writes_artifacts_and_snapshot(trained_dir):
    for name in ("manifest.tsv", "metrics.jsonl", "last.ckpt", "resolved_config.cfg"):
        assert (trained_dir / name).exists(), name
    snap = C.load_config(trained_dir / "resolved_config.cfg")
    assert snap["epochs"] == 2 and snap["synthetic_size"] == 24


def test_run_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.RUN_DIR_ENV, str(tmp_path / "envrun"))
    args = cli._parser().parse_args(["evaluate"])
    _, run_dir = cli.resolve(args)
    assert run_dir == tmp_path / "envrun"
    args = cli._parser().parse_args(["evaluate", "--run-dir", str(tmp_path / "flag"), "--seed", "5"])
    cfg, run_dir = cli.resolve(args)
    assert run_dir == tmp_path / "flag" and cfg["seed"] == 5


def test_evaluate_and_analyze(trained_dir, capsys):
    assert cli.main(["evaluate", "--run-dir", str(trained_dir)]) == 0
    assert "auc.W2L" in capsys.readouterr().out
    assert (trained_dir / "scores.jsonl").exists() and (trained_dir / "report_table.txt").exists()
    assert cli.main(["analyze", "--run-dir", str(trained_dir), "--set", "bins=10"]) == 0
    assert (trained_dir / "analysis" / "hist_REAL_real.txt").exists()
    assert (trained_dir / "analysis" / "hist_W2L_fake.txt").exists()


def test_evaluate_single_class_exits_2(trained_dir, tmp_path, capsys):
    entries = [e for e in load_manifest(trained_dir / "manifest.tsv") if not (e.split is Split.TEST and e.label == 0)]
    write_manifest(entries, tmp_path / "reals.tsv")
    code = cli.main(["evaluate", "--run-dir", str(trained_dir), "--set", f"manifest={tmp_path / 'reals.tsv'}"])
    assert code == 2


def test_preprocess_then_cached_teacher(trained_dir, tmp_path):
    cache = tmp_path / "cache"
    common = ["--run-dir", str(trained_dir), "--set", f"cache_dir={cache}"]
    assert cli.main(["preprocess", *common]) == 0
    n = len(load_manifest(trained_dir / "manifest.tsv"))
    assert len(list(cache.glob("*.xmtl"))) == n and len(list(cache.glob("*.xmm"))) == n
    out = tmp_path / "run2"
    args = ["train", "--set", f"manifest={trained_dir / 'manifest.tsv'}", "--set", f"cache_dir={cache}",
            "--set", "teacher=cache", "--set", "epochs=1", "--set", "batch_size=4", "--run-dir", str(out)]
    assert cli.main(args) == 0


def test_resume_through_cli(trained_dir, tmp_path):
    args = ["train", "--set", f"manifest={trained_dir / 'manifest.tsv'}", "--set", "epochs=3",
            "--set", "batch_size=4", "--set", "lr0=1e-3", "--set", f"resume={trained_dir / 'last.ckpt'}",
            "--run-dir", str(tmp_path)]
    assert cli.main(args) == 0
    assert (tmp_path / "last.ckpt").exists()


def test_wrong_preset_checkpoint_exits_1(trained_dir):
    assert cli.main(["evaluate", "--run-dir", str(trained_dir), "--set", "preset=paper"]) == 1
