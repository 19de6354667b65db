"""Command-line entry point: ``xmodal {preprocess,train,evaluate,analyze,selftest}``.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 runtime error.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Any, Sequence

from . import config as C
from .analyzer import collect_correlations, export_histograms, matplotlib_renderer
from .dataio import (
    Category,
    ManifestEntry,
    SampleSource,
    Split,
    load_manifest,
    make_synthetic_manifest,
    write_manifest,
    write_media_cache,
)
from .errors import ConfigError, DataError, ProtocolError, XModalError
from .evaluator import ProtocolSpec, build_protocol_splits, evaluate, run_protocol, write_report, write_scores
from .model import load_model
from .teachers import CachedTeacher, MockTeacher, Teacher, cache_labels
from .trainer import BEST_CKPT, LAST_CKPT, resume, train

log = logging.getLogger("xmodal")

RUN_DIR_ENV = "XMODAL_RUN_DIR"
DEFAULT_RUN_DIR = "runs/latest"
SNAPSHOT = "resolved_config.cfg"


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key-value config file with an [xmodal] section")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (repeatable; beats the file)")
    common.add_argument("--run-dir", help=f"artifact directory (default ${RUN_DIR_ENV} or {DEFAULT_RUN_DIR})")
    common.add_argument("--seed", type=int, help="shorthand for --set seed=N")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="xmodal", description="Cross-modal deepfake detector toolkit")
    sub = p.add_subparsers(dest="verb", required=True)
    for verb, help_ in [
        ("preprocess", "cache media features and teacher labels"),
        ("train", "train a model (or resume a run)"),
        ("evaluate", "score a checkpoint and write an AUC report"),
        ("analyze", "export sync-correlation histograms"),
        ("selftest", "run built-in oracle checks"),
    ]:
        sub.add_parser(verb, parents=[common], help=help_)
    return p


def resolve(args: argparse.Namespace) -> tuple[dict[str, Any], Path]:
    cfg = C.load_config(args.config)
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    cfg = C.apply_overrides(cfg, overrides)
    C.train_config(cfg)  # validates the training keys early
    run_dir = Path(args.run_dir or os.environ.get(RUN_DIR_ENV) or DEFAULT_RUN_DIR)
    return cfg, run_dir


def _manifest(cfg: dict[str, Any], run_dir: Path, key: str = "manifest") -> list[ManifestEntry]:
    if cfg[key]:
        return load_manifest(cfg[key])
    local = run_dir / "manifest.tsv"
    if key == "manifest" and local.exists():
        return load_manifest(local)
    if key == "manifest" and cfg["synthetic_size"] > 0:
        entries = make_synthetic_manifest(cfg["synthetic_size"], T=cfg["synthetic_frames"], seed=cfg["seed"])
        write_manifest(entries, local)
        log.info("generated synthetic manifest with %d entries at %s", len(entries), local)
        return entries
    raise ConfigError(f"{key} is not set")


def _cache_dir(cfg: dict[str, Any], run_dir: Path) -> Path:
    return Path(cfg["cache_dir"]) if cfg["cache_dir"] else run_dir / "cache"


def _source(cfg: dict[str, Any], run_dir: Path) -> SampleSource:
    return SampleSource(root=cfg["media_root"] or None, cache_dir=_cache_dir(cfg, run_dir))


def _teacher(cfg: dict[str, Any], run_dir: Path) -> Teacher:
    if cfg["teacher"] == "mock":
        return MockTeacher(seed=cfg["teacher_seed"])
    if cfg["teacher"] == "cache":
        return CachedTeacher(cfg["teacher_cache"] or _cache_dir(cfg, run_dir))
    raise ConfigError(f"teacher must be 'mock' or 'cache', got {cfg['teacher']!r}")


def _protocol(cfg: dict[str, Any]) -> ProtocolSpec | None:
    kind = cfg["protocol"]
    if kind == "none":
        return None
    if kind not in ("leave_one_out", "cross_dataset"):
        raise ConfigError(f"unknown protocol {kind!r}")
    holdout = None
    if kind == "leave_one_out":
        try:
            holdout = Category(cfg["holdout"])
        except ValueError:
            raise ConfigError(f"holdout {cfg['holdout']!r} is not a forgery category") from None
    try:
        return ProtocolSpec(kind, holdout)
    except ProtocolError as exc:
        raise ConfigError(str(exc)) from None


def _checkpoint(cfg: dict[str, Any], run_dir: Path) -> Path:
    if cfg["checkpoint"]:
        path = Path(cfg["checkpoint"])
    else:
        path = run_dir / BEST_CKPT
        if not path.exists():
            path = run_dir / LAST_CKPT
    if not path.exists():
        raise ConfigError(f"checkpoint {path} not found")
    return path


def cmd_preprocess(cfg: dict[str, Any], run_dir: Path) -> None:
    entries = _manifest(cfg, run_dir)
    source, cache = _source(cfg, run_dir), _cache_dir(cfg, run_dir)
    teacher = MockTeacher(seed=cfg["teacher_seed"])
    for e in entries:
        sample = source.load(e)
        write_media_cache(sample, cache / f"{e.sample_id}.xmm")
        cache_labels(teacher(sample), cache / f"{e.sample_id}.xmtl")
    log.info("cached %d samples in %s", len(entries), cache)


def cmd_train(cfg: dict[str, Any], run_dir: Path) -> None:
    entries = _manifest(cfg, run_dir)
    spec = _protocol(cfg)
    if spec is not None:
        test_manifest = _manifest(cfg, run_dir, "test_manifest") if spec.kind == "cross_dataset" else None
        entries, _ = build_protocol_splits(spec, entries, test_manifest)
    tcfg = C.train_config(cfg)
    source, teacher = _source(cfg, run_dir), _teacher(cfg, run_dir)
    if cfg["resume"]:
        state = resume(cfg["resume"], entries, source, teacher, tcfg, run_dir)
    else:
        state = train(entries, source, teacher, tcfg, run_dir)
    log.info("finished epoch %d; best val AUC %s", state.epoch, state.best_val_auc)


def cmd_evaluate(cfg: dict[str, Any], run_dir: Path) -> None:
    entries = _manifest(cfg, run_dir)
    model = load_model(_checkpoint(cfg, run_dir), expect_preset=cfg["preset"])
    source = _source(cfg, run_dir)
    spec = _protocol(cfg)
    if spec is None:
        test = [e for e in entries if e.split is Split.TEST]
        if not test:
            raise DataError("manifest has no test split")
        report, records = evaluate(model, test, source)
    else:
        test_manifest = _manifest(cfg, run_dir, "test_manifest") if spec.kind == "cross_dataset" else None
        report, records = run_protocol(model, spec, entries, source, test_manifest)
    write_scores(records, run_dir / "scores.jsonl")
    write_report(report, run_dir)
    sys.stdout.write(report.to_kv())


def cmd_analyze(cfg: dict[str, Any], run_dir: Path) -> None:
    entries = _manifest(cfg, run_dir)
    model = load_model(_checkpoint(cfg, run_dir), expect_preset=cfg["preset"])
    chosen = [e for e in entries if e.split is Split.TEST] or entries
    samples = _source(cfg, run_dir).load_all(chosen)
    values = collect_correlations(model, samples, cfg["granularity"])
    renderer = matplotlib_renderer if cfg["render"] else None
    hists = export_histograms(values, run_dir / "analysis", cfg["bins"], cfg["granularity"], renderer)
    for (method, cls), h in hists.items():
        print(f"{method}\t{cls}\tmean={h.mean:.4f}\tstd={h.std:.4f}\tn={int(h.counts.sum())}")


COMMANDS = {
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "analyze": cmd_analyze,
}


def main(argv: Sequence[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.verb == "selftest":
            from . import selftest

            return 0 if selftest.run() else 3
        cfg, run_dir = resolve(args)
        run_dir.mkdir(parents=True, exist_ok=True)
        C.save_config(cfg, run_dir / SNAPSHOT)
        log.info("%s: run dir %s", args.verb, run_dir)
        COMMANDS[args.verb](cfg, run_dir)
        return 0
    except XModalError as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return exc.exit_code
    except OSError as exc:
        log.error("I/O error: %s", exc)
        return DataError.exit_code
    except Exception as exc:  # noqa: BLE001
        log.exception("unexpected failure: %s", exc)
        return 3


if __name__ == "__main__":
    raise SystemExit(main())
