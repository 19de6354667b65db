"""Run configuration: a versioned ``[xmodal]`` key-value file plus command-line overrides."""
from __future__ import annotations

import configparser
import json
import logging
from pathlib import Path
from typing import Any, Iterable

from .errors import ConfigError
from .trainer import TrainConfig

log = logging.getLogger(__name__)

SECTION = "xmodal"
CONFIG_VERSION = 1

_TRAIN_DEFAULTS = TrainConfig().to_dict()

DEFAULTS: dict[str, Any] = {
    **_TRAIN_DEFAULTS,
    "manifest": "",
    "media_root": "",
    "cache_dir": "",
    "teacher": "mock",  # mock | cache
    "teacher_cache": "",
    "teacher_seed": 0,
    "checkpoint": "",
    "resume": "",
    "protocol": "none",  # none | leave_one_out | cross_dataset
    "holdout": "",
    "test_manifest": "",
    "granularity": "per_video_mean",
    "bins": 50,
    "render": False,
    "synthetic_size": 0,
    "synthetic_frames": 16,
}


def _coerce(key: str, raw: str) -> Any:
    default = DEFAULTS[key]
    raw = raw.strip()
    try:
        if key in ("embed_dim", "heads"):
            return None if raw.lower() in ("", "none") else int(raw)
        if isinstance(default, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, list):
            vals = json.loads(raw) if raw.startswith("[") else [float(x) for x in raw.split(",")]
            return [float(x) for x in vals]
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def _format(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, (list, tuple)):
        return ",".join(repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def load_config(path: str | Path | None) -> dict[str, Any]:
    cfg = dict(DEFAULTS)
    if path is None:
        return cfg
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if not parser.has_section(SECTION):
        raise ConfigError(f"{path}: missing [{SECTION}] section")
    items = dict(parser.items(SECTION))
    version = items.pop("config_version", str(CONFIG_VERSION))
    if version.strip() != str(CONFIG_VERSION):
        raise ConfigError(f"{path}: config_version {version} unsupported (expected {CONFIG_VERSION})")
    for key, raw in items.items():
        if key not in DEFAULTS:
            raise ConfigError(f"{path}: unknown key {key!r}")
        cfg[key] = _coerce(key, raw)
    return cfg


def apply_overrides(cfg: dict[str, Any], overrides: Iterable[str]) -> dict[str, Any]:
    cfg = dict(cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        key = key.strip()
        if key not in DEFAULTS:
            raise ConfigError(f"override references unknown key {key!r}")
        new = _coerce(key, raw)
        log.info("override %s: %r -> %r", key, cfg[key], new)
        cfg[key] = new
    return cfg


def save_config(cfg: dict[str, Any], path: str | Path) -> None:
    parser = configparser.ConfigParser(interpolation=None)
    parser[SECTION] = {"config_version": str(CONFIG_VERSION), **{k: _format(cfg[k]) for k in DEFAULTS}}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        parser.write(fh)


def train_config(cfg: dict[str, Any]) -> TrainConfig:
    return TrainConfig.from_dict({k: cfg[k] for k in _TRAIN_DEFAULTS})
