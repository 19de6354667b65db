"""Joint optimisation of the detection and correlation-distillation branches."""
from __future__ import annotations

import dataclasses
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch

from .dataio import ManifestEntry, SampleSource, Split, VideoSample
from .errors import CheckpointMismatchError, ConfigError, DataError, NaNLossError, UndefinedAUCError
from .evaluator import auc, collate, predict_real_prob
from .losses import loss_cls_from_logit, loss_contra, loss_dist, total_loss
from .model import (
    CKPT_VERSION,
    ModelConfig,
    XModalNet,
    build_model,
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
    save_model,
)
from .teachers import Teacher, content_labels

log = logging.getLogger(__name__)

METRICS_FILE = "metrics.jsonl"
LAST_CKPT = "last.ckpt"
BEST_CKPT = "best.ckpt"


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 1e-4
    lr_decay_per_epoch: float = 0.05
    epochs: int = 10
    batch_size: int = 16
    seed: int = 0
    margin: float = 1.0
    loss_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    preset: str = "tiny"
    embed_dim: int | None = None
    heads: int | None = None
    attn_layers_per_module: int = 1
    contra_mode: str = "frame"
    optimizer: str = "adam"
    workers: int = 0

    def __post_init__(self) -> None:
        if not self.lr0 > 0:
            raise ConfigError(f"lr0 must be positive, got {self.lr0}")
        if not 0 <= self.lr_decay_per_epoch < 1:
            raise ConfigError(f"lr_decay_per_epoch must be in [0, 1), got {self.lr_decay_per_epoch}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.contra_mode not in ("frame", "sequence"):
            raise ConfigError(f"contra_mode must be 'frame' or 'sequence', got {self.contra_mode!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if len(self.loss_weights) != 3:
            raise ConfigError("loss_weights needs three values (cls, dist, contra)")

    @property
    def model_config(self) -> ModelConfig:
        return ModelConfig(self.preset, self.embed_dim, self.heads, self.attn_layers_per_module)

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["loss_weights"] = list(self.loss_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TrainConfig":
        d = dict(d)
        if "loss_weights" in d:
            d["loss_weights"] = tuple(float(x) for x in d["loss_weights"])
        known = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Learning rate for ``epoch``, computed in closed form from the epoch index."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return cfg.lr0 * (1.0 - cfg.lr_decay_per_epoch) ** epoch


@dataclass
class RunState:
    epoch: int  # last completed epoch, -1 before the first
    step: int
    best_val_auc: float | None
    run_dir: Path
    metrics: list[dict[str, Any]] = field(default_factory=list)
    rng_state: bytes = b""

    @property
    def checkpoint(self) -> Path:
        return self.run_dir / LAST_CKPT

    @property
    def best_checkpoint(self) -> Path:
        return self.run_dir / BEST_CKPT


@dataclass
class _Prepared:
    samples: list[VideoSample]
    cont: list[np.ndarray]


def _prepare(entries: Sequence[ManifestEntry], source: SampleSource, teacher: Teacher, workers: int) -> _Prepared:
    def one(e: ManifestEntry):
        s = source.load(e)
        return s, content_labels(teacher(s)).astype(np.float32)

    # map() yields in submission order, so results follow the manifest.
    if workers > 0:
        with ThreadPoolExecutor(workers) as pool:
            pairs = list(pool.map(one, entries))
    else:
        pairs = [one(e) for e in entries]
    return _Prepared([p[0] for p in pairs], [p[1] for p in pairs])


def _make_optimizer(model: XModalNet, cfg: TrainConfig) -> torch.optim.Optimizer:
    if cfg.optimizer == "adam":
        return torch.optim.Adam(model.parameters(), lr=cfg.lr0)
    return torch.optim.SGD(model.parameters(), lr=cfg.lr0, momentum=0.9)


def batch_losses(model: XModalNet, samples: Sequence[VideoSample], conts: Sequence[np.ndarray],
                 cfg: TrainConfig) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Per-sample (cls, dist, contra) for one padded batch."""
    mfcc, frames, mask = collate(samples)
    cont = torch.zeros(mask.shape, dtype=torch.float32)
    for i, c in enumerate(conts):
        cont[i, : c.size] = torch.from_numpy(c)
    y = torch.tensor([s.label for s in samples], dtype=torch.float32)
    out = model(mfcc, frames, mask)
    cls = loss_cls_from_logit(out.logit, y)
    dist = loss_dist(out.sync, cont, mask)
    contra = loss_contra(out.sync, cont, y, cfg.margin, mask, cfg.contra_mode)
    return cls, dist, contra


def _optimizer_tensors(opt: torch.optim.Optimizer) -> tuple[dict[str, torch.Tensor], dict[str, Any]]:
    sd = opt.state_dict()
    tensors = {}
    for idx, st in sd["state"].items():
        for k, v in st.items():
            tensors[f"optim.{idx}.{k}"] = v if torch.is_tensor(v) else torch.tensor(v)
    return tensors, {"param_groups": sd["param_groups"]}


def _optimizer_state(tensors: dict[str, torch.Tensor], groups: list[dict[str, Any]]) -> dict[str, Any]:
    state: dict[int, dict[str, torch.Tensor]] = {}
    for name, t in tensors.items():
        if name.startswith("optim."):
            _, idx, key = name.split(".", 2)
            state.setdefault(int(idx), {})[key] = t
    return {"state": state, "param_groups": groups}


def _save_run(path: Path, model: XModalNet, opt: torch.optim.Optimizer, cfg: TrainConfig, state: RunState) -> None:
    opt_tensors, opt_meta = _optimizer_tensors(opt)
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    tensors.update(opt_tensors)
    tensors["rng.torch"] = torch.get_rng_state()
    meta = {
        "preset": model.cfg.preset,
        "model": dataclasses.asdict(model.cfg),
        "train_config": cfg.to_dict(),
        "optimizer": opt_meta,
        "epoch": state.epoch,
        "step": state.step,
        "best_val_auc": state.best_val_auc,
        "version": CKPT_VERSION,
    }
    save_checkpoint(path, tensors, meta)


def _val_auc(model: XModalNet, val: _Prepared) -> float | None:
    if not val.samples:
        return None
    s = predict_real_prob(model, val.samples)
    try:
        return auc(1.0 - s, [x.label for x in val.samples])
    except UndefinedAUCError:
        return None


def _append_metrics(path: Path, record: dict[str, Any]) -> None:
    with path.open("a", encoding="utf-8") as fh:
        fh.write(json.dumps(record) + "\n")


def _loop(model: XModalNet, opt: torch.optim.Optimizer, cfg: TrainConfig, state: RunState,
          train: _Prepared, val: _Prepared, stop_after_epoch: int | None) -> RunState:
    metrics_path = state.run_dir / METRICS_FILE
    n = len(train.samples)
    last_epoch = cfg.epochs - 1 if stop_after_epoch is None else min(cfg.epochs - 1, stop_after_epoch)
    for epoch in range(state.epoch + 1, last_epoch + 1):
        lr = lr_schedule(epoch, cfg)
        for g in opt.param_groups:
            g["lr"] = lr
        model.train()
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        sums = np.zeros(3)
        for start in range(0, n, cfg.batch_size):
            idx = order[start: start + cfg.batch_size]
            samples = [train.samples[i] for i in idx]
            cls, dist, contra = batch_losses(model, samples, [train.cont[i] for i in idx], cfg)
            loss = total_loss(cls, dist, contra, cfg.loss_weights)
            if not torch.isfinite(loss):
                ids = [s.entry.sample_id for s in samples]
                (state.run_dir / "nan_dump.json").write_text(
                    json.dumps({"epoch": epoch, "step": state.step, "batch": ids}), encoding="utf-8")
                raise NaNLossError(ids, epoch, state.step)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            state.step += 1
            sums += [cls.detach().sum().item(), dist.detach().sum().item(), contra.detach().sum().item()]
        means = sums / n
        val_auc = _val_auc(model, val)
        record = {
            "epoch": epoch, "step": state.step, "lr": lr,
            "cls": float(means[0]), "dist": float(means[1]), "contra": float(means[2]),
            "total": float(np.dot(means, cfg.loss_weights)),
            "val_auc": val_auc,
        }
        _append_metrics(metrics_path, record)
        state.metrics.append(record)
        state.epoch = epoch
        log.info("epoch %d lr=%.3g total=%.4f val_auc=%s", epoch, lr, record["total"], val_auc)
        if val_auc is not None and (state.best_val_auc is None or val_auc > state.best_val_auc):
            state.best_val_auc = val_auc
            save_model(state.run_dir / BEST_CKPT, model, {"epoch": epoch, "val_auc": val_auc})
        _save_run(state.run_dir / LAST_CKPT, model, opt, cfg, state)
    state.rng_state = torch.get_rng_state().numpy().tobytes()
    return state


def _split_prepared(entries, source, teacher, cfg) -> tuple[_Prepared, _Prepared]:
    train_e = [e for e in entries if e.split is Split.TRAIN]
    val_e = [e for e in entries if e.split is Split.VAL]
    if not train_e:
        raise DataError("training split is empty")
    return _prepare(train_e, source, teacher, cfg.workers), _prepare(val_e, source, teacher, cfg.workers)


def train(
    entries: Sequence[ManifestEntry],
    source: SampleSource,
    teacher: Teacher,
    cfg: TrainConfig,
    run_dir: str | Path,
    stop_after_epoch: int | None = None,
) -> RunState:
    """Train from scratch on the ``train`` split, validating on ``val``.

    Writes ``metrics.jsonl``, ``last.ckpt`` (resumable) and ``best.ckpt`` (best
    validation AUC) into ``run_dir``. ``stop_after_epoch`` ends the run early
    as if interrupted.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / METRICS_FILE).write_text("", encoding="utf-8")
    train_p, val_p = _split_prepared(entries, source, teacher, cfg)
    model = build_model(cfg.model_config, cfg.seed)
    opt = _make_optimizer(model, cfg)
    state = RunState(epoch=-1, step=0, best_val_auc=None, run_dir=run_dir)
    return _loop(model, opt, cfg, state, train_p, val_p, stop_after_epoch)


def resume(
    checkpoint: str | Path,
    entries: Sequence[ManifestEntry],
    source: SampleSource,
    teacher: Teacher,
    cfg: TrainConfig | None = None,
    run_dir: str | Path | None = None,
    stop_after_epoch: int | None = None,
) -> RunState:
    """Continue a run from a ``last.ckpt``; metrics are appended to the run's log."""
    checkpoint = Path(checkpoint)
    tensors, meta = load_checkpoint(checkpoint)
    if "train_config" not in meta:
        raise CheckpointMismatchError(f"{checkpoint} is a model-only checkpoint, not a resumable run")
    saved_cfg = TrainConfig.from_dict(meta["train_config"])
    cfg = cfg or saved_cfg
    if cfg.preset != meta["preset"]:
        raise CheckpointMismatchError(f"checkpoint preset {meta['preset']!r} != configured preset {cfg.preset!r}")
    model = model_from_checkpoint(tensors, meta, cfg.preset)
    opt = _make_optimizer(model, cfg)
    opt.load_state_dict(_optimizer_state(tensors, meta["optimizer"]["param_groups"]))
    if "rng.torch" in tensors:
        torch.set_rng_state(tensors["rng.torch"])
    run_dir = Path(run_dir) if run_dir is not None else checkpoint.parent
    run_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = run_dir / METRICS_FILE
    # Drop records past the checkpoint so a crashed epoch is not logged twice.
    kept = []
    if metrics_path.exists():
        for line in metrics_path.read_text(encoding="utf-8").splitlines():
            if line.strip() and json.loads(line)["epoch"] <= meta["epoch"]:
                kept.append(line)
    metrics_path.write_text("".join(k + "\n" for k in kept), encoding="utf-8")
    state = RunState(
        epoch=int(meta["epoch"]), step=int(meta["step"]), best_val_auc=meta["best_val_auc"],
        run_dir=run_dir, metrics=[json.loads(k) for k in kept],
    )
    train_p, val_p = _split_prepared(entries, source, teacher, cfg)
    return _loop(model, opt, cfg, state, train_p, val_p, stop_after_epoch)
