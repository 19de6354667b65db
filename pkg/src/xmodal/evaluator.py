"""AUC, the two generalization protocols, and report/score-dump formats.

Fake is the positive class throughout: the score of a clip is ``1 - s`` where
``s`` is the model's probability that the clip is real.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch
from scipy.stats import rankdata

from .dataio import (
    CMDFD_CATEGORIES,
    FAV_CATEGORIES,
    FAV_FAKE_VIDEO,
    Category,
    ManifestEntry,
    SampleSource,
    Split,
    VideoSample,
)
from .errors import ProtocolError, UndefinedAUCError

FAV_COLUMN = "FAV"


def _split_classes(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise ValueError(f"{scores.size} scores for {labels.size} labels")
    fake = scores[labels == 0]
    real = scores[labels == 1]
    if fake.size == 0 or real.size == 0:
        raise UndefinedAUCError(
            f"AUC undefined: need both classes, got {fake.size} fake and {real.size} real"
        )
    return fake, real


def auc(scores, labels) -> float:
    """Mann-Whitney AUC with fake (``label == 0``) as the positive class; ties count half."""
    fake, real = _split_classes(scores, labels)
    ranks = rankdata(np.concatenate([fake, real]))  # average ranks handle ties
    n_f, n_r = fake.size, real.size
    return float((ranks[:n_f].sum() - n_f * (n_f + 1) / 2.0) / (n_f * n_r))


def auc_pairwise(scores, labels) -> float:
    """Exhaustive comparison of every (fake, real) pair."""
    fake, real = _split_classes(scores, labels)
    diff = fake[:, None] - real[None, :]
    wins = np.count_nonzero(diff > 0) + 0.5 * np.count_nonzero(diff == 0)
    return float(wins / diff.size)


# ---------------------------------------------------------------------------
# Protocols
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ProtocolSpec:
    kind: str  # "leave_one_out" or "cross_dataset"
    holdout: Category | None = None
    train_manifest: str | None = None
    test_manifest: str | None = None

    def __post_init__(self) -> None:
        if self.kind == "leave_one_out":
            if self.holdout not in FAV_CATEGORIES:
                raise ProtocolError(
                    f"leave-one-out holdout must be one of {[c.value for c in FAV_CATEGORIES]}, got {self.holdout}"
                )
        elif self.kind != "cross_dataset":
            raise ProtocolError(f"unknown protocol kind {self.kind!r}")


def leave_one_out_specs() -> list[ProtocolSpec]:
    return [ProtocolSpec("leave_one_out", c) for c in FAV_CATEGORIES]


def _drop_shared_identities(train: list[ManifestEntry], test: list[ManifestEntry]) -> list[ManifestEntry]:
    test_ids = {e.identity for e in test if e.identity is not None}
    return [e for e in train if e.identity is None or e.identity not in test_ids]


def build_protocol_splits(
    spec: ProtocolSpec,
    manifest: Sequence[ManifestEntry],
    test_manifest: Sequence[ManifestEntry] | None = None,
) -> tuple[list[ManifestEntry], list[ManifestEntry]]:
    """Return ``(train, test)`` entries.

    Leave-one-out trains on every train/val entry whose category is not the
    held-out one and tests on the test-split reals plus the held-out category.
    Cross-dataset trains on the train/val part of ``manifest`` and tests on all
    of ``test_manifest``. Entries sharing an identity with a test entry are
    removed from training when identities are recorded.
    """
    if spec.kind == "leave_one_out":
        present = {e.category for e in manifest}
        if spec.holdout not in present:
            raise ProtocolError(f"manifest has no {spec.holdout.value} samples")
        train = [e for e in manifest if e.split is not Split.TEST and e.category is not spec.holdout]
        test = [e for e in manifest if e.split is Split.TEST and e.category in (spec.holdout, Category.REAL)]
        if not any(e.category is spec.holdout for e in test):
            raise ProtocolError(f"test split has no {spec.holdout.value} samples")
        if not any(e.category is Category.REAL for e in test):
            raise ProtocolError("test split has no REAL samples")
    else:
        if test_manifest is None:
            raise ProtocolError("cross-dataset protocol needs a test manifest")
        train = [e for e in manifest if e.split is not Split.TEST]
        test = list(test_manifest)
        overlap = {e.sample_id for e in train} & {e.sample_id for e in test}
        if overlap:
            raise ProtocolError(f"train and test manifests share sample ids, e.g. {sorted(overlap)[:3]}")
    train = _drop_shared_identities(train, test)
    if not train:
        raise ProtocolError("protocol leaves an empty training set")
    return train, test


# ---------------------------------------------------------------------------
# Scoring
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScoreRecord:
    sample_id: str
    category: str
    label: int
    score: float


def collate(samples: Sequence[VideoSample]) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Pad to the longest clip; returns ``(mfcc [B,4T,13], frames [B,T,112,112], mask [B,T])``."""
    T = max(s.T for s in samples)
    B = len(samples)
    mfcc = np.zeros((B, 4 * T, samples[0].audio.mfcc.shape[1]), dtype=np.float32)
    frames = np.zeros((B, T) + samples[0].faces.frames.shape[1:], dtype=np.float32)
    mask = np.zeros((B, T), dtype=bool)
    for i, s in enumerate(samples):
        mfcc[i, : 4 * s.T] = s.audio.mfcc
        frames[i, : s.T] = s.faces.frames
        mask[i, : s.T] = True
    return torch.from_numpy(mfcc), torch.from_numpy(frames), torch.from_numpy(mask)


@torch.no_grad()
def predict_real_prob(model, samples: Sequence[VideoSample], batch_size: int = 32) -> np.ndarray:
    was_training = model.training
    model.eval()
    out = []
    for i in range(0, len(samples), batch_size):
        mfcc, frames, mask = collate(samples[i: i + batch_size])
        out.append(model(mfcc, frames, mask).s.double().numpy())
    model.train(was_training)
    return np.concatenate(out) if out else np.zeros(0)


def score_samples(model, samples: Sequence[VideoSample], batch_size: int = 32) -> list[ScoreRecord]:
    s = predict_real_prob(model, samples, batch_size)
    return [
        ScoreRecord(x.entry.sample_id, x.entry.category.value, x.entry.label, float(1.0 - p))
        for x, p in zip(samples, s)
    ]


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

TABLE_FAV = [c.value for c in FAV_CATEGORIES]
TABLE_CMDFD = [FAV_COLUMN] + [c.value for c in CMDFD_CATEGORIES]
_FV_KEYS = {c.value for c in FAV_FAKE_VIDEO}


@dataclass
class EvalReport:
    per_category_auc: dict[str, float] = field(default_factory=dict)

    @property
    def avg(self) -> float:
        vals = list(self.per_category_auc.values())
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def avg_fv(self) -> float:
        vals = [v for k, v in self.per_category_auc.items() if k in _FV_KEYS]
        return float(np.mean(vals)) if vals else float("nan")

    def merge(self, other: "EvalReport") -> "EvalReport":
        return EvalReport({**self.per_category_auc, **other.per_category_auc})

    def columns(self) -> list[str]:
        keys = set(self.per_category_auc)
        for layout in (TABLE_FAV, TABLE_CMDFD):
            if keys <= set(layout):
                return [k for k in layout if k in keys]
        return sorted(keys)

    def to_kv(self) -> str:
        lines = ["# auc convention: fake=positive, score=1-s"]
        lines += [f"auc.{k} = {self.per_category_auc[k]!r}" for k in self.columns()]
        lines.append(f"avg = {self.avg!r}")
        if any(k in _FV_KEYS for k in self.per_category_auc):
            lines.append(f"avg_fv = {self.avg_fv!r}")
        return "\n".join(lines) + "\n"

    def to_table(self, method: str = "model") -> str:
        cols = self.columns()
        fav_layout = set(cols) <= set(TABLE_FAV)
        avg_name, avg_val = ("AVG-FV", self.avg_fv) if fav_layout else ("AVG", self.avg)
        head = ["Method"] + cols + [avg_name]
        row = [method] + [f"{100 * self.per_category_auc[c]:.2f}" for c in cols] + [f"{100 * avg_val:.2f}"]
        widths = [max(len(h), len(r)) for h, r in zip(head, row)]
        fmt = lambda cells: " | ".join(c.rjust(w) for c, w in zip(cells, widths))
        rule = "-+-".join("-" * w for w in widths)
        return "\n".join([fmt(head), rule, fmt(row)]) + "\n"


def report_from_scores(records: Sequence[ScoreRecord], pooled_name: str | None = None) -> EvalReport:
    """Per-category AUC of each fake category against every real clip in the pool.

    With ``pooled_name``, all fakes are scored together as one column instead.
    """
    scores = np.array([r.score for r in records], dtype=np.float64)
    labels = np.array([r.label for r in records])
    cats = np.array([r.category for r in records])
    real = labels == 1
    if not real.any():
        raise UndefinedAUCError("AUC undefined: test pool has no real samples")
    if pooled_name is not None:
        return EvalReport({pooled_name: auc(scores, labels)})
    out: dict[str, float] = {}
    fake_cats = [c for c in dict.fromkeys(cats.tolist()) if c != Category.REAL.value]
    if not fake_cats:
        raise UndefinedAUCError("AUC undefined: test pool has no fake samples")
    for c in fake_cats:
        sel = real | (cats == c)
        try:
            out[c] = auc(scores[sel], labels[sel])
        except UndefinedAUCError as exc:
            raise UndefinedAUCError(f"{c}: {exc}") from None
    return EvalReport(out)


def evaluate(model, test_entries: Sequence[ManifestEntry], source: SampleSource,
             pooled_name: str | None = None) -> tuple[EvalReport, list[ScoreRecord]]:
    samples = source.load_all(test_entries)
    records = score_samples(model, samples)
    return report_from_scores(records, pooled_name), records


def run_protocol(model, spec: ProtocolSpec, manifest: Sequence[ManifestEntry], source: SampleSource,
                 test_manifest: Sequence[ManifestEntry] | None = None) -> tuple[EvalReport, list[ScoreRecord]]:
    """Score the protocol's test pool. Cross-dataset also reports the source dataset's own test split."""
    _, test = build_protocol_splits(spec, manifest, test_manifest)
    report, records = evaluate(model, test, source)
    if spec.kind == "cross_dataset":
        own_test = [e for e in manifest if e.split is Split.TEST]
        if own_test:
            own_report, own_records = evaluate(model, own_test, source, pooled_name=FAV_COLUMN)
            report = own_report.merge(report)
            records = own_records + records
    return report, records


def write_scores(records: Iterable[ScoreRecord], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps({"sample_id": r.sample_id, "category": r.category,
                                 "label": r.label, "score": r.score}) + "\n")


def read_scores(path: str | Path) -> list[ScoreRecord]:
    out = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                out.append(ScoreRecord(d["sample_id"], d["category"], int(d["label"]), float(d["score"])))
    return out


def write_report(report: EvalReport, out_dir: str | Path, method: str = "model") -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.txt").write_text(report.to_kv(), encoding="utf-8")
    (out_dir / "report_table.txt").write_text(report.to_table(method), encoding="utf-8")


def table_from_reports(reports: Mapping[str, EvalReport]) -> EvalReport:
    merged = EvalReport()
    for r in reports.values():
        merged = merged.merge(r)
    return merged
