"""Per-class distributions of the learned audio-visual sync correlation.

All histograms share the same uniform edges over [0, 1], so distributions of
different forgery methods can be compared on one axis.
"""
from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from .dataio import VideoSample
from .errors import ContractError, DataError
from .evaluator import collate

log = logging.getLogger(__name__)

GRANULARITIES = ("per_frame", "per_video_mean")

Key = tuple[str, str]  # (method, class)


@dataclass
class CorrelationHistogram:
    method: str
    cls: str
    granularity: str
    bin_edges: np.ndarray
    counts: np.ndarray
    mean: float
    std: float

    @property
    def bins(self) -> int:
        return self.counts.size


@torch.no_grad()
def collect_correlations(model, samples: Sequence[VideoSample], granularity: str = "per_video_mean",
                         batch_size: int = 32) -> dict[Key, list[float]]:
    if granularity not in GRANULARITIES:
        raise ContractError(f"granularity must be one of {GRANULARITIES}, got {granularity!r}")
    if not samples:
        raise DataError("no samples to analyze")
    was_training = model.training
    model.eval()
    out: dict[Key, list[float]] = defaultdict(list)
    for i in range(0, len(samples), batch_size):
        chunk = samples[i: i + batch_size]
        mfcc, frames, mask = collate(chunk)
        sync = model(mfcc, frames, mask).sync.double().numpy()
        for s, row in zip(chunk, sync):
            vals = row[: s.T]
            key = (s.entry.category.value, "real" if s.label == 1 else "fake")
            if granularity == "per_frame":
                out[key].extend(float(v) for v in vals)
            else:
                out[key].append(float(vals.mean()))
    model.train(was_training)
    return dict(out)


def histogram(values: Sequence[float], bins: int = 50, method: str = "", cls: str = "",
              granularity: str = "per_video_mean") -> CorrelationHistogram:
    vals = np.asarray(values, dtype=np.float64)
    if vals.size == 0:
        raise DataError(f"empty value list for ({method}, {cls})")
    edges = np.linspace(0.0, 1.0, bins + 1)
    counts, _ = np.histogram(np.clip(vals, 0.0, 1.0), bins=edges)
    return CorrelationHistogram(method, cls, granularity, edges, counts, float(vals.mean()), float(vals.std()))


Renderer = Callable[[Mapping[Key, CorrelationHistogram], Path], None]


def export_histograms(values: Mapping[Key, Sequence[float]], out_dir: str | Path, bins: int = 50,
                      granularity: str = "per_video_mean", renderer: Renderer | None = None) -> dict[Key, CorrelationHistogram]:
    """Write ``hist_<method>_<class>.txt`` plus ``values_<method>_<class>.txt`` per key."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    hists: dict[Key, CorrelationHistogram] = {}
    for (method, cls), vals in sorted(values.items()):
        if len(vals) == 0:
            log.warning("no values for (%s, %s); skipped", method, cls)
            continue
        h = histogram(vals, bins, method, cls, granularity)
        hists[(method, cls)] = h
        write_histogram(h, out_dir / f"hist_{method}_{cls}.txt")
        with (out_dir / f"values_{method}_{cls}.txt").open("w", encoding="utf-8") as fh:
            fh.writelines(f"{float(v)!r}\n" for v in vals)
    if not hists:
        raise DataError("nothing to export: every value list is empty")
    if renderer is not None:
        renderer(hists, out_dir)
    return hists


def write_histogram(h: CorrelationHistogram, path: str | Path) -> None:
    lines = [
        f"# method={h.method}",
        f"# class={h.cls}",
        f"# granularity={h.granularity}",
        f"# bins={h.bins}",
        f"# mean={h.mean!r}",
        f"# std={h.std!r}",
    ]
    lines += [f"{float(lo)!r} {float(hi)!r} {int(c)}" for lo, hi, c in zip(h.bin_edges[:-1], h.bin_edges[1:], h.counts)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_histogram(path: str | Path) -> CorrelationHistogram:
    meta: dict[str, str] = {}
    los, his, counts = [], [], []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.startswith("#"):
            k, _, v = line[1:].strip().partition("=")
            meta[k] = v
        elif line.strip():
            lo, hi, c = line.split()
            los.append(float(lo))
            his.append(float(hi))
            counts.append(int(c))
    edges = np.array(los + his[-1:])
    return CorrelationHistogram(meta["method"], meta["class"], meta["granularity"], edges,
                                np.array(counts), float(meta["mean"]), float(meta["std"]))


def read_values(path: str | Path) -> list[float]:
    return [float(x) for x in Path(path).read_text(encoding="utf-8").split()]


def matplotlib_renderer(hists: Mapping[Key, CorrelationHistogram], out_dir: Path) -> None:
    """One panel per fake method with the reals overlaid; shared axes across panels."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    reals = [h for (m, c), h in hists.items() if c == "real"]
    fakes = [h for (m, c), h in hists.items() if c == "fake"]
    if not fakes:
        fakes = reals
    ymax = max(h.counts.max() / max(h.counts.sum(), 1) for h in hists.values())
    fig, axes = plt.subplots(1, len(fakes), figsize=(3 * len(fakes), 2.6), squeeze=False)
    for ax, fk in zip(axes[0], fakes):
        for h, color in [(r, "tab:blue") for r in reals] + [(fk, "tab:red")]:
            centers = 0.5 * (h.bin_edges[:-1] + h.bin_edges[1:])
            ax.bar(centers, h.counts / max(h.counts.sum(), 1), width=h.bin_edges[1] - h.bin_edges[0],
                   color=color, alpha=0.5)
        ax.set_title(fk.method)
        ax.set_xlim(0, 1)
        ax.set_ylim(0, ymax * 1.05)
    fig.tight_layout()
    fig.savefig(out_dir / "correlation_histograms.png", dpi=100)
    plt.close(fig)
