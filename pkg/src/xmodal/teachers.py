"""Speech-recognition teacher posteriors and the content-correlation labels built from them.

Content correlation for a frame is ``1 - JS(P_a, P_v)`` with base-2 logs, which
keeps it inside [0, 1] so it can serve directly as a soft BCE target.
"""
from __future__ import annotations

import string
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Protocol

import numpy as np

from .dataio import AUDIO_PER_VIDEO, N_SYMBOLS, VideoSample
from .errors import ContractError, CorruptionError, DataError, DistributionError, FormatError

ROW_TOL = 1e-6

VOCAB: tuple[str, ...] = tuple(string.ascii_lowercase) + tuple(string.digits) + (" ", "'", "<blank>", "<pad>")
VOCAB_SIZE = len(VOCAB)  # 40


@dataclass
class TeacherDistributions:
    P_a: np.ndarray  # [T, V]
    P_v: np.ndarray  # [T, V]

    def __post_init__(self) -> None:
        self.P_a = np.ascontiguousarray(self.P_a, dtype=np.float32)
        self.P_v = np.ascontiguousarray(self.P_v, dtype=np.float32)
        if self.P_a.ndim != 2 or self.P_a.shape != self.P_v.shape:
            raise ContractError(f"P_a {self.P_a.shape} and P_v {self.P_v.shape} must be equal 2-D shapes")

    @property
    def T(self) -> int:
        return self.P_a.shape[0]

    @property
    def vocab_size(self) -> int:
        return self.P_a.shape[1]

    def validate(self) -> None:
        for name, P in (("P_a", self.P_a), ("P_v", self.P_v)):
            for t in range(P.shape[0]):
                try:
                    check_distribution(P[t])
                except DistributionError as exc:
                    raise DistributionError(f"{name} frame {t}: {exc}") from None


def check_distribution(p: np.ndarray, tol: float = ROW_TOL) -> None:
    p = np.asarray(p, dtype=np.float64)
    if (p < 0).any():
        raise DistributionError("negative probability")
    s = p.sum(axis=-1)
    if np.any(np.abs(s - 1.0) > tol):
        raise DistributionError(f"row sums to {np.atleast_1d(s).tolist()}, not 1 within {tol}")


def _kl2(p: np.ndarray, m: np.ndarray) -> np.ndarray:
    # Terms with p_i = 0 contribute 0; m_i = 0 forces p_i = 0.
    pos = p > 0
    ratio = np.where(pos, p, 1.0) / np.where(pos, m, 1.0)
    return np.sum(np.where(pos, p * np.log2(ratio), 0.0), axis=-1)


def js_divergence_rows(P: np.ndarray, Q: np.ndarray, validate: bool = True) -> np.ndarray:
    """Row-wise base-2 Jensen-Shannon divergence of two ``[..., V]`` arrays."""
    P = np.asarray(P, dtype=np.float64)
    Q = np.asarray(Q, dtype=np.float64)
    if P.shape != Q.shape:
        raise ContractError(f"shape mismatch {P.shape} vs {Q.shape}")
    if validate:
        check_distribution(P)
        check_distribution(Q)
    M = 0.5 * (P + Q)
    js = 0.5 * _kl2(P, M) + 0.5 * _kl2(Q, M)
    return np.clip(js, 0.0, 1.0)


def js_divergence(p, q) -> float:
    return float(js_divergence_rows(np.asarray(p)[None, :], np.asarray(q)[None, :])[0])


def content_labels(dists: TeacherDistributions) -> np.ndarray:
    """Per-frame ``1 - JS(P_a[t], P_v[t])``."""
    dists.validate()
    return 1.0 - js_divergence_rows(dists.P_a, dists.P_v, validate=False)


def resample_rows(P: np.ndarray, factor: int = AUDIO_PER_VIDEO) -> np.ndarray:
    """Average consecutive groups of ``factor`` rows and renormalise.

    Used to bring audio-rate ASR posteriors down to the video frame rate; a
    trailing partial group is dropped.
    """
    P = np.asarray(P, dtype=np.float64)
    T = P.shape[0] // factor
    out = P[: T * factor].reshape(T, factor, P.shape[1]).mean(axis=1)
    return out / out.sum(axis=1, keepdims=True)


class Teacher(Protocol):
    def __call__(self, sample: VideoSample) -> TeacherDistributions: ...


def _peaked_rows(symbols: np.ndarray, rng: np.random.Generator, V: int, peak: float) -> np.ndarray:
    rows = rng.dirichlet(np.full(V, 0.5), size=symbols.size) * (1.0 - peak)
    rows[np.arange(symbols.size), symbols] += peak
    return rows / rows.sum(axis=1, keepdims=True)


def mock_teacher(sample: VideoSample, seed: int = 0, vocab_size: int = VOCAB_SIZE, peak: float = 0.9) -> TeacherDistributions:
    """Stand-in for pretrained ASR/VSR models.

    Each stream's posterior peaks on the symbol actually spoken (audio) or
    mouthed (visual) in that frame. Samples without a known symbol track get a
    symbol from a seeded projection of their features, which carries no real
    content signal.
    """
    rng = np.random.default_rng([int(seed), _stable_hash(sample.entry.sample_id)])
    sym_a, sym_v = sample.content_audio, sample.content_visual
    if sym_a is None or sym_v is None:
        sym_a, sym_v = _projected_symbols(sample, seed, vocab_size)
    # Synthetic symbol k maps to letter k of the vocabulary.
    P_a = _peaked_rows(np.asarray(sym_a) % vocab_size, rng, vocab_size, peak)
    P_v = _peaked_rows(np.asarray(sym_v) % vocab_size, rng, vocab_size, peak)
    return TeacherDistributions(P_a, P_v)


def _projected_symbols(sample: VideoSample, seed: int, V: int):
    rng = np.random.default_rng([int(seed), 7])
    a = sample.audio.mfcc.reshape(sample.T, -1).astype(np.float64)
    v = sample.faces.frames.reshape(sample.T, -1).astype(np.float64)[:, ::97]
    wa = rng.standard_normal((a.shape[1], N_SYMBOLS))
    wv = rng.standard_normal((v.shape[1], N_SYMBOLS))
    return np.argmax(a @ wa, axis=1), np.argmax(v @ wv, axis=1)


def _stable_hash(text: str) -> int:
    h = 2166136261
    for b in text.encode("utf-8"):
        h = ((h ^ b) * 16777619) & 0xFFFFFFFF
    return h


class MockTeacher:
    def __init__(self, seed: int = 0, vocab_size: int = VOCAB_SIZE) -> None:
        self.seed = seed
        self.vocab_size = vocab_size

    def __call__(self, sample: VideoSample) -> TeacherDistributions:
        return mock_teacher(sample, self.seed, self.vocab_size)


class AdapterTeacher:
    """Wraps external ASR/VSR callables.

    ``asr`` returns posteriors at the MFCC rate (4 rows per video frame) and is
    downsampled; ``vsr`` returns one row per video frame.
    """

    def __init__(self, asr: Callable[[VideoSample], np.ndarray], vsr: Callable[[VideoSample], np.ndarray]) -> None:
        self.asr = asr
        self.vsr = vsr

    def __call__(self, sample: VideoSample) -> TeacherDistributions:
        P_a = resample_rows(self.asr(sample))[: sample.T]
        P_v = np.asarray(self.vsr(sample), dtype=np.float64)[: sample.T]
        if P_a.shape[0] != sample.T or P_v.shape[0] != sample.T:
            raise ContractError(f"teacher returned {P_a.shape[0]}/{P_v.shape[0]} frames for T={sample.T}")
        return TeacherDistributions(P_a, P_v)


class CachedTeacher:
    """Reads ``<sample_id>.xmtl`` files; optionally falls back to another teacher and fills the cache."""

    def __init__(self, cache_dir: str | Path, fallback: Teacher | None = None) -> None:
        self.cache_dir = Path(cache_dir)
        self.fallback = fallback

    def path_for(self, sample_id: str) -> Path:
        return self.cache_dir / f"{sample_id}.xmtl"

    def __call__(self, sample: VideoSample) -> TeacherDistributions:
        path = self.path_for(sample.entry.sample_id)
        if path.exists():
            dists = load_cached(path)
            if dists.T != sample.T:
                raise CorruptionError(f"{path}: cached T={dists.T} but sample has T={sample.T}")
            return dists
        if self.fallback is None:
            raise DataError(f"no cached teacher labels at {path}")
        dists = self.fallback(sample)
        cache_labels(dists, path)
        return dists


# ---------------------------------------------------------------------------
# Label cache file
# ---------------------------------------------------------------------------

CACHE_MAGIC = b"XMTL1"
_CACHE_DIMS = struct.Struct("<ii")


def cache_labels(dists: TeacherDistributions, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with tmp.open("wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(_CACHE_DIMS.pack(dists.vocab_size, dists.T))
        fh.write(dists.P_a.astype("<f4", copy=False).tobytes())
        fh.write(dists.P_v.astype("<f4", copy=False).tobytes())
    tmp.replace(path)


def load_cached(path: str | Path) -> TeacherDistributions:
    data = Path(path).read_bytes()
    n_magic = len(CACHE_MAGIC)
    if len(data) < n_magic:
        raise CorruptionError(f"{path}: truncated before magic")
    if data[:n_magic] != CACHE_MAGIC:
        if data[:4] == CACHE_MAGIC[:4]:
            raise FormatError(f"{path}: unsupported label cache version {data[4:5]!r}")
        raise FormatError(f"{path}: not a teacher label cache (magic {data[:n_magic]!r})")
    if len(data) < n_magic + _CACHE_DIMS.size:
        raise CorruptionError(f"{path}: truncated header")
    V, T = _CACHE_DIMS.unpack_from(data, n_magic)
    if V <= 0 or T < 0:
        raise CorruptionError(f"{path}: invalid dimensions V={V} T={T}")
    off = n_magic + _CACHE_DIMS.size
    expected = off + 2 * 4 * V * T
    if len(data) != expected:
        raise CorruptionError(f"{path}: expected {expected} bytes, found {len(data)}")
    P_a = np.frombuffer(data, "<f4", T * V, off).reshape(T, V)
    P_v = np.frombuffer(data, "<f4", T * V, off + 4 * T * V).reshape(T, V)
    return TeacherDistributions(P_a.astype(np.float32), P_v.astype(np.float32))
