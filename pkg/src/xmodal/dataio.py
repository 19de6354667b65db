"""Manifests, media decoding, MFCC extraction, stream alignment and the media cache."""
from __future__ import annotations

import enum
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.fft import dct
from scipy.signal import resample_poly

from .errors import (
    AlignmentError,
    CorruptionError,
    DataError,
    FormatError,
    ManifestParseError,
    ManifestValidationError,
    TooShortError,
)

log = logging.getLogger(__name__)

SAMPLE_RATE = 16000
FPS = 25
FACE_SIZE = 112
N_MFCC = 13
WIN_LENGTH = 400  # 25 ms at 16 kHz
HOP_LENGTH = 160  # 10 ms at 16 kHz
AUDIO_PER_VIDEO = 4  # 100 Hz MFCC frames per 25 fps video frame
N_FFT = 512
N_MELS = 40
LOG_FLOOR = 1e-10


class Category(str, enum.Enum):
    REAL = "REAL"
    RVFA = "RVFA"
    FVRA_W2L = "FVRA_W2L"
    FVFA_FS = "FVFA_FS"
    FVFA_GAN = "FVFA_GAN"
    FVFA_W2L = "FVFA_W2L"
    A2H = "A2H"
    A2H_S = "A2H_S"
    VRT = "VRT"
    VRT_S = "VRT_S"
    W2L = "W2L"
    W2L_S = "W2L_S"
    MIT = "MIT"
    MIT_S = "MIT_S"

    @property
    def own_voice(self) -> bool:
        return self.value.endswith("_S")


FAV_CATEGORIES = (
    Category.RVFA,
    Category.FVRA_W2L,
    Category.FVFA_FS,
    Category.FVFA_GAN,
    Category.FVFA_W2L,
)
FAV_FAKE_VIDEO = FAV_CATEGORIES[1:]
CMDFD_CATEGORIES = (
    Category.A2H,
    Category.A2H_S,
    Category.VRT,
    Category.VRT_S,
    Category.W2L,
    Category.W2L_S,
    Category.MIT,
    Category.MIT_S,
)


class VoiceSource(str, enum.Enum):
    OWN = "own"
    OTHER = "other"
    NA = "n/a"


class Split(str, enum.Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


@dataclass(frozen=True)
class ManifestEntry:
    sample_id: str
    media_path: str
    label: int
    category: Category
    voice_source: VoiceSource
    split: Split
    identity: str | None = None

    def validate(self, lineno: int | None = None) -> None:
        if not self.sample_id:
            raise ManifestValidationError("sample_id", "empty", lineno)
        if self.label not in (0, 1):
            raise ManifestValidationError("label", f"must be 0 or 1, got {self.label!r}", lineno)
        if (self.label == 1) != (self.category is Category.REAL):
            raise ManifestValidationError(
                "label", f"label={self.label} inconsistent with category {self.category.value}", lineno
            )
        if self.category.own_voice and self.voice_source is not VoiceSource.OWN:
            raise ManifestValidationError(
                "voice_source", f"{self.category.value} requires voice_source=own", lineno
            )
        if self.voice_source is VoiceSource.OWN and not self.category.own_voice:
            raise ManifestValidationError(
                "voice_source", f"voice_source=own only valid for _S categories, got {self.category.value}", lineno
            )

    def to_line(self) -> str:
        cols = [
            self.sample_id,
            self.media_path,
            str(self.label),
            self.category.value,
            self.voice_source.value,
            self.split.value,
        ]
        if self.identity is not None:
            cols.append(self.identity)
        return "\t".join(cols)


def _parse_enum(enum_cls, raw: str, name: str, lineno: int):
    try:
        return enum_cls(raw)
    except ValueError:
        allowed = ", ".join(m.value for m in enum_cls)
        raise ManifestValidationError(name, f"{raw!r} not one of {{{allowed}}}", lineno) from None


def parse_manifest_line(line: str, lineno: int = 1) -> ManifestEntry:
    cols = line.rstrip("\r\n").split("\t")
    if len(cols) not in (6, 7):
        raise ManifestParseError(lineno, f"expected 6 tab-separated columns (7 with identity), got {len(cols)}")
    cols = [c.strip() for c in cols]
    sample_id, media_path, label_raw, cat_raw, voice_raw, split_raw = cols[:6]
    if label_raw not in ("0", "1"):
        raise ManifestParseError(lineno, f"label must be 0 or 1, got {label_raw!r}")
    entry = ManifestEntry(
        sample_id=sample_id,
        media_path=media_path,
        label=int(label_raw),
        category=_parse_enum(Category, cat_raw, "category", lineno),
        voice_source=_parse_enum(VoiceSource, voice_raw, "voice_source", lineno),
        split=_parse_enum(Split, split_raw, "split", lineno),
        identity=cols[6] if len(cols) == 7 and cols[6] else None,
    )
    entry.validate(lineno)
    return entry


def load_manifest(path: str | Path) -> list[ManifestEntry]:
    """Read a tab-separated manifest. ``#`` lines and blank lines are skipped."""
    path = Path(path)
    entries: list[ManifestEntry] = []
    seen: dict[str, int] = {}
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            entry = parse_manifest_line(line, lineno)
            if entry.sample_id in seen:
                raise ManifestValidationError(
                    "sample_id", f"duplicate {entry.sample_id!r} (first on line {seen[entry.sample_id]})", lineno
                )
            seen[entry.sample_id] = lineno
            entries.append(entry)
    if not entries:
        log.warning("manifest %s contains no entries", path)
    return entries


def write_manifest(entries: Iterable[ManifestEntry], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for e in entries:
            fh.write(e.to_line() + "\n")


@dataclass
class AudioFeatures:
    mfcc: np.ndarray  # [T_a, 13] float32
    sample_rate_hz: int = SAMPLE_RATE

    def __post_init__(self) -> None:
        self.mfcc = np.ascontiguousarray(self.mfcc, dtype=np.float32)
        if self.mfcc.ndim != 2:
            raise DataError(f"mfcc must be 2-D, got shape {self.mfcc.shape}")
        if not np.isfinite(self.mfcc).all():
            raise DataError("mfcc contains NaN/Inf")

    @property
    def num_frames(self) -> int:
        return self.mfcc.shape[0]


@dataclass
class FaceTrack:
    frames: np.ndarray  # [T_v, 112, 112] float32 in [0, 1]
    fps: int = FPS

    def __post_init__(self) -> None:
        self.frames = np.ascontiguousarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 3 or self.frames.shape[1:] != (FACE_SIZE, FACE_SIZE):
            raise DataError(f"face frames must be [T, {FACE_SIZE}, {FACE_SIZE}], got {self.frames.shape}")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class VideoSample:
    entry: ManifestEntry
    audio: AudioFeatures
    faces: FaceTrack
    T: int
    # Per-frame spoken-symbol tracks; only known for synthetic samples.
    content_audio: np.ndarray | None = field(default=None, repr=False)
    content_visual: np.ndarray | None = field(default=None, repr=False)

    @property
    def label(self) -> int:
        return self.entry.label


# ---------------------------------------------------------------------------
# MFCC
# ---------------------------------------------------------------------------


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def _mel_filterbank(n_mels: int = N_MELS, n_fft: int = N_FFT, rate: int = SAMPLE_RATE) -> np.ndarray:
    mel_pts = np.linspace(_hz_to_mel(0.0), _hz_to_mel(rate / 2), n_mels + 2)
    bins = np.floor((n_fft + 1) * _mel_to_hz(mel_pts) / rate).astype(int)
    fb = np.zeros((n_mels, n_fft // 2 + 1))
    for m in range(1, n_mels + 1):
        lo, mid, hi = bins[m - 1], bins[m], bins[m + 1]
        for k in range(lo, mid):
            fb[m - 1, k] = (k - lo) / max(mid - lo, 1)
        for k in range(mid, hi):
            fb[m - 1, k] = (hi - k) / max(hi - mid, 1)
    return fb


_FILTERBANK = _mel_filterbank()
_WINDOW = np.hamming(WIN_LENGTH)


def num_mfcc_frames(n_samples: int) -> int:
    if n_samples < WIN_LENGTH:
        return 0
    return (n_samples - WIN_LENGTH) // HOP_LENGTH + 1


def extract_mfcc(waveform: np.ndarray, rate_hz: int = SAMPLE_RATE) -> AudioFeatures:
    """13 MFCCs per 25 ms window with a 10 ms hop (100 frames/s).

    Audio at another rate is resampled to 16 kHz first. Mel energies are floored
    before the log so silent input stays finite.
    """
    x = np.asarray(waveform, dtype=np.float64).reshape(-1)
    if rate_hz != SAMPLE_RATE:
        g = np.gcd(int(rate_hz), SAMPLE_RATE)
        x = resample_poly(x, SAMPLE_RATE // g, int(rate_hz) // g)
    n = num_mfcc_frames(x.size)
    if n == 0:
        raise TooShortError(f"waveform has {x.size} samples, need at least {WIN_LENGTH}")
    idx = np.arange(WIN_LENGTH)[None, :] + HOP_LENGTH * np.arange(n)[:, None]
    frames = x[idx] * _WINDOW
    power = np.abs(np.fft.rfft(frames, n=N_FFT)) ** 2 / N_FFT
    mel = np.log(np.maximum(power @ _FILTERBANK.T, LOG_FLOOR))
    coeffs = dct(mel, type=2, axis=1, norm="ortho")[:, :N_MFCC]
    return AudioFeatures(coeffs.astype(np.float32), SAMPLE_RATE)


# ---------------------------------------------------------------------------
# Alignment
# ---------------------------------------------------------------------------


def align(audio: AudioFeatures, faces: FaceTrack, entry: ManifestEntry | None = None) -> VideoSample:
    """Trim both streams so there are exactly ``4*T`` audio rows for ``T`` video frames.

    Tails are truncated; nothing is padded.
    """
    T = min(faces.num_frames, audio.num_frames // AUDIO_PER_VIDEO)
    if T <= 0:
        raise AlignmentError(
            f"cannot align {audio.num_frames} audio frames with {faces.num_frames} video frames"
        )
    a = audio.mfcc[: AUDIO_PER_VIDEO * T]
    v = faces.frames[:T]
    return VideoSample(
        entry=entry if entry is not None else _anonymous_entry(),
        audio=AudioFeatures(a, audio.sample_rate_hz),
        faces=FaceTrack(v, faces.fps),
        T=T,
    )


def realign(sample: VideoSample) -> VideoSample:
    out = align(sample.audio, sample.faces, sample.entry)
    if sample.content_audio is not None:
        out.content_audio = sample.content_audio[: out.T]
    if sample.content_visual is not None:
        out.content_visual = sample.content_visual[: out.T]
    return out


def _anonymous_entry() -> ManifestEntry:
    return ManifestEntry("anonymous", "", 1, Category.REAL, VoiceSource.NA, Split.TEST)


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------

N_SYMBOLS = 8
_SAMPLES_PER_FRAME = SAMPLE_RATE // FPS  # 640
_EDGE_PAD = (WIN_LENGTH - HOP_LENGTH) // 2  # 120 samples each side -> exactly 4*T MFCC rows
_FORMANTS = np.array(
    [[300, 870], [400, 2000], [520, 1190], [660, 1700], [730, 1090], [270, 2290], [490, 1350], [570, 840]],
    dtype=np.float64,
)


def _synth_waveform(symbols: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    T = symbols.size
    f0 = rng.uniform(135.0, 145.0)
    amp = rng.uniform(0.5, 0.6)
    t = np.arange(_SAMPLES_PER_FRAME) / SAMPLE_RATE
    segs = []
    for s in symbols:
        f1, f2 = _FORMANTS[s]
        seg = (
            0.3 * np.sin(2 * np.pi * f0 * t)
            + np.sin(2 * np.pi * f1 * t + rng.uniform(0, 2 * np.pi))
            + 0.6 * np.sin(2 * np.pi * f2 * t + rng.uniform(0, 2 * np.pi))
        )
        segs.append(amp * seg)
    body = np.concatenate(segs) + 0.02 * rng.standard_normal(T * _SAMPLES_PER_FRAME)
    pad = 0.02 * rng.standard_normal(_EDGE_PAD)
    return np.concatenate([pad, body, 0.02 * rng.standard_normal(_EDGE_PAD)])


def _synth_faces(symbols: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    T = symbols.size
    yy, xx = np.mgrid[0:FACE_SIZE, 0:FACE_SIZE].astype(np.float32)
    skin = rng.uniform(0.6, 0.65)
    bg = rng.uniform(0.2, 0.25)
    face = np.where(((yy - 56) / 50) ** 2 + ((xx - 56) / 40) ** 2 <= 1.0, skin, bg).astype(np.float32)
    for ex in (40, 72):
        face[((yy - 42) ** 2 + (xx - ex) ** 2) <= 16] = 0.15
    frames = np.empty((T, FACE_SIZE, FACE_SIZE), dtype=np.float32)
    for i, s in enumerate(symbols):
        img = face.copy()
        dy, dx = rng.integers(-2, 3, size=2)
        h = 2 + 3 * int(s)
        w = 18 + 4 * (int(s) % 3)
        top = 80 - h // 2 + dy
        img[max(top, 0): top + h, 56 - w + dx: 56 + w + dx] = 0.05 + 0.08 * (int(s) % 4)
        img += 0.03 * rng.standard_normal(img.shape).astype(np.float32)
        frames[i] = np.clip(img, 0.0, 1.0)
    return frames


def make_synthetic_sample(
    seed: int,
    label: int,
    T: int,
    entry: ManifestEntry | None = None,
    visual_seed: int | None = None,
) -> VideoSample:
    """Deterministic toy clip with a per-frame spoken symbol track.

    ``seed`` selects the content: the real clip for ``seed`` drives both the audio
    formants and the mouth shape from one symbol sequence. The fake clip for
    ``seed`` keeps that audio but takes its mouth track from the content of
    ``visual_seed`` (default ``seed + 1``), the way a lip-sync forgery re-uses
    genuine footage. Each
    modality on its own therefore looks like real material; only cross-modal
    agreement separates the classes.
    """
    if T < 2:
        raise DataError(f"synthetic samples need T >= 2, got {T}")
    if label not in (0, 1):
        raise DataError(f"label must be 0 or 1, got {label}")
    sym_a = _symbol_track(seed, T)
    if visual_seed is None:
        visual_seed = seed + 1
    sym_v = sym_a.copy() if label == 1 else _symbol_track(visual_seed, T)
    rng = np.random.default_rng([int(seed), int(label), int(T), 1])
    audio = extract_mfcc(_synth_waveform(sym_a, rng), SAMPLE_RATE)
    faces = FaceTrack(_synth_faces(sym_v, rng), FPS)
    if entry is None:
        entry = ManifestEntry(
            sample_id=f"syn{seed}",
            media_path=synthetic_uri(seed, T),
            label=label,
            category=Category.REAL if label == 1 else Category.W2L,
            voice_source=VoiceSource.NA if label == 1 else VoiceSource.OTHER,
            split=Split.TRAIN,
        )
    sample = align(audio, faces, entry)
    sample.content_audio = sym_a[: sample.T]
    sample.content_visual = sym_v[: sample.T]
    return sample


def _symbol_track(content_seed: int, T: int) -> np.ndarray:
    return np.random.default_rng([int(content_seed), int(T), 0]).integers(0, N_SYMBOLS, size=T)


def synthetic_uri(seed: int, T: int, visual_seed: int | None = None) -> str:
    if visual_seed is None:
        return f"synthetic:{seed}:{T}"
    return f"synthetic:{seed}:{T}:{visual_seed}"


def make_synthetic_manifest(
    n: int,
    T: int = 8,
    seed: int = 0,
    fake_categories: Sequence[Category] = (Category.W2L,),
    fractions: tuple[float, float, float] = (0.6, 0.2, 0.2),
) -> list[ManifestEntry]:
    """Balanced real/fake synthetic manifest with deterministic train/val/test splits.

    Entries come in (real, fake) pairs sharing a content seed, and splits are
    assigned per pair. A fake borrows its mouth track from the next pair of the
    same split (cyclically), so every content sequence lives in exactly one
    split and appears once genuine and once forged there.
    """
    n_pairs = n // 2
    perm = np.random.default_rng(seed).permutation(n_pairs)
    n_train = int(round(fractions[0] * n_pairs))
    n_val = int(round(fractions[1] * n_pairs))
    blocks = [(Split.TRAIN, perm[:n_train]), (Split.VAL, perm[n_train:n_train + n_val]),
              (Split.TEST, perm[n_train + n_val:])]
    base = seed * 100003
    entries = []
    for split, pairs in blocks:
        for k, p in enumerate(pairs):
            content = base + int(p)
            partner = base + int(pairs[(k + 1) % len(pairs)])
            cat = fake_categories[int(p) % len(fake_categories)]
            voice = VoiceSource.OWN if cat.own_voice else VoiceSource.OTHER
            entries.append(ManifestEntry(f"syn{seed}_{2 * p:05d}", synthetic_uri(content, T), 1,
                                         Category.REAL, VoiceSource.NA, split))
            entries.append(ManifestEntry(f"syn{seed}_{2 * p + 1:05d}", synthetic_uri(content, T, partner), 0,
                                         cat, voice, split))
    entries.sort(key=lambda e: e.sample_id)
    return entries


# ---------------------------------------------------------------------------
# Decoded-media cache
# ---------------------------------------------------------------------------

MEDIA_MAGIC = b"XMODAL-MEDIA-v1\n"
_MEDIA_HEADER = struct.Struct("<7I")  # T_a, C, T_v, H, W, sample_rate, fps


def write_media_cache(sample: VideoSample, path: str | Path) -> None:
    mfcc = sample.audio.mfcc.astype("<f4", copy=False)
    frames = sample.faces.frames.astype("<f4", copy=False)
    header = _MEDIA_HEADER.pack(
        mfcc.shape[0], mfcc.shape[1], frames.shape[0], frames.shape[1], frames.shape[2],
        sample.audio.sample_rate_hz, sample.faces.fps,
    )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(MEDIA_MAGIC)
        fh.write(header)
        fh.write(mfcc.tobytes())
        fh.write(frames.tobytes())


def read_media_cache(path: str | Path) -> tuple[AudioFeatures, FaceTrack]:
    data = Path(path).read_bytes()
    if len(data) < len(MEDIA_MAGIC):
        raise CorruptionError(f"{path}: truncated before magic header")
    if data[: len(MEDIA_MAGIC)] != MEDIA_MAGIC:
        raise FormatError(f"{path}: not a media cache file")
    off = len(MEDIA_MAGIC)
    if len(data) < off + _MEDIA_HEADER.size:
        raise CorruptionError(f"{path}: truncated header")
    ta, c, tv, h, w, rate, fps = _MEDIA_HEADER.unpack_from(data, off)
    off += _MEDIA_HEADER.size
    n_a, n_v = ta * c, tv * h * w
    if len(data) != off + 4 * (n_a + n_v):
        raise CorruptionError(f"{path}: expected {off + 4 * (n_a + n_v)} bytes, found {len(data)}")
    mfcc = np.frombuffer(data, "<f4", n_a, off).reshape(ta, c)
    frames = np.frombuffer(data, "<f4", n_v, off + 4 * n_a).reshape(tv, h, w)
    return AudioFeatures(mfcc.astype(np.float32), rate), FaceTrack(frames.astype(np.float32), fps)


# ---------------------------------------------------------------------------
# Sample resolution
# ---------------------------------------------------------------------------

# suffix -> fn(path) returning (waveform, rate_hz, frames[T,112,112])
Decoder = Callable[[Path], "tuple[np.ndarray, int, np.ndarray]"]
_DECODERS: dict[str, Decoder] = {}
# Optional hook turning full video frames into 112x112 face crops.
Cropper = Callable[[np.ndarray], np.ndarray]


def register_decoder(suffix: str, fn: Decoder) -> None:
    _DECODERS[suffix.lower()] = fn


def _decode_npz(path: Path):
    with np.load(path) as z:
        return z["waveform"], int(z["rate"]), z["frames"]


register_decoder(".npz", _decode_npz)


class SampleSource:
    """Resolves manifest entries to aligned samples.

    ``synthetic:<seed>:<T>`` URIs are generated on the fly, ``.xmm`` paths are
    read from the media cache, anything else goes through a registered decoder.
    Relative paths are resolved against ``root``.
    """

    def __init__(self, root: str | Path | None = None, cache_dir: str | Path | None = None,
                 cropper: Cropper | None = None) -> None:
        self.root = Path(root) if root is not None else None
        self.cache_dir = Path(cache_dir) if cache_dir is not None else None
        self.cropper = cropper

    def cache_path(self, entry: ManifestEntry) -> Path | None:
        return self.cache_dir / f"{entry.sample_id}.xmm" if self.cache_dir else None

    def load(self, entry: ManifestEntry) -> VideoSample:
        if entry.media_path.startswith("synthetic:"):
            try:
                parts = [int(x) for x in entry.media_path.split(":")[1:]]
                seed, T = parts[:2]
                vseed = parts[2] if len(parts) == 3 else None
                if len(parts) not in (2, 3):
                    raise ValueError(entry.media_path)
                return make_synthetic_sample(seed, entry.label, T, entry, vseed)
            except ValueError as exc:
                raise DataError(f"{entry.sample_id}: bad synthetic uri {entry.media_path!r}") from exc
        cached = self.cache_path(entry)
        if cached is not None and cached.exists():
            audio, faces = read_media_cache(cached)
            return align(audio, faces, entry)
        path = Path(entry.media_path)
        if self.root is not None and not path.is_absolute():
            path = self.root / path
        if path.suffix.lower() == ".xmm":
            audio, faces = read_media_cache(path)
            return align(audio, faces, entry)
        decoder = _DECODERS.get(path.suffix.lower())
        if decoder is None:
            raise DataError(f"{entry.sample_id}: no decoder registered for {path.suffix or path.name!r}")
        if not path.exists():
            raise DataError(f"{entry.sample_id}: media file {path} not found")
        waveform, rate, frames = decoder(path)
        if self.cropper is not None:
            frames = self.cropper(frames)
        return align(extract_mfcc(waveform, rate), FaceTrack(frames), entry)

    def load_all(self, entries: Sequence[ManifestEntry]) -> list[VideoSample]:
        return [self.load(e) for e in entries]
