"""Full two-branch network and the binary checkpoint format.

Checkpoint layout (all integers little-endian)::

    8 bytes   magic  b"XMCKPT\\0\\0"
    uint32    format version
    uint32    header length in bytes
    header    UTF-8 JSON: {"meta": {...}, "tensors": [{name, dtype, shape, offset, nbytes}, ...]}
    payload   raw little-endian tensor bytes, concatenated in header order
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import torch
from torch import Tensor, nn

from .detector import Detector, DetectorConfig, DetectionOutput
from .encoders import AudioEncoder, EncoderConfig, VisualEncoder
from .errors import CheckpointMismatchError, CorruptionError, FormatError
from .losses import sync_signal


@dataclass(frozen=True)
class ModelConfig:
    preset: str = "tiny"
    embed_dim: int | None = None
    heads: int | None = None
    attn_layers_per_module: int = 1

    def resolved(self) -> "ModelConfig":
        enc = EncoderConfig.from_preset(self.preset, self.embed_dim)
        heads = self.heads or (8 if self.preset == "paper" else 4)
        return ModelConfig(self.preset, enc.embed_dim, heads, self.attn_layers_per_module)


@dataclass
class ModelOutput:
    F_a: Tensor  # [B, T, D]
    F_v: Tensor
    sync: Tensor  # [B, T]
    detection: DetectionOutput

    @property
    def logit(self) -> Tensor:
        return self.detection.logit

    @property
    def s(self) -> Tensor:
        return self.detection.s


class XModalNet(nn.Module):
    def __init__(self, cfg: ModelConfig) -> None:
        super().__init__()
        self.cfg = cfg.resolved()
        enc_cfg = EncoderConfig.from_preset(self.cfg.preset, self.cfg.embed_dim)
        self.audio_encoder = AudioEncoder(enc_cfg)
        self.visual_encoder = VisualEncoder(enc_cfg)
        self.detector = Detector(DetectorConfig(self.cfg.embed_dim, self.cfg.heads, self.cfg.attn_layers_per_module))

    def forward(self, mfcc: Tensor, frames: Tensor, mask: Tensor | None = None) -> ModelOutput:
        F_a = self.audio_encoder(mfcc)
        F_v = self.visual_encoder(frames)
        det = self.detector(F_a, F_v, mask)
        return ModelOutput(F_a, F_v, sync_signal(F_a, F_v), det)


def build_model(cfg: ModelConfig, seed: int = 0) -> XModalNet:
    """Construct with seeded fan-in scaled init (PyTorch defaults) without touching the global RNG."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return XModalNet(cfg)


# ---------------------------------------------------------------------------
# Checkpoint file
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"XMCKPT\x00\x00"
CKPT_VERSION = 1
_U32x2 = struct.Struct("<II")
_DTYPES = {
    "float32": torch.float32,
    "float64": torch.float64,
    "int64": torch.int64,
    "int32": torch.int32,
    "uint8": torch.uint8,
    "bool": torch.bool,
}
_DTYPE_NAMES = {v: k for k, v in _DTYPES.items()}
_NP_LE = {"float32": "<f4", "float64": "<f8", "int64": "<i8", "int32": "<i4", "uint8": "u1", "bool": "?"}


def save_checkpoint(path: str | Path, tensors: Mapping[str, Tensor], meta: Mapping[str, Any]) -> None:
    entries, blobs, offset = [], [], 0
    for name, t in tensors.items():
        t = t.detach().cpu().contiguous()
        if t.dtype not in _DTYPE_NAMES:
            raise TypeError(f"{name}: unsupported dtype {t.dtype}")
        raw = t.numpy().astype(_NP_LE[_DTYPE_NAMES[t.dtype]], copy=False).tobytes()
        entries.append({"name": name, "dtype": _DTYPE_NAMES[t.dtype], "shape": list(t.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "tensors": entries}, sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with tmp.open("wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(_U32x2.pack(CKPT_VERSION, len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> tuple[dict[str, Tensor], dict[str, Any]]:
    data = Path(path).read_bytes()
    if data[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint")
    off = len(CKPT_MAGIC)
    if len(data) < off + _U32x2.size:
        raise CorruptionError(f"{path}: truncated header")
    version, hlen = _U32x2.unpack_from(data, off)
    if version != CKPT_VERSION:
        raise CheckpointMismatchError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    off += _U32x2.size
    try:
        header = json.loads(data[off: off + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptionError(f"{path}: unreadable header") from exc
    base = off + hlen
    tensors: dict[str, Tensor] = {}
    for e in header["tensors"]:
        start = base + e["offset"]
        if start + e["nbytes"] > len(data):
            raise CorruptionError(f"{path}: tensor {e['name']} runs past end of file")
        np_dtype = np.dtype(_NP_LE[e["dtype"]])
        arr = np.frombuffer(data, np_dtype, e["nbytes"] // np_dtype.itemsize, start)
        tensors[e["name"]] = torch.from_numpy(arr.astype(np_dtype.newbyteorder("="))).reshape(e["shape"])
    return tensors, header["meta"]


def model_meta(model: XModalNet) -> dict[str, Any]:
    return {"preset": model.cfg.preset, "model": asdict(model.cfg)}


def save_model(path: str | Path, model: XModalNet, extra_meta: Mapping[str, Any] | None = None) -> None:
    meta = model_meta(model)
    meta.update(extra_meta or {})
    save_checkpoint(path, {f"model.{k}": v for k, v in model.state_dict().items()}, meta)


def model_from_checkpoint(tensors: Mapping[str, Tensor], meta: Mapping[str, Any],
                          expect_preset: str | None = None) -> XModalNet:
    preset = meta.get("preset")
    if expect_preset is not None and preset != expect_preset:
        raise CheckpointMismatchError(f"checkpoint preset {preset!r} does not match requested {expect_preset!r}")
    model = XModalNet(ModelConfig(**meta["model"]))
    state = {k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")}
    model.load_state_dict(state)
    return model


def load_model(path: str | Path, expect_preset: str | None = None) -> XModalNet:
    tensors, meta = load_checkpoint(path)
    model = model_from_checkpoint(tensors, meta, expect_preset)
    model.eval()
    return model


def load_pretrained_weights(model: XModalNet, state: Mapping[str, Tensor], prefix: str = "") -> list[str]:
    """Weight-loading hook for externally pretrained encoder weights. Returns the keys that were loaded."""
    own = model.state_dict()
    loaded = []
    for k, v in state.items():
        key = prefix + k
        if key in own and own[key].shape == v.shape:
            own[key] = v
            loaded.append(key)
    model.load_state_dict(own)
    return loaded
