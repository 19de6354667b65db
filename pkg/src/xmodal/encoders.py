"""Audio and visual encoders producing one embedding per video frame."""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import Tensor, nn

from .dataio import AUDIO_PER_VIDEO, FACE_SIZE, N_MFCC
from .errors import ConfigError, ContractError


@dataclass(frozen=True)
class AudioArch:
    blocks: tuple[int, ...]
    widths: tuple[int, ...]
    strides: tuple[tuple[int, int], ...]  # (time, freq) per stage; time strides multiply to 4


@dataclass(frozen=True)
class VisualArch:
    stem_width: int
    stem_kernel: tuple[int, int, int]
    blocks: tuple[int, ...]
    widths: tuple[int, ...]
    temporal_width: int
    temporal_blocks: int


@dataclass(frozen=True)
class EncoderConfig:
    embed_dim: int = 128
    audio_arch: AudioArch = field(default_factory=lambda: PRESETS["paper"][0])
    visual_arch: VisualArch = field(default_factory=lambda: PRESETS["paper"][1])

    def __post_init__(self) -> None:
        if self.embed_dim <= 0:
            raise ConfigError(f"embed_dim must be positive, got {self.embed_dim}")

    @classmethod
    def from_preset(cls, preset: str, embed_dim: int | None = None) -> "EncoderConfig":
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        audio, visual, default_dim = PRESETS[preset]
        return cls(embed_dim or default_dim, audio, visual)


PRESETS: dict[str, tuple[AudioArch, VisualArch, int]] = {
    # ResNet-34 stage layout for audio, ResNet-18 style frontend plus a temporal conv stack for video.
    "paper": (
        AudioArch((3, 4, 6, 3), (32, 64, 128, 256), ((1, 1), (2, 2), (2, 2), (1, 2))),
        VisualArch(64, (5, 7, 7), (2, 2, 2, 2), (64, 128, 256, 512), 512, 5),
        128,
    ),
    "tiny": (
        AudioArch((1, 1), (16, 32), ((2, 2), (2, 2))),
        VisualArch(16, (3, 5, 5), (1, 1), (16, 32), 32, 1),
        32,
    ),
}


class BasicBlock2d(nn.Module):
    def __init__(self, cin: int, cout: int, stride=1) -> None:
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.relu = nn.ReLU()
        self.shortcut = nn.Identity()
        if stride not in (1, (1, 1)) or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x: Tensor) -> Tensor:
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + self.shortcut(x))


def _stages(cin: int, blocks, widths, strides) -> tuple[nn.Sequential, int]:
    layers = []
    for n, w, s in zip(blocks, widths, strides):
        for i in range(n):
            layers.append(BasicBlock2d(cin, w, s if i == 0 else 1))
            cin = w
    return nn.Sequential(*layers), cin


class AudioEncoder(nn.Module):
    """2-D residual network over the (time, coefficient) MFCC plane.

    Input ``[B, 4T, 13]``; output ``[B, T, embed_dim]``.
    """

    def __init__(self, cfg: EncoderConfig) -> None:
        super().__init__()
        arch = cfg.audio_arch
        t_stride = 1
        for st, _ in arch.strides:
            t_stride *= st
        if t_stride != AUDIO_PER_VIDEO:
            raise ConfigError(f"audio time strides must multiply to {AUDIO_PER_VIDEO}, got {t_stride}")
        self.input_norm = nn.BatchNorm1d(N_MFCC)
        self.stem = nn.Sequential(
            nn.Conv2d(1, arch.widths[0], 3, 1, 1, bias=False), nn.BatchNorm2d(arch.widths[0]), nn.ReLU()
        )
        self.stages, width = _stages(arch.widths[0], arch.blocks, arch.widths, arch.strides)
        self.proj = nn.Linear(width, cfg.embed_dim)

    def forward(self, mfcc: Tensor) -> Tensor:
        if mfcc.dim() != 3 or mfcc.shape[-1] != N_MFCC or mfcc.shape[1] % AUDIO_PER_VIDEO:
            raise ContractError(f"audio input must be [B, 4T, {N_MFCC}], got {tuple(mfcc.shape)}")
        T = mfcc.shape[1] // AUDIO_PER_VIDEO
        x = self.input_norm(mfcc.transpose(1, 2)).transpose(1, 2)
        x = self.stages(self.stem(x.unsqueeze(1)))  # [B, C, T, F']
        x = x.mean(-1).transpose(1, 2)
        if x.shape[1] != T:
            raise ContractError(f"audio encoder produced {x.shape[1]} frames, expected {T}")
        return self.proj(x)


class TemporalBlock(nn.Module):
    def __init__(self, width: int, kernel: int = 5) -> None:
        super().__init__()
        self.conv = nn.Conv1d(width, width, kernel, padding=kernel // 2, bias=False)
        self.bn = nn.BatchNorm1d(width)
        self.relu = nn.ReLU()

    def forward(self, x: Tensor) -> Tensor:
        return x + self.relu(self.bn(self.conv(x)))


class VisualEncoder(nn.Module):
    """3-D conv stem, per-frame 2-D residual trunk, then a length-preserving temporal conv stack.

    Input ``[B, T, 112, 112]``; output ``[B, T, embed_dim]``.
    """

    def __init__(self, cfg: EncoderConfig) -> None:
        super().__init__()
        arch = cfg.visual_arch
        kt, kh, kw = arch.stem_kernel
        self.stem = nn.Sequential(
            nn.Conv3d(1, arch.stem_width, arch.stem_kernel, (1, 2, 2), (kt // 2, kh // 2, kw // 2), bias=False),
            nn.BatchNorm3d(arch.stem_width),
            nn.ReLU(),
            nn.MaxPool3d((1, 3, 3), (1, 2, 2), (0, 1, 1)),
        )
        strides = [1] + [2] * (len(arch.blocks) - 1) if len(arch.blocks) > 2 else [2] * len(arch.blocks)
        self.trunk, width = _stages(arch.stem_width, arch.blocks, arch.widths, strides)
        self.to_temporal = nn.Conv1d(width, arch.temporal_width, 1)
        self.temporal = nn.Sequential(*[TemporalBlock(arch.temporal_width) for _ in range(arch.temporal_blocks)])
        self.proj = nn.Linear(arch.temporal_width, cfg.embed_dim)

    def forward(self, frames: Tensor) -> Tensor:
        if frames.dim() != 4 or frames.shape[-2:] != (FACE_SIZE, FACE_SIZE):
            raise ContractError(f"visual input must be [B, T, {FACE_SIZE}, {FACE_SIZE}], got {tuple(frames.shape)}")
        B, T = frames.shape[:2]
        x = self.stem(frames.unsqueeze(1))  # [B, C, T, H', W']
        C, H, W = x.shape[1], x.shape[3], x.shape[4]
        x = x.transpose(1, 2).reshape(B * T, C, H, W)
        x = self.trunk(x).mean((-2, -1)).reshape(B, T, -1)
        x = self.temporal(self.to_temporal(x.transpose(1, 2)))
        return self.proj(x.transpose(1, 2))
