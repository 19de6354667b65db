"""Cross-attention fusion of the two embedding streams and the real/fake head."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .errors import ConfigError, ContractError


@dataclass(frozen=True)
class DetectorConfig:
    embed_dim: int = 128
    heads: int = 8
    attn_layers_per_module: int = 1
    same_frame_bias: bool = True

    def __post_init__(self) -> None:
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.attn_layers_per_module < 1:
            raise ConfigError("attn_layers_per_module must be >= 1")


class CrossAttentionLayer(nn.Module):
    """Multi-head attention from a source stream onto a context stream, then a feed-forward sublayer.

    Both sublayers are residual with post-LayerNorm. There is no positional
    encoding. Instead each head may learn a bias on the score between a query and
    the key at the same frame index, which lets it look at the synchronous frame
    of the other stream while keeping the layer equivariant to a joint
    permutation of frames.
    """

    def __init__(self, dim: int, heads: int, same_frame_bias: bool = True) -> None:
        super().__init__()
        self.heads = heads
        self.same_frame_bias = nn.Parameter(torch.full((heads,), 3.0)) if same_frame_bias else None
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)
        self.norm1 = nn.LayerNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, 2 * dim), nn.ReLU(), nn.Linear(2 * dim, dim))
        self.norm2 = nn.LayerNorm(dim)

    def forward(self, source: Tensor, context: Tensor, key_mask: Tensor | None = None) -> tuple[Tensor, Tensor]:
        B, T, D = source.shape
        h = self.heads
        q = self.q(source).view(B, T, h, D // h).transpose(1, 2)
        k = self.k(context).view(B, -1, h, D // h).transpose(1, 2)
        v = self.v(context).view(B, -1, h, D // h).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(D // h)
        if self.same_frame_bias is not None and context.shape[1] == T:
            eye = torch.eye(T, dtype=scores.dtype, device=scores.device)
            scores = scores + self.same_frame_bias.to(scores.dtype)[None, :, None, None] * eye
        if key_mask is not None:
            scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        attn = torch.softmax(scores, dim=-1)  # [B, h, T, T]
        ctx = (attn @ v).transpose(1, 2).reshape(B, T, D)
        x = self.norm1(source + self.out(ctx))
        x = self.norm2(x + self.ff(x))
        return x, attn


class CrossAttentionModule(nn.Module):
    def __init__(self, dim: int, heads: int, layers: int = 1, same_frame_bias: bool = True) -> None:
        super().__init__()
        self.layers = nn.ModuleList(CrossAttentionLayer(dim, heads, same_frame_bias) for _ in range(layers))

    def forward(self, source: Tensor, context: Tensor, key_mask: Tensor | None = None) -> tuple[Tensor, list[Tensor]]:
        maps = []
        x = source
        for layer in self.layers:
            x, attn = layer(x, context, key_mask)
            maps.append(attn)
        return x, maps


@dataclass
class DetectionOutput:
    logit: Tensor  # [B]
    attn_audio: list[Tensor]  # maps of the module with F_a as source
    attn_visual: list[Tensor]

    @property
    def s(self) -> Tensor:
        """Predicted probability that the clip is real."""
        return torch.sigmoid(self.logit)


class Detector(nn.Module):
    """Two cross-attention modules (audio-as-source and visual-as-source), concatenated per frame,
    mean-pooled over valid frames and mapped to a single logit."""

    def __init__(self, cfg: DetectorConfig) -> None:
        super().__init__()
        self.cfg = cfg
        args = (cfg.embed_dim, cfg.heads, cfg.attn_layers_per_module, cfg.same_frame_bias)
        self.audio_to_visual = CrossAttentionModule(*args)
        self.visual_to_audio = CrossAttentionModule(*args)
        self.fc = nn.Linear(2 * cfg.embed_dim, 1)

    def cross_attend(self, source: Tensor, context: Tensor, which: str = "audio",
                     mask: Tensor | None = None) -> tuple[Tensor, list[Tensor]]:
        if source.shape != context.shape:
            raise ContractError(f"streams must match: {tuple(source.shape)} vs {tuple(context.shape)}")
        module = self.audio_to_visual if which == "audio" else self.visual_to_audio
        return module(source, context, mask)

    def forward(self, F_a: Tensor, F_v: Tensor, mask: Tensor | None = None) -> DetectionOutput:
        if F_a.shape != F_v.shape or F_a.dim() != 3:
            raise ContractError(f"embedding pair must be two equal [B, T, D] tensors, got {tuple(F_a.shape)} and {tuple(F_v.shape)}")
        a, maps_a = self.cross_attend(F_a, F_v, "audio", mask)
        v, maps_v = self.cross_attend(F_v, F_a, "visual", mask)
        fused = torch.cat([a, v], dim=-1)
        if mask is None:
            pooled = fused.mean(1)
        else:
            m = mask.to(fused.dtype).unsqueeze(-1)
            pooled = (fused * m).sum(1) / m.sum(1).clamp_min(1.0)
        return DetectionOutput(self.fc(pooled).squeeze(-1), maps_a, maps_v)
