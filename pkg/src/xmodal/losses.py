"""Training objective: detection BCE, correlation distillation and the joint-modal contrastive term.

All per-frame terms accept an optional ``mask`` ([B, T] bool, True on real
frames) so padded frames never enter a sum. Every function works in whatever
floating dtype it is handed; the gradient checks run them in float64.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import torch

from .errors import ContractError

log = logging.getLogger(__name__)

EPS = 1e-7


@dataclass(frozen=True)
class LossBreakdown:
    cls: float
    dist: float
    contra: float

    @property
    def total(self) -> float:
        return self.cls + self.dist + self.contra


def _bce(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    pred = pred.clamp(EPS, 1.0 - EPS)
    return -(target * torch.log(pred) + (1.0 - target) * torch.log1p(-pred))


def loss_cls(s: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Per-sample binary cross-entropy; ``s`` is the predicted probability of *real*."""
    return _bce(s, y.to(s.dtype))


def loss_cls_from_logit(logit: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Same value as ``loss_cls(sigmoid(logit), y)`` with the clamp applied in probability space."""
    return loss_cls(torch.sigmoid(logit), y)


_warned_zero_norm = False


def sync_signal(F_a: torch.Tensor, F_v: torch.Tensor) -> torch.Tensor:
    """Per-frame ``(cos(F_a[t], F_v[t]) + 1) / 2`` over the last dimension.

    A frame where either vector has zero norm gets cosine 0, i.e. sync 0.5.
    """
    global _warned_zero_norm
    if F_a.shape != F_v.shape:
        raise ContractError(f"embedding shapes differ: {tuple(F_a.shape)} vs {tuple(F_v.shape)}")
    dot = (F_a * F_v).sum(-1)
    denom = F_a.norm(dim=-1) * F_v.norm(dim=-1)
    zero = denom == 0
    if bool(zero.any()):
        if not _warned_zero_norm:
            log.warning("zero-norm embedding row(s): cosine set to 0")
            _warned_zero_norm = True
    cos = torch.where(zero, torch.zeros_like(dot), dot / torch.where(zero, torch.ones_like(denom), denom))
    return (cos.clamp(-1.0, 1.0) + 1.0) / 2.0


def _frame_mean(values: torch.Tensor, mask: torch.Tensor | None) -> torch.Tensor:
    if mask is None:
        return values.mean(-1)
    m = mask.to(values.dtype)
    return (values * m).sum(-1) / m.sum(-1).clamp_min(1.0)


def _check_lengths(sync: torch.Tensor, cont: torch.Tensor) -> None:
    if sync.shape != cont.shape:
        raise ContractError(f"sync {tuple(sync.shape)} and cont {tuple(cont.shape)} lengths differ")


def loss_dist(sync: torch.Tensor, cont: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Frame-averaged BCE of the sync prediction against the soft content target."""
    _check_lengths(sync, cont)
    return _frame_mean(_bce(sync, cont.to(sync.dtype)), mask)


def loss_contra(
    sync: torch.Tensor,
    cont: torch.Tensor,
    y: torch.Tensor,
    margin: float = 1.0,
    mask: torch.Tensor | None = None,
    mode: str = "frame",
) -> torch.Tensor:
    """Margin contrastive loss between content and sync correlation.

    ``mode="frame"`` uses the scalar distance ``|cont[t] - sync[t]|`` per frame and
    averages over frames. ``mode="sequence"`` takes one Euclidean distance over the
    whole (masked) sequence.
    """
    _check_lengths(sync, cont)
    cont = cont.to(sync.dtype)
    y = y.to(sync.dtype)
    if mode == "frame":
        d = (cont - sync).abs()
        yb = y.unsqueeze(-1) if d.dim() > y.dim() else y
        per = yb * d.pow(2) + (1.0 - yb) * torch.clamp(margin - d, min=0.0).pow(2)
        return _frame_mean(per, mask)
    if mode == "sequence":
        diff = cont - sync
        if mask is not None:
            diff = diff * mask.to(diff.dtype)
        sq = diff.pow(2).sum(-1)
        # sqrt has an infinite slope at 0; only the hinge branch needs d itself.
        d = torch.sqrt(torch.where(sq > 0, sq, torch.ones_like(sq)))
        d = torch.where(sq > 0, d, torch.zeros_like(d))
        return y * sq + (1.0 - y) * torch.clamp(margin - d, min=0.0).pow(2)
    raise ValueError(f"unknown contrastive mode {mode!r}")


def total_loss(
    cls: torch.Tensor,
    dist: torch.Tensor,
    contra: torch.Tensor,
    weights: Sequence[float] = (1.0, 1.0, 1.0),
) -> torch.Tensor:
    """Batch mean of the weighted per-sample sum of the three terms."""
    if cls.numel() == 0:
        raise ContractError("total_loss needs at least one sample")
    if not (cls.shape == dist.shape == contra.shape):
        raise ContractError("per-sample loss vectors must share a shape")
    w_cls, w_dist, w_contra = weights
    return (w_cls * cls + w_dist * dist + w_contra * contra).mean()


def total_from_breakdowns(items: Sequence[LossBreakdown]) -> float:
    if not items:
        raise ContractError("total_loss needs at least one sample")
    return sum(b.cls + b.dist + b.contra for b in items) / len(items)
