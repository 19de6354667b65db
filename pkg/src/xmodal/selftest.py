"""Fast oracle and invariant checks runnable on an installed build (``xmodal selftest``)."""
from __future__ import annotations

import math
from typing import Callable

import numpy as np
import torch

from .detector import Detector, DetectorConfig
from .evaluator import auc, auc_pairwise
from .losses import loss_cls, loss_contra, loss_dist, sync_signal
from .teachers import js_divergence_rows
from .trainer import TrainConfig, lr_schedule


def _js_brute(p, q) -> float:
    total = 0.0
    for a, b in zip(p, q):
        m = 0.5 * (a + b)
        if a > 0:
            total += 0.5 * a * math.log2(a / m)
        if b > 0:
            total += 0.5 * b * math.log2(b / m)
    return total


def check_js() -> str:
    rng = np.random.default_rng(0)
    P = rng.dirichlet(np.ones(12), size=200)
    Q = rng.dirichlet(np.ones(12), size=200)
    js = js_divergence_rows(P, Q)
    assert np.all((js >= 0) & (js <= 1))
    assert np.allclose(js, js_divergence_rows(Q, P), atol=1e-12, rtol=0)
    assert np.allclose(js_divergence_rows(P, P), 0.0, atol=1e-12)
    err = max(abs(js[i] - _js_brute(P[i], Q[i])) for i in range(len(P)))
    assert err < 1e-9, err
    return f"max brute-force err {err:.1e}"


def check_losses() -> str:
    s = torch.tensor([0.5], dtype=torch.float64)
    assert abs(loss_cls(s, torch.tensor([1.0])).item() - math.log(2)) < 1e-12
    sync = torch.tensor([[0.25, 0.75]], dtype=torch.float64)
    cont = torch.tensor([[0.75, 0.25]], dtype=torch.float64)
    got = loss_contra(sync, cont, torch.tensor([0.0]), margin=1.0).item()
    assert abs(got - 0.25) < 1e-12, got
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(50):
        T = int(rng.integers(1, 9))
        sy, co = rng.uniform(0.01, 0.99, T), rng.uniform(0, 1, T)
        ref = sum(-(c * math.log(a) + (1 - c) * math.log(1 - a)) for a, c in zip(sy, co)) / T
        got = loss_dist(torch.from_numpy(sy)[None], torch.from_numpy(co)[None]).item()
        worst = max(worst, abs(got - ref))
    assert worst < 1e-9, worst
    return f"hand cases exact, dist oracle err {worst:.1e}"


def check_sync_anchors() -> str:
    v = torch.tensor([[1.0, 2.0, 3.0]])
    assert abs(sync_signal(v, v).item() - 1.0) < 1e-6
    assert abs(sync_signal(v, -v).item()) < 1e-6
    assert abs(sync_signal(torch.tensor([[1.0, 0.0]]), torch.tensor([[0.0, 1.0]])).item() - 0.5) < 1e-6
    return "1 / 0 / 0.5"


def check_detector() -> str:
    torch.manual_seed(0)
    det = Detector(DetectorConfig(embed_dim=16, heads=4)).eval()
    Fa, Fv = torch.randn(2, 7, 16), torch.randn(2, 7, 16)
    with torch.no_grad():
        out = det(Fa, Fv)
        perm = torch.randperm(7)
        out_p = det(Fa[:, perm], Fv[:, perm])
    rows = torch.stack([a.sum(-1) for a in out.attn_audio + out.attn_visual])
    assert torch.allclose(rows, torch.ones_like(rows), atol=1e-5)
    diff = (out.logit - out_p.logit).abs().max().item()
    assert diff < 1e-5, diff
    return f"permutation diff {diff:.1e}"


def check_auc() -> str:
    scores, labels = [0.8, 0.4, 0.6, 0.2], [0, 0, 1, 1]
    assert auc(scores, labels) == 0.75 == auc_pairwise(scores, labels)
    rng = np.random.default_rng(2)
    sc = rng.integers(0, 5, 40) / 4.0
    lb = np.r_[np.zeros(20), np.ones(20)]
    assert abs(auc(sc, lb) - auc_pairwise(sc, lb)) < 1e-12
    assert abs(auc(sc, lb) + auc(sc, 1 - lb) - 1.0) < 1e-12
    return "0.75 case, ties, complement"


def check_lr() -> str:
    cfg = TrainConfig()
    got = [lr_schedule(e, cfg) for e in range(3)]
    assert got == [1e-4, 9.5e-05, 9.025e-05], got
    return "1e-4, 9.5e-5, 9.025e-5"


CHECKS: dict[str, Callable[[], str]] = {
    "js_divergence": check_js,
    "losses": check_losses,
    "sync_anchors": check_sync_anchors,
    "detector_contracts": check_detector,
    "auc": check_auc,
    "lr_schedule": check_lr,
}


def run(report: Callable[[str], None] = print) -> bool:
    ok = True
    for name, fn in CHECKS.items():
        try:
            detail = fn()
            report(f"PASS {name}: {detail}")
        except AssertionError as exc:
            ok = False
            report(f"FAIL {name}: {exc}")
    return ok
