from __future__ import annotations

import math

import numpy as np
import pytest
import torch
from oracles import bce, contra_loop, cosine_sync, dist_loop, total_loop

from xmodal.errors import ContractError
from xmodal.losses import (
    LossBreakdown,
    loss_cls,
    loss_cls_from_logit,
    loss_contra,
    loss_dist,
    sync_signal,
    total_from_breakdowns,
    total_loss,
)

D64 = torch.float64


def t(x):
    return torch.tensor(np.asarray(x), dtype=D64)


def test_cls_hand_case_ln2():
    assert abs(loss_cls(t([0.5]), t([1.0])).item() - math.log(2.0)) < 1e-12
    assert abs(loss_cls(t([0.5]), t([0.0])).item() - math.log(2.0)) < 1e-12


def test_cls_clamps_saturated_predictions():
    v = loss_cls(t([0.0, 1.0]), t([1.0, 0.0]))
    assert torch.isfinite(v).all()
    assert v[0].item() == pytest.approx(-math.log(1e-7), rel=1e-9)


def test_cls_from_logit_matches_probability_form():
    z = torch.linspace(-6, 6, 13, dtype=D64)
    y = (torch.arange(13) % 2).to(D64)
    torch.testing.assert_close(loss_cls_from_logit(z, y), loss_cls(torch.sigmoid(z), y), rtol=0, atol=1e-15)


def test_contra_hand_case_fake_half_distance():
    sync, cont = t([[0.25, 0.5, 0.0]]), t([[0.75, 1.0, 0.5]])
    assert abs(loss_contra(sync, cont, t([0.0]), margin=1.0).item() - 0.25) < 1e-12


def test_contra_real_pulls_together():
    sync, cont = t([[0.25]]), t([[0.75]])
    assert abs(loss_contra(sync, cont, t([1.0])).item() - 0.25) < 1e-12
    assert loss_contra(cont, cont, t([1.0])).item() == 0.0


def test_contra_fake_beyond_margin_is_zero():
    assert loss_contra(t([[0.0]]), t([[1.0]]), t([0.0]), margin=0.8).item() == 0.0


def test_dist_equals_cross_entropy_at_target():
    # BCE(s; c) is minimised at s = c where it equals the binary entropy of c.
    c = 0.3
    ent = -(c * math.log(c) + (1 - c) * math.log(1 - c))
    assert loss_dist(t([[c]]), t([[c]])).item() == pytest.approx(ent, abs=1e-12)


def test_random_instances_match_scalar_loops():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        T = int(rng.integers(1, 12))
        sync, cont = rng.uniform(0, 1, T), rng.uniform(0, 1, T)
        y = float(rng.integers(0, 2))
        m = float(rng.uniform(0.2, 1.5))
        s = float(rng.uniform(0, 1))
        got = [
            loss_cls(t([s]), t([y])).item(),
            loss_dist(t([sync]), t([cont])).item(),
            loss_contra(t([sync]), t([cont]), t([y]), margin=m).item(),
        ]
        ref = [bce(s, y), dist_loop(sync, cont), contra_loop(sync, cont, y, m)]
        worst = max(worst, max(abs(a - b) for a, b in zip(got, ref)))
    assert worst < 1e-9


def test_total_is_batch_mean_of_sum():
    rng = np.random.default_rng(1)
    for _ in range(200):
        B = int(rng.integers(1, 9))
        a, b, c = rng.uniform(0, 3, (3, B))
        assert abs(total_loss(t(a), t(b), t(c)).item() - total_loop(a, b, c)) < 1e-9
    items = [LossBreakdown(0.1, 0.2, 0.3), LossBreakdown(1.0, 0.0, 0.5)]
    assert total_from_breakdowns(items) == pytest.approx((0.6 + 1.5) / 2, abs=1e-12)


def test_total_weights():
    one = t([1.0])
    assert total_loss(one, 2 * one, 4 * one, weights=(1.0, 0.5, 0.25)).item() == 3.0


def test_empty_batch_rejected():
    e = torch.zeros(0)
    with pytest.raises(ContractError):
        total_loss(e, e, e)
    with pytest.raises(ContractError):
        total_from_breakdowns([])


def test_length_mismatch_rejected():
    with pytest.raises(ContractError):
        loss_dist(t([[0.5, 0.5]]), t([[0.5]]))
    with pytest.raises(ContractError):
        loss_contra(t([[0.5, 0.5]]), t([[0.5]]), t([1.0]))


def test_mask_ignores_padding():
    sync = t([[0.2, 0.7, 0.9, 0.1]])
    cont = t([[0.4, 0.6, 0.0, 1.0]])
    mask = torch.tensor([[True, True, False, False]])
    assert loss_dist(sync, cont, mask).item() == pytest.approx(dist_loop([0.2, 0.7], [0.4, 0.6]), abs=1e-12)
    got = loss_contra(sync, cont, t([0.0]), mask=mask).item()
    assert got == pytest.approx(contra_loop([0.2, 0.7], [0.4, 0.6], 0.0), abs=1e-12)


def test_sequence_mode_uses_one_distance():
    sync, cont = t([[0.2, 0.4]]), t([[0.5, 0.0]])
    d = math.hypot(0.3, 0.4)
    assert loss_contra(sync, cont, t([1.0]), mode="sequence").item() == pytest.approx(d * d, abs=1e-12)
    assert loss_contra(sync, cont, t([0.0]), mode="sequence").item() == pytest.approx((1 - d) ** 2, abs=1e-12)
    with pytest.raises(ValueError):
        loss_contra(sync, cont, t([0.0]), mode="bogus")


# sync signal -----------------------------------------------------------------


def test_sync_anchor_cases():
    v = t([[1.0, -2.0, 0.5]])
    assert sync_signal(v, 3 * v).item() == pytest.approx(1.0, abs=1e-12)
    assert sync_signal(v, -v).item() == pytest.approx(0.0, abs=1e-12)
    assert sync_signal(t([[1.0, 0.0]]), t([[0.0, 2.0]])).item() == pytest.approx(0.5, abs=1e-12)


def test_sync_zero_norm_is_half():
    out = sync_signal(t([[0.0, 0.0], [1.0, 1.0]]), t([[1.0, 2.0], [1.0, 1.0]]))
    assert out.tolist() == pytest.approx([0.5, 1.0])


def test_sync_matches_loop_and_stays_in_unit_interval():
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=(3, 7, 16)), rng.normal(size=(3, 7, 16))
    got = sync_signal(t(a), t(b)).numpy()
    assert got.min() >= 0 and got.max() <= 1
    for i in range(3):
        for j in range(7):
            assert abs(got[i, j] - cosine_sync(a[i, j], b[i, j])) < 1e-12


def test_sync_shape_mismatch():
    with pytest.raises(ContractError):
        sync_signal(torch.zeros(2, 3, 4), torch.zeros(2, 3, 5))


# finite differences ---------------------------------------------------------------


def _fd_check(fn, x, h=1e-6):
    x = x.clone().requires_grad_(True)
    fn(x).backward()
    analytic = x.grad.clone()
    numeric = torch.zeros_like(x)
    flat = x.detach().reshape(-1)
    for i in range(flat.numel()):
        xp, xm = flat.clone(), flat.clone()
        xp[i] += h
        xm[i] -= h
        numeric.view(-1)[i] = (fn(xp.view_as(x)) - fn(xm.view_as(x))) / (2 * h)
    return (analytic - numeric).norm().item() / max(numeric.norm().item(), 1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_dist_gradient_matches_finite_differences(seed):
    g = torch.Generator().manual_seed(seed)
    sync = torch.rand(3, 6, generator=g, dtype=D64) * 0.9 + 0.05
    cont = torch.rand(3, 6, generator=g, dtype=D64)
    assert _fd_check(lambda s: loss_dist(s, cont).sum(), sync) < 1e-4


@pytest.mark.parametrize("seed", range(5))
def test_contra_gradient_matches_finite_differences(seed):
    g = torch.Generator().manual_seed(seed)
    sync = torch.rand(4, 6, generator=g, dtype=D64)
    cont = torch.rand(4, 6, generator=g, dtype=D64)
    y = t([1.0, 0.0, 1.0, 0.0])
    margin = 0.6
    # keep every |d - margin| away from the kink
    assert ((cont - sync).abs() - margin).abs().min() > 1e-4
    assert _fd_check(lambda s: loss_contra(s, cont, y, margin).sum(), sync) < 1e-4
