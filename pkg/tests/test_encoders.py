from __future__ import annotations

import pytest
import torch

from xmodal.encoders import PRESETS, AudioEncoder, EncoderConfig, VisualEncoder
from xmodal.errors import ConfigError, ContractError


@pytest.fixture(scope="module")
def tiny():
    torch.manual_seed(0)
    cfg = EncoderConfig.from_preset("tiny")
    return AudioEncoder(cfg).eval(), VisualEncoder(cfg).eval(), cfg


@pytest.mark.parametrize("B, T", [(1, 1), (2, 3), (3, 8)])
def test_shapes_follow_batch_and_time(tiny, B, T):
    audio, visual, cfg = tiny
    with torch.no_grad():
        Fa = audio(torch.randn(B, 4 * T, 13))
        Fv = visual(torch.rand(B, T, 112, 112))
    assert Fa.shape == Fv.shape == (B, T, cfg.embed_dim)


def test_embed_dim_override():
    cfg = EncoderConfig.from_preset("tiny", embed_dim=24)
    assert AudioEncoder(cfg).eval()(torch.randn(1, 8, 13)).shape == (1, 2, 24)


def test_full_size_preset_dimensions():
    cfg = EncoderConfig.from_preset("paper")
    assert cfg.embed_dim == 128
    assert cfg.audio_arch.blocks == (3, 4, 6, 3)
    torch.manual_seed(0)
    with torch.no_grad():
        assert AudioEncoder(cfg).eval()(torch.randn(1, 8, 13)).shape == (1, 2, 128)
        assert VisualEncoder(cfg).eval()(torch.rand(1, 2, 112, 112)).shape == (1, 2, 128)


def test_unknown_preset():
    assert set(PRESETS) >= {"tiny", "paper"}
    with pytest.raises(ConfigError):
        EncoderConfig.from_preset("huge")


@pytest.mark.parametrize("shape", [(1, 7, 13), (1, 8, 12), (8, 13)])
def test_audio_rejects_bad_shapes(tiny, shape):
    with pytest.raises(ContractError):
        tiny[0](torch.randn(*shape))


def test_visual_rejects_bad_shapes(tiny):
    with pytest.raises(ContractError):
        tiny[1](torch.rand(1, 2, 64, 64))


def _directional_fd(fn, x, h=1e-6):
    g = torch.Generator().manual_seed(1)
    direction = torch.randn(x.shape, generator=g, dtype=x.dtype)
    x = x.clone().requires_grad_(True)
    fn(x).backward()
    analytic = (x.grad * direction).sum().item()
    numeric = ((fn(x.detach() + h * direction) - fn(x.detach() - h * direction)) / (2 * h)).item()
    return abs(analytic - numeric) / max(abs(numeric), 1e-12)


def test_encoder_gradients_match_finite_differences(tiny):
    audio, visual, _ = tiny
    audio, visual = audio.double(), visual.double()
    probe_a = torch.randn(1, 2, 32, dtype=torch.float64)
    probe_v = torch.randn(1, 2, 32, dtype=torch.float64)
    err_a = _directional_fd(lambda m: (audio(m) * probe_a).sum(), torch.randn(1, 8, 13, dtype=torch.float64))
    err_v = _directional_fd(lambda f: (visual(f) * probe_v).sum(), torch.rand(1, 2, 112, 112, dtype=torch.float64))
    audio.float(), visual.float()
    assert err_a < 1e-3 and err_v < 1e-3
