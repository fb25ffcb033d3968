from pathlib import Path

import torch
from pytest import raises

from miragedesk.adapters import attach_stage_adapters
from miragedesk.adapters import attached_specs
from miragedesk.core import LatentVolume
from miragedesk.core import TensorContainer
from miragedesk.exceptions import ConfigError
from miragedesk.exceptions import LoadError
from miragedesk.exceptions import ShapeError
from miragedesk.pipeline import DenoiserConfig
from miragedesk.pipeline import EDIT_TIMESTEP
from miragedesk.pipeline import NoiseSchedule
from miragedesk.pipeline import add_noise
from miragedesk.pipeline import checkpoint_metadata
from miragedesk.pipeline import invert_noise_tensor
from miragedesk.pipeline import load_checkpoint
from miragedesk.pipeline import noise_pred_loss
from miragedesk.pipeline import one_step_denoise
from miragedesk.pipeline import save_checkpoint
from miragedesk.pipeline import sincos_embedding_3d

from .conftest import random_clip
from .conftest import tiny_model


def test_cosine_schedule() -> None:
    schedule = NoiseSchedule.cosine()
    assert len(schedule) == 1000
    assert bool((schedule.alphas_cumprod[1:] < schedule.alphas_cumprod[:-1]).all())
    for t in (0, EDIT_TIMESTEP, 999):
        assert abs(schedule.signal(t) ** 2 + schedule.noise(t) ** 2 - 1) < 1e-12
    assert 0.9 < schedule.signal(EDIT_TIMESTEP) < 1
    with raises(ConfigError):
        schedule.signal(1000)
    with raises(ConfigError, match="decreasing"):
        NoiseSchedule(torch.tensor([0.5, 0.7]))


def test_noise_inversion() -> None:
    schedule = NoiseSchedule.cosine()
    z0 = LatentVolume(torch.rand(4, 3, 2, 2, dtype=torch.float64))
    eps = torch.randn(4, 3, 2, 2, dtype=torch.float64)
    z_t = add_noise(z0, EDIT_TIMESTEP, eps, schedule)
    assert torch.allclose(invert_noise_tensor(schedule, z_t.data, EDIT_TIMESTEP, eps), z0.data, atol=1e-12)
    with raises(ShapeError):
        add_noise(z0, EDIT_TIMESTEP, eps[:2], schedule)


def test_one_step_denoise_calls_once() -> None:
    model = tiny_model()
    z = LatentVolume(torch.rand(4, 3, 2, 2))
    calls = model.denoiser.forward_calls
    out = one_step_denoise(model.denoiser, z)
    assert model.denoiser.forward_calls == calls + 1
    assert out.data.shape == z.data.shape
    with raises(ConfigError):
        one_step_denoise(model.denoiser, z, t=1000)


def test_edit_is_one_step() -> None:
    model = tiny_model()
    clip = random_clip(0)
    calls = model.denoiser.forward_calls
    result = model.edit(clip)
    assert model.denoiser.forward_calls == calls + 1
    assert result.x_dr.frames.shape == clip.frames.shape
    assert result.z_dr.data.shape == (4, 3, 2, 2)
    assert set(result.timings) == {"encode", "denoise", "decode"}
    assert all(v >= 0 for v in result.timings.values())


def test_fresh_denoiser_predicts_zero_noise() -> None:
    model = tiny_model()
    z = torch.rand(2, 4, 3, 2, 2)
    assert not model.denoiser(z, EDIT_TIMESTEP).any()
    assert noise_pred_loss(model.denoiser, z, torch.tensor([10, 500]), torch.zeros_like(z)).item() == 0


def test_noise_pred_loss_gradients() -> None:
    model = tiny_model(dtype=torch.float64)
    generator = torch.Generator().manual_seed(3)
    with torch.no_grad():
        for parameter in model.denoiser.parameters():
            parameter.copy_(torch.randn(parameter.shape, generator=generator, dtype=torch.float64) * 0.2)
    z0 = torch.rand(2, 4, 1, 2, 2, generator=generator, dtype=torch.float64).requires_grad_(True)
    eps = torch.randn(2, 4, 1, 2, 2, generator=generator, dtype=torch.float64).requires_grad_(True)
    t = torch.tensor([10, 500])
    assert torch.autograd.gradcheck(lambda z, e: noise_pred_loss(model.denoiser, z, t, e), (z0, eps))
    assert torch.autograd.gradcheck(lambda z, e: noise_pred_loss(model.denoiser, z, EDIT_TIMESTEP, e), (z0, eps))
    grad, = torch.autograd.grad(noise_pred_loss(model.denoiser, z0, t, eps), z0)
    assert grad.abs().sum() > 0


def test_denoiser_input_checks() -> None:
    model = tiny_model()
    with raises(ShapeError, match="divisible by patch"):
        model.denoiser(torch.rand(1, 4, 3, 3, 2), EDIT_TIMESTEP)
    with raises(ShapeError):
        model.denoiser(torch.rand(1, 3, 3, 2, 2), EDIT_TIMESTEP)


def test_denoiser_config_validation() -> None:
    with raises(ConfigError, match="timestep"):
        DenoiserConfig(timestep=1000)
    with raises(ConfigError, match="heads"):
        DenoiserConfig(width=30, heads=4)
    assert sincos_embedding_3d(24, (3, 2, 2)).shape == (12, 24)


def test_checkpoint_round_trip(tmp_path: Path) -> None:
    model = tiny_model(3)
    attach_stage_adapters(model, "A")
    with torch.no_grad():
        for parameter in model.parameters():
            parameter.add_(torch.randn_like(parameter) * 0.01)
    save_checkpoint(model, tmp_path / "ckpt", {"stage": "A"})
    loaded = load_checkpoint(tmp_path / "ckpt").eval()
    assert checkpoint_metadata(tmp_path / "ckpt")["stage"] == "A"
    assert set(attached_specs(loaded)) == {"recon"}
    clip = random_clip(4)
    assert torch.allclose(loaded.edit(clip).x_dr.frames, model.edit(clip).x_dr.frames, atol=1e-6)


def test_checkpoint_missing_component(tmp_path: Path) -> None:
    save_checkpoint(tiny_model(), tmp_path)
    (tmp_path / "denoiser.mrg").unlink()
    with raises(LoadError, match="Missing checkpoint component 'denoiser'"):
        load_checkpoint(tmp_path)


def test_checkpoint_missing_tensor(tmp_path: Path) -> None:
    save_checkpoint(tiny_model(), tmp_path)
    container = TensorContainer.load(tmp_path / "vae.mrg")
    del container.tensors["decoder.conv_out.conv.weight"]
    container.save(tmp_path / "vae.mrg")
    with raises(LoadError, match="decoder.conv_out.conv.weight"):
        load_checkpoint(tmp_path)
