import torch
import torch.nn as nn
from pytest import mark
from pytest import raises

from miragedesk.core import LatentVolume
from miragedesk.exceptions import ConfigError
from miragedesk.exceptions import InjectionError
from miragedesk.exceptions import ShapeError
from miragedesk.injection import CrossModalFusionBlock
from miragedesk.injection import InjectionConfig
from miragedesk.injection import cmfb_fuse
from miragedesk.injection import decode_with_injection
from miragedesk.injection import encode2d_taps
from miragedesk.pipeline import MirageModel

from .conftest import random_clip
from .conftest import tiny_denoiser_config
from .conftest import tiny_model
from .conftest import tiny_vae_config

PLACEMENTS: list[str] = ["stage_output", "pre_block"]


def randomize_fusion(model: MirageModel, seed: int = 1):
    generator = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for block in model.injector.cmfbs.values():
            block.merge.weight.copy_(torch.randn(block.merge.weight.shape, generator=generator,
                                                 dtype=block.merge.weight.dtype) * 0.3)


def injected_model(placement: str, seed: int = 0) -> MirageModel:
    torch.manual_seed(seed)
    model = MirageModel(tiny_vae_config(), InjectionConfig(placement=placement, encoder2d_channels=(8, 8)),
                        tiny_denoiser_config())
    return model.to(torch.float64).eval()


def decode_with_taps(model: MirageModel, x_latent: torch.Tensor, x_taps: torch.Tensor) -> torch.Tensor:
    with torch.no_grad():
        z = model.vae.encode(x_latent)
        return model.vae.decode(z, model.injector.hook(model.injector.prepare(model.vae, x_taps)))


def test_taps_are_per_frame() -> None:
    model = tiny_model(dtype=torch.float64)
    x = random_clip(0).volume(torch.float64)
    generator = torch.Generator().manual_seed(0)
    with torch.no_grad():
        base = model.injector.encode2d_taps(x)
        for k in range(9):
            perturbed = x.clone()
            perturbed[:, :, k] = torch.rand(3, 16, 16, generator=generator, dtype=torch.float64)
            taps = model.injector.encode2d_taps(perturbed)
            for site, tap in taps.items():
                assert tap.shape[2] == 9
                for f in range(9):
                    assert torch.equal(tap[:, :, f], base[site][:, :, f]) == (f != k)


def test_tap_shapes() -> None:
    model = tiny_model()
    taps = encode2d_taps(model.injector, random_clip(1, 9, 16, 24))
    shapes = {tap.spatial_scale: tuple(t.shape) for tap, t in taps.items()}
    assert shapes == {1.0: (8, 9, 16, 24), 0.5: (8, 9, 8, 12)}


@mark.parametrize("placement", PLACEMENTS)
def test_zero_initialized_fusion_is_identity(placement: str) -> None:
    model = injected_model(placement)
    for seed in range(10):
        x = random_clip(seed).volume(torch.float64)
        with torch.no_grad():
            plain = model.vae.decode(model.vae.encode(x))
        assert torch.equal(decode_with_taps(model, x, x), plain)


@mark.parametrize("frames", [9, 13])
@mark.parametrize("placement", PLACEMENTS)
def test_injection_never_reaches_earlier_frames(placement: str, frames: int) -> None:
    model = injected_model(placement)
    randomize_fusion(model)
    x = random_clip(2, frames).volume(torch.float64)
    generator = torch.Generator().manual_seed(frames)
    base = decode_with_taps(model, x, x)
    for k in range(frames):
        perturbed = x.clone()
        perturbed[:, :, k] = torch.rand(3, 16, 16, generator=generator, dtype=torch.float64)
        out = decode_with_taps(model, x, perturbed)
        assert torch.equal(out[:, :, :k], base[:, :, :k])
        assert not torch.equal(out[:, :, k], base[:, :, k])


def test_encoder_skip_leaks_into_earlier_frames() -> None:
    model = tiny_model(mode="skip3d", dtype=torch.float64)
    randomize_fusion(model)
    x = random_clip(3).volume(torch.float64)
    base = decode_with_taps(model, x, x)
    perturbed = x.clone()
    perturbed[:, :, 2] = torch.rand(3, 16, 16, dtype=torch.float64)
    out = decode_with_taps(model, x, perturbed)
    assert not torch.allclose(out[:, :, 1], base[:, :, 1], rtol=0, atol=1e-12)


def test_plain_mode_has_no_fusion() -> None:
    model = tiny_model(mode="none")
    assert not model.injector.enabled
    assert len(model.injector.cmfbs) == 0
    assert model.injector.hook(model.injector.prepare(model.vae, random_clip(4).volume())) is None


def test_fusion_blocks_check_shapes() -> None:
    block = CrossModalFusionBlock(8, 4)
    with raises(ShapeError, match="time slices"):
        cmfb_fuse(torch.rand(1, 8, 3, 4, 4), torch.rand(1, 4, 9, 4, 4), block)
    with raises(ShapeError):
        cmfb_fuse(torch.rand(1, 8, 9, 4, 4), torch.rand(1, 4, 9, 2, 2), block)
    assert cmfb_fuse(torch.rand(8, 9, 4, 4), torch.rand(4, 9, 4, 4), block).shape == (8, 9, 4, 4)


def test_leaking_sites_rejected() -> None:
    with raises(InjectionError, match="temporal leakage site"):
        InjectionConfig(sites=("dec2",))
    with raises(ConfigError, match="dec9"):
        InjectionConfig(sites=("dec9",))
    model = tiny_model()
    z = LatentVolume(torch.rand(4, 3, 2, 2))
    with raises(InjectionError, match="temporal leakage site"):
        decode_with_injection(model.vae, model.injector, z, {"dec2": torch.rand(8, 5, 4, 4)})


def test_injected_decode_matches_model_path() -> None:
    model = tiny_model()
    randomize_fusion(model)
    clip = random_clip(5)
    z = model.vae.encode3d(clip)
    decoded = model.vae.decode3d(z, encode2d_taps(model.injector, clip), model.injector)
    expected = decode_with_taps(model, clip.volume(), clip.volume())
    assert torch.allclose(decoded.frames, expected[0].permute(1, 2, 3, 0).clamp(0, 1), atol=1e-6)


def test_fusion_block_identity_initialization() -> None:
    block = CrossModalFusionBlock(4, 3)
    assert isinstance(block.merge, nn.Conv3d)
    weight = block.merge.weight[:, :, 0, 0, 0]
    assert torch.equal(weight[:, :4], torch.eye(4))
    assert not weight[:, 4:].any()
