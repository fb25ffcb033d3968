from pathlib import Path

import torch
from pytest import fixture

from miragedesk.causal_vae import VaeConfig
from miragedesk.core import VideoClip
from miragedesk.core import make_generator
from miragedesk.injection import InjectionConfig
from miragedesk.pipeline import DenoiserConfig
from miragedesk.pipeline import MirageModel
from miragedesk.synth import SceneSpec

TINY_CONFIG: str = """
[data]
scenes = 2
frames = 5
height = 32
width = 48
gaussians = 48
max_pan = 1

[vae]
encoder_channels = 8, 8, 8, 8
decoder_channels = 8, 8, 8, 8

[injection]
encoder2d_channels = 8, 8

[pipeline]
width = 24
depth = 1
heads = 2
frequency_dim = 32

[training]
steps = 2
batch_size = 1
gram_activation_step = 1
warmup_steps = 1
"""


def random_clip(seed: int = 0, frames: int = 9, height: int = 16, width: int = 16) -> VideoClip:
    return VideoClip(torch.rand(frames, height, width, 3, generator=make_generator(seed)))


def tiny_model(seed: int = 0, mode: str = "inject", dtype: torch.dtype = torch.float32) -> MirageModel:
    torch.manual_seed(seed)
    model = MirageModel(tiny_vae_config(), InjectionConfig(mode=mode, encoder2d_channels=(8, 8)),
                        tiny_denoiser_config())
    return model.to(dtype).eval()


def tiny_vae_config() -> VaeConfig:
    return VaeConfig(encoder_channels=(8, 8, 8, 8), decoder_channels=(8, 8, 8, 8))


def tiny_denoiser_config() -> DenoiserConfig:
    return DenoiserConfig(width=24, depth=1, heads=2, frequency_dim=32)


@fixture
def tiny_scene_spec() -> SceneSpec:
    return SceneSpec(frames=5, height=32, width=48, focal=40.0, object_gaussians=48, asset_gaussians=48, max_pan=1)


@fixture
def tiny_config(tmp_path: Path) -> Path:
    (path := tmp_path / "tiny.ini").write_text(TINY_CONFIG)
    return path
