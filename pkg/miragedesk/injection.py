"""
Temporally agnostic latent injection.

A per-frame 2D encoder turns every frame of the naive-insertion clip into high-frequency feature maps
(frames are folded into the batch axis and unfolded back into time, so no frame ever sees another one).
Cross-modal fusion blocks concatenate those maps with decoder features and merge them back with a
``1×1×1`` convolution. Fusion only happens at decoder stages whose temporal axis is one-to-one with the
output frames, which makes the temporal isolation of the injected features structural.

The ``skip3d`` mode wires 3D encoder features straight into the decoder instead. It is kept as the
reference anti-pattern: its temporal axis is resampled from the compressed encoder schedule, so a change
at frame ``k`` leaks into earlier output frames.
"""

from dataclasses import dataclass
from typing import Literal

import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange

from .causal_vae import CausalVae
from .causal_vae import DECODER_STAGES
from .causal_vae import InjectionHook
from .core import LatentVolume
from .core import VideoClip
from .exceptions import ConfigError
from .exceptions import InjectionError
from .exceptions import ShapeError

InjectionMode = Literal["inject", "none", "skip3d"]
Placement = Literal["stage_output", "pre_block"]

# decoder stage -> spatial scale of its features relative to the clip
SITE_SCALES: dict[str, float] = {"dec1": 1 / 8, "dec2": 1 / 4, "dec3": 1 / 2, "dec4": 1.0}
FRAME_ALIGNED_SITES: tuple[str, ...] = ("dec3", "dec4")
SKIP_SOURCE: str = "enc2"
SKIP_SITE: str = "dec3"


@dataclass(frozen=True)
class Tap:
    stage: int
    spatial_scale: float
    channels: int


@dataclass(frozen=True)
class InjectionConfig:
    mode: InjectionMode = "inject"
    placement: Placement = "stage_output"
    sites: tuple[str, ...] = FRAME_ALIGNED_SITES
    encoder2d_channels: tuple[int, int] = (16, 16)
    norm_groups: int = 4

    def __post_init__(self):
        if self.mode not in ("inject", "none", "skip3d"):
            raise ConfigError(f"Unknown injection mode {self.mode!r}")
        if self.placement not in ("stage_output", "pre_block"):
            raise ConfigError(f"Unknown injection placement {self.placement!r}")
        if unknown := [s for s in self.sites if s not in SITE_SCALES]:
            raise ConfigError(f"Unknown injection site {unknown[0]!r}")
        if leaking := [s for s in self.sites if s not in FRAME_ALIGNED_SITES]:
            raise InjectionError(f"temporal leakage site: {leaking[0]} has fewer time slices than frames")
        if len(self.encoder2d_channels) != 2:
            raise ConfigError("encoder2d_channels needs one width per tap scale")

    @property
    def taps(self) -> dict[str, Tap]:
        return {site: Tap(stage=0 if SITE_SCALES[site] == 1 else 1, spatial_scale=SITE_SCALES[site],
                          channels=self.encoder2d_channels[0 if SITE_SCALES[site] == 1 else 1])
                for site in self.sites}


class ResBlock2d(nn.Module):
    def __init__(self, channels: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, channels)
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm2 = nn.GroupNorm(groups, channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        return x + self.conv2(F.silu(self.norm2(h)))


class Encoder2d(nn.Module):
    """Per-image encoder with feature taps at full and half resolution."""

    def __init__(self, channels: tuple[int, int], groups: int):
        super().__init__()
        self.conv_in = nn.Conv2d(3, channels[0], 3, padding=1)
        self.block0 = ResBlock2d(channels[0], groups)
        self.down = nn.Conv2d(channels[0], channels[1], 3, stride=2, padding=1)
        self.block1 = ResBlock2d(channels[1], groups)

    def forward(self, images: torch.Tensor) -> list[torch.Tensor]:
        h0 = self.block0(self.conv_in(images * 2 - 1))
        h1 = self.block1(self.down(h0))
        return [h0, h1]


class CrossModalFusionBlock(nn.Module):
    def __init__(self, decoder_channels: int, tap_channels: int):
        super().__init__()
        self.decoder_channels: int = decoder_channels
        self.tap_channels: int = tap_channels
        self.merge = nn.Conv3d(decoder_channels + tap_channels, decoder_channels, 1)
        self.reset_parameters()

    @torch.no_grad()
    def reset_parameters(self):
        # decoder side passes through, tap side starts silent
        self.merge.weight.zero_()
        self.merge.weight[:, :self.decoder_channels, 0, 0, 0] = torch.eye(self.decoder_channels)
        self.merge.bias.zero_()

    def forward(self, z3d: torch.Tensor, tap: torch.Tensor) -> torch.Tensor:
        return cmfb_fuse(z3d, tap, self)


def cmfb_fuse(z3d: torch.Tensor, tap: torch.Tensor, block: CrossModalFusionBlock) -> torch.Tensor:
    if z3d.ndim == 4:
        return cmfb_fuse(z3d.unsqueeze(0), tap.unsqueeze(0), block)[0]
    if z3d.shape[2] != tap.shape[2]:
        raise ShapeError(f"Cannot fuse features with {tap.shape[2]} time slices into a decoder stage with "
                         f"{z3d.shape[2]}")
    if z3d.shape[0] != tap.shape[0] or z3d.shape[3:] != tap.shape[3:]:
        raise ShapeError(f"Tap {list(tap.shape)} does not match decoder features {list(z3d.shape)}")
    return block.merge(torch.cat([z3d, tap], dim=1))


class LatentInjector(nn.Module):
    def __init__(self, cfg: InjectionConfig, vae: CausalVae):
        super().__init__()
        self.config: InjectionConfig = cfg
        decoder_channels: dict[str, int] = dict(zip(DECODER_STAGES, vae.config.decoder_channels))
        self.encoder2d: Encoder2d | None = None
        self.cmfbs = nn.ModuleDict()
        if cfg.mode == "inject":
            self.encoder2d = Encoder2d(cfg.encoder2d_channels, cfg.norm_groups)
            for site, tap in cfg.taps.items():
                self.cmfbs[site] = CrossModalFusionBlock(decoder_channels[site], tap.channels)
        elif cfg.mode == "skip3d":
            self.cmfbs[SKIP_SITE] = CrossModalFusionBlock(decoder_channels[SKIP_SITE], vae.config.encoder_channels[1])

    @property
    def enabled(self) -> bool:
        return self.config.mode != "none"

    def encode2d_taps(self, x: torch.Tensor) -> dict[str, torch.Tensor]:
        """Per-frame features of a ``[B,3,T,H,W]`` volume, keyed by decoder site, each ``[B,C,T,h,w]``."""
        if self.encoder2d is None:
            return {}
        b, _, t, _, _ = x.shape
        levels: list[torch.Tensor] = self.encoder2d(rearrange(x, "b c t h w -> (b t) c h w"))
        return {site: rearrange(levels[tap.stage], "(b t) c h w -> b c t h w", b=b, t=t)
                for site, tap in self.config.taps.items()}

    def skip_features(self, vae: CausalVae, x: torch.Tensor) -> dict[str, torch.Tensor]:
        features: dict[str, torch.Tensor] = {}
        vae.encode(x, features)
        source: torch.Tensor = features[SKIP_SOURCE]
        for _ in range(2):
            source = source.repeat_interleave(2, dim=2)[:, :, 1:]
        # the 3D encoder skip has the compressed temporal schedule, stretched to the decoder's frames
        return {SKIP_SITE: source[:, :, :x.shape[2]]}

    def prepare(self, vae: CausalVae, x: torch.Tensor) -> dict[str, torch.Tensor]:
        if self.config.mode == "inject":
            return self.encode2d_taps(x)
        elif self.config.mode == "skip3d":
            return self.skip_features(vae, x)
        return {}

    def hook(self, taps: dict[str, torch.Tensor]) -> InjectionHook | None:
        if not taps:
            return None
        if missing := [s for s in self.cmfbs if s not in taps]:
            raise ShapeError(f"Missing tap for injection site {missing[0]!r}")
        placement: Placement = self.config.placement

        def inject(stage: str, point: str, h: torch.Tensor) -> torch.Tensor:
            if point != placement or stage not in self.cmfbs:
                return h
            if (tap := taps[stage]).shape[2] != h.shape[2]:
                raise InjectionError(f"temporal leakage site: {stage} has {h.shape[2]} time slices, "
                                     f"tap has {tap.shape[2]}")
            return self.cmfbs[stage](h, tap)

        return inject


def encode2d_taps(injector: LatentInjector, x: VideoClip) -> dict[Tap, torch.Tensor]:
    param: torch.Tensor = next(injector.parameters())
    with torch.no_grad():
        taps = injector.encode2d_taps(x.volume(param.dtype).to(param.device))
    return {injector.config.taps[site]: tensor[0] for site, tensor in taps.items()}


def taps_by_site(injector: LatentInjector, taps: dict) -> dict[str, torch.Tensor]:
    by_tap: dict[Tap, str] = {tap: site for site, tap in injector.config.taps.items()}
    resolved: dict[str, torch.Tensor] = {}
    for key, tensor in taps.items():
        site: str = by_tap.get(key, key) if isinstance(key, Tap) else key
        if site not in SITE_SCALES:
            raise InjectionError(f"Tap {key!r} does not map to a decoder site")
        resolved[site] = tensor if tensor.ndim == 5 else tensor.unsqueeze(0)
    return resolved


@torch.no_grad()
def decode_with_injection(vae: CausalVae, injector: LatentInjector, z: LatentVolume, taps: dict,
                          fps: float = 10.0) -> VideoClip:
    resolved: dict[str, torch.Tensor] = taps_by_site(injector, taps)
    if leaking := [s for s in resolved if s not in FRAME_ALIGNED_SITES]:
        raise InjectionError(f"temporal leakage site: {leaking[0]}")
    return VideoClip.from_volume(vae.decode(z.batched(), injector.hook(resolved)), fps)
