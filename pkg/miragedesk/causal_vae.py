"""
Causal 3D video autoencoder.

Every temporal convolution pads ``kt - 1`` replicated first frames on the past side and nothing on the
future side, and normalization statistics are taken per frame, so the latent slice ``j`` never sees frames
outside ``{0} ∪ {1..4j}`` and the decoded frame ``f`` never sees latent slices past
``frame_to_latent_index(f)``.

Stage layout for a 9-frame clip ``[C,T,H,W]``::

    Enc-1 [c1, 9, H,   W  ]    Dec-1 [d1, 3, H/8, W/8]
    Enc-2 [c2, 5, H/2, W/2]    Dec-2 [d2, 5, H/4, W/4]
    Enc-3 [c3, 3, H/4, W/4]    Dec-3 [d3, 9, H/2, W/2]
    Enc-4 [c4, 3, H/8, W/8]    Dec-4 [d4, 9, H,   W  ]
"""

from dataclasses import dataclass
from typing import Callable
from typing import Literal

import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange

from .core import LatentVolume
from .core import SPATIAL_FACTOR
from .core import TEMPORAL_FACTOR
from .core import VideoClip
from .core import check_clip_length
from .exceptions import ConfigError
from .exceptions import ShapeError

InjectionHook = Callable[[str, str, torch.Tensor], torch.Tensor]

ENCODER_STAGES: tuple[str, ...] = ("enc1", "enc2", "enc3", "enc4")
DECODER_STAGES: tuple[str, ...] = ("dec1", "dec2", "dec3", "dec4")
_encoder_time_compress: tuple[bool, ...] = (False, True, True, False)
_decoder_time_expand: tuple[bool, ...] = (False, True, True, False)


@dataclass(frozen=True)
class VaeConfig:
    encoder_channels: tuple[int, int, int, int] = (16, 16, 32, 32)
    decoder_channels: tuple[int, int, int, int] = (32, 32, 16, 16)
    latent_channels: int = 4
    norm_groups: int = 4
    spatial_factor: int = SPATIAL_FACTOR
    temporal_factor: int = TEMPORAL_FACTOR

    def __post_init__(self):
        if self.spatial_factor != SPATIAL_FACTOR or self.temporal_factor != TEMPORAL_FACTOR:
            raise ConfigError(f"Only {SPATIAL_FACTOR}x spatial and {TEMPORAL_FACTOR}x temporal compression "
                              f"are supported, got {self.spatial_factor}x/{self.temporal_factor}x")
        if len(self.encoder_channels) != 4 or len(self.decoder_channels) != 4:
            raise ConfigError("encoder_channels and decoder_channels need four stages each")
        for c in (*self.encoder_channels, *self.decoder_channels):
            if c <= 0 or c % self.norm_groups:
                raise ConfigError(f"Channel width {c} is not a positive multiple of norm_groups={self.norm_groups}")
        if self.latent_channels <= 0:
            raise ConfigError(f"latent_channels must be positive, got {self.latent_channels}")


def downsampled_length(t: int) -> int:
    """Length after a stride-2 causal convolution with kernel 3 and two past padding frames."""
    return (t - 1) // 2 + 1


def upsampled_length(t: int) -> int:
    """Length after repeating every frame twice and dropping the duplicated first frame."""
    return 2 * t - 1


def temporal_schedule(cfg: VaeConfig, t: int, part: Literal["encoder", "decoder"] = "encoder"
                      ) -> list[tuple[int, int]]:
    check_clip_length(t)
    schedule: list[tuple[int, int]] = []
    if part == "encoder":
        for channels, compress in zip(cfg.encoder_channels, _encoder_time_compress):
            t = downsampled_length(t) if compress else t
            schedule.append((channels, t))
    elif part == "decoder":
        t = 1 + (t - 1) // TEMPORAL_FACTOR
        for channels, expand in zip(cfg.decoder_channels, _decoder_time_expand):
            t = upsampled_length(t) if expand else t
            schedule.append((channels, t))
    else:
        raise ValueError(f"Unknown part {part!r}")
    return schedule


def stage_shapes(cfg: VaeConfig, t: int, h: int, w: int) -> dict[str, tuple[int, int, int, int]]:
    shapes: dict[str, tuple[int, int, int, int]] = {}
    for i, (name, (c, ts)) in enumerate(zip(ENCODER_STAGES, temporal_schedule(cfg, t, "encoder"))):
        shapes[name] = (c, ts, h // 2 ** i, w // 2 ** i)
    for i, (name, (c, ts)) in enumerate(zip(DECODER_STAGES, temporal_schedule(cfg, t, "decoder"))):
        shapes[name] = (c, ts, h // 2 ** (3 - i), w // 2 ** (3 - i))
    return shapes


class CausalConv3d(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, kernel: int | tuple[int, int, int] = 3,
                 stride: int | tuple[int, int, int] = 1, bias: bool = True):
        super().__init__()
        kernel = (kernel,) * 3 if isinstance(kernel, int) else tuple(kernel)
        stride = (stride,) * 3 if isinstance(stride, int) else tuple(stride)
        self.kernel: tuple[int, int, int] = kernel
        self.stride: tuple[int, int, int] = stride
        self.time_pad: int = kernel[0] - 1
        self.height_pad: int = kernel[1] // 2
        self.width_pad: int = kernel[2] // 2
        self.conv = nn.Conv3d(in_channels, out_channels, kernel, stride=stride, bias=bias)

    @property
    def in_channels(self) -> int:
        return self.conv.in_channels

    @property
    def out_channels(self) -> int:
        return self.conv.out_channels

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.time_pad or self.height_pad or self.width_pad:
            x = F.pad(x, (self.width_pad, self.width_pad, self.height_pad, self.height_pad, self.time_pad, 0),
                      mode="replicate")
        return self.conv(x)


class FrameGroupNorm(nn.GroupNorm):
    """Group normalization with statistics per sample and per frame."""

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        t: int = x.shape[2]
        return rearrange(super().forward(rearrange(x, "b c t h w -> (b t) c h w")), "(b t) c h w -> b c t h w", t=t)


class ResBlock3d(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, groups: int):
        super().__init__()
        self.norm1 = FrameGroupNorm(groups, in_channels)
        self.conv1 = CausalConv3d(in_channels, out_channels, 3)
        self.norm2 = FrameGroupNorm(groups, out_channels)
        self.conv2 = CausalConv3d(out_channels, out_channels, 3)
        self.shortcut = CausalConv3d(in_channels, out_channels, 1) if in_channels != out_channels else nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.conv2(F.silu(self.norm2(h)))
        return self.shortcut(x) + h


class Downsample3d(nn.Module):
    def __init__(self, channels: int, compress_time: bool):
        super().__init__()
        self.compress_time: bool = compress_time
        self.spatial_conv = CausalConv3d(channels, channels, (1, 3, 3), stride=(1, 2, 2))
        self.temporal_conv = CausalConv3d(channels, channels, (3, 1, 1), stride=(2, 1, 1)) if compress_time else None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.spatial_conv(x)
        return self.temporal_conv(x) if self.temporal_conv is not None else x


class Upsample3d(nn.Module):
    def __init__(self, channels: int, expand_time: bool):
        super().__init__()
        self.expand_time: bool = expand_time
        self.temporal_conv = CausalConv3d(channels, channels, (3, 1, 1)) if expand_time else None
        self.spatial_conv = CausalConv3d(channels, channels, (1, 3, 3))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.temporal_conv is not None:
            # frame n of the output repeats input frame ceil(n/2)
            x = x.repeat_interleave(2, dim=2)[:, :, 1:]
            x = x + self.temporal_conv(x)
        t: int = x.shape[2]
        x = rearrange(F.interpolate(rearrange(x, "b c t h w -> (b t) c h w"), scale_factor=2.0, mode="nearest"),
                      "(b t) c h w -> b c t h w", t=t)
        return x + self.spatial_conv(x)


class Encoder3d(nn.Module):
    def __init__(self, cfg: VaeConfig):
        super().__init__()
        c = cfg.encoder_channels
        self.conv_in = CausalConv3d(3, c[0], 3)
        self.stages = nn.ModuleDict()
        for i, (name, compress) in enumerate(zip(ENCODER_STAGES, _encoder_time_compress)):
            c_in = c[max(i - 1, 0)]
            self.stages[name] = nn.ModuleDict({
                "down": Downsample3d(c_in, compress) if i else nn.Identity(),
                "block": ResBlock3d(c_in, c[i], cfg.norm_groups),
            })
        self.norm_out = FrameGroupNorm(cfg.norm_groups, c[-1])
        self.conv_out = CausalConv3d(c[-1], cfg.latent_channels, 3)

    def forward(self, x: torch.Tensor, features: dict[str, torch.Tensor] | None = None) -> torch.Tensor:
        h = self.conv_in(x * 2 - 1)
        for name, stage in self.stages.items():
            h = stage["block"](stage["down"](h))
            if features is not None:
                features[name] = h
        return self.conv_out(F.silu(self.norm_out(h)))


class Decoder3d(nn.Module):
    def __init__(self, cfg: VaeConfig):
        super().__init__()
        d = cfg.decoder_channels
        self.conv_in = CausalConv3d(cfg.latent_channels, d[0], 3)
        self.stages = nn.ModuleDict()
        for i, (name, expand) in enumerate(zip(DECODER_STAGES, _decoder_time_expand)):
            c_in = d[max(i - 1, 0)]
            self.stages[name] = nn.ModuleDict({
                "up": Upsample3d(c_in, expand) if i else nn.Identity(),
                "block": ResBlock3d(c_in, d[i], cfg.norm_groups),
            })
        self.norm_out = FrameGroupNorm(cfg.norm_groups, d[-1])
        self.conv_out = CausalConv3d(d[-1], 3, 3)

    def forward(self, z: torch.Tensor, inject: InjectionHook | None = None,
                features: dict[str, torch.Tensor] | None = None) -> torch.Tensor:
        h = self.conv_in(z)
        for name, stage in self.stages.items():
            h = stage["up"](h)
            if inject is not None:
                h = inject(name, "pre_block", h)
            h = stage["block"](h)
            if inject is not None:
                h = inject(name, "stage_output", h)
            if features is not None:
                features[name] = h
        return (self.conv_out(F.silu(self.norm_out(h))) + 1) / 2


class CausalVae(nn.Module):
    def __init__(self, cfg: VaeConfig = VaeConfig()):
        super().__init__()
        self.config: VaeConfig = cfg
        self.encoder = Encoder3d(cfg)
        self.decoder = Decoder3d(cfg)

    def check_input(self, x: torch.Tensor):
        if x.ndim != 5 or x.shape[1] != 3:
            raise ShapeError(f"Expected a [B,3,T,H,W] volume, got {list(x.shape)}")
        check_clip_length(x.shape[2])
        if x.shape[3] % SPATIAL_FACTOR or x.shape[4] % SPATIAL_FACTOR:
            raise ShapeError(f"Height and width must be divisible by {SPATIAL_FACTOR}, got {list(x.shape[3:])}")

    def check_latent(self, z: torch.Tensor):
        if z.ndim != 5 or z.shape[1] != self.config.latent_channels:
            raise ShapeError(f"Expected a [B,{self.config.latent_channels},T',h,w] latent, got {list(z.shape)}")

    def encode(self, x: torch.Tensor, features: dict[str, torch.Tensor] | None = None) -> torch.Tensor:
        self.check_input(x)
        return self.encoder(x, features)

    def decode(self, z: torch.Tensor, inject: InjectionHook | None = None,
               features: dict[str, torch.Tensor] | None = None) -> torch.Tensor:
        self.check_latent(z)
        return self.decoder(z, inject, features)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.decode(self.encode(x))

    @torch.no_grad()
    def encode3d(self, x: VideoClip) -> LatentVolume:
        param: torch.Tensor = next(self.parameters())
        z = LatentVolume(self.encode(x.volume(param.dtype).to(param.device))[0])
        z.check_source(x)
        return z

    @torch.no_grad()
    def decode3d(self, z: LatentVolume, taps: dict | None = None, injector: nn.Module | None = None,
                 fps: float = 10.0) -> VideoClip:
        if taps:
            if injector is None:
                raise ShapeError("Injected taps need the injector that owns the fusion blocks")
            from .injection import decode_with_injection
            return decode_with_injection(self, injector, z, taps, fps=fps)
        return VideoClip.from_volume(self.decode(z.batched()), fps)
