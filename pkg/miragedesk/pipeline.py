"""
One-step editing path.

The naive-insertion latent is treated as the noised latent at a fixed timestep; a single denoiser pass
predicts its noise and the closed-form inversion of the forward process recovers the clean latent, which
is decoded with the per-frame injected features of the input clip.
"""

from dataclasses import dataclass
from dataclasses import field
from math import cos
from math import log
from math import pi
from pathlib import Path
from time import perf_counter

import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange

from .adapters import AdapterSpec
from .adapters import adapter_state
from .adapters import attach
from .adapters import attached_specs
from .adapters import base_state
from .causal_vae import CausalVae
from .causal_vae import VaeConfig
from .core import LatentVolume
from .core import TensorContainer
from .core import VideoClip
from .core import dataclass_from_json
from .core import dataclass_to_json
from .core import make_generator
from .exceptions import ConfigError
from .exceptions import LoadError
from .exceptions import ShapeError
from .injection import InjectionConfig
from .injection import LatentInjector

TRAIN_STEPS: int = 1000
EDIT_TIMESTEP: int = 199
CHECKPOINT_COMPONENTS: tuple[str, ...] = ("vae", "injector", "denoiser", "adapters")


@dataclass(frozen=True)
class DenoiserConfig:
    latent_channels: int = 4
    patch: tuple[int, int, int] = (1, 2, 2)
    width: int = 128
    depth: int = 4
    heads: int = 4
    frequency_dim: int = 256
    mlp_ratio: float = 4.0
    timestep: int = EDIT_TIMESTEP
    noise_augment: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.width % self.heads:
            raise ConfigError(f"width={self.width} is not divisible by heads={self.heads}")
        if self.width % 2 or (self.width - 4 * (self.width // 6)) % 2:
            raise ConfigError(f"width={self.width} cannot be split into even positional embedding axes")
        if len(self.patch) != 3 or any(p < 1 for p in self.patch):
            raise ConfigError(f"Invalid patch size {self.patch}")
        if not 0 <= self.timestep < TRAIN_STEPS:
            raise ConfigError(f"timestep {self.timestep} outside the schedule [0, {TRAIN_STEPS})")


class NoiseSchedule:
    def __init__(self, alphas_cumprod: torch.Tensor):
        alphas_cumprod = alphas_cumprod.to(torch.float64)
        if alphas_cumprod.ndim != 1 or not bool(((alphas_cumprod > 0) & (alphas_cumprod <= 1)).all()):
            raise ConfigError("Cumulative signal factors must lie in (0, 1]")
        if bool((alphas_cumprod[1:] >= alphas_cumprod[:-1]).any()):
            raise ConfigError("Cumulative signal factors must be strictly decreasing")
        self.alphas_cumprod: torch.Tensor = alphas_cumprod

    @classmethod
    def cosine(cls, steps: int = TRAIN_STEPS, s: float = 0.008, max_beta: float = 0.999) -> "NoiseSchedule":
        def f(t: float) -> float:
            return cos((t / steps + s) / (1 + s) * pi / 2) ** 2

        betas = torch.tensor([min(1 - f(i + 1) / f(i), max_beta) for i in range(steps)], dtype=torch.float64)
        return cls(torch.cumprod(1 - betas, dim=0))

    def __len__(self) -> int:
        return self.alphas_cumprod.shape[0]

    def check_timestep(self, t: int):
        if not 0 <= t < len(self):
            raise ConfigError(f"timestep {t} outside the schedule [0, {len(self)})")

    def signal(self, t: int) -> float:
        self.check_timestep(t)
        return self.alphas_cumprod[t].sqrt().item()

    def noise(self, t: int) -> float:
        self.check_timestep(t)
        return (1 - self.alphas_cumprod[t]).sqrt().item()


def add_noise_tensor(schedule: NoiseSchedule, z0: torch.Tensor, t: int, eps: torch.Tensor) -> torch.Tensor:
    if z0.shape != eps.shape:
        raise ShapeError(f"Noise {list(eps.shape)} does not match latent {list(z0.shape)}")
    return schedule.signal(t) * z0 + schedule.noise(t) * eps


def add_noise(z0: LatentVolume, t: int, eps: torch.Tensor, schedule: NoiseSchedule | None = None) -> LatentVolume:
    return LatentVolume(add_noise_tensor(schedule or NoiseSchedule.cosine(), z0.data, t, eps))


def invert_noise_tensor(schedule: NoiseSchedule, z_t: torch.Tensor, t: int, eps: torch.Tensor) -> torch.Tensor:
    return (z_t - schedule.noise(t) * eps) / schedule.signal(t)


def sincos_embedding(dim: int, positions: torch.Tensor, max_period: float = 10000.0) -> torch.Tensor:
    omega = torch.exp(-log(max_period) * torch.arange(dim // 2, dtype=torch.float64) / (dim / 2))
    out = positions.to(torch.float64).reshape(-1, 1) * omega.reshape(1, -1)
    return torch.cat([torch.sin(out), torch.cos(out)], dim=1)


def sincos_embedding_3d(width: int, grid: tuple[int, int, int]) -> torch.Tensor:
    """Positional embedding ``[t*h*w, width]`` split across the time, height and width axes."""
    dh = dw = 2 * (width // 6)
    dt = width - dh - dw
    t, h, w = torch.meshgrid(*(torch.arange(n) for n in grid), indexing="ij")
    return torch.cat([sincos_embedding(dt, t), sincos_embedding(dh, h), sincos_embedding(dw, w)], dim=1)


def modulate(x: torch.Tensor, shift: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    return x * (1 + scale.unsqueeze(1)) + shift.unsqueeze(1)


class TimestepEmbedder(nn.Module):
    def __init__(self, width: int, frequency_dim: int):
        super().__init__()
        self.frequency_dim: int = frequency_dim
        self.mlp = nn.Sequential(nn.Linear(frequency_dim, width), nn.SiLU(), nn.Linear(width, width))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        return self.mlp(sincos_embedding(self.frequency_dim, t).to(self.mlp[0].weight))


class Attention(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.heads: int = heads
        self.q = nn.Linear(width, width)
        self.k = nn.Linear(width, width)
        self.v = nn.Linear(width, width)
        self.out = nn.Linear(width, width)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        q, k, v = (rearrange(p(x), "b n (h d) -> b h n d", h=self.heads) for p in (self.q, self.k, self.v))
        return self.out(rearrange(F.scaled_dot_product_attention(q, k, v), "b h n d -> b n (h d)"))


class DenoiserBlock(nn.Module):
    def __init__(self, width: int, heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(width, elementwise_affine=False, eps=1e-6)
        self.attn = Attention(width, heads)
        self.norm2 = nn.LayerNorm(width, elementwise_affine=False, eps=1e-6)
        self.mlp = nn.Sequential(nn.Linear(width, int(width * mlp_ratio)), nn.GELU(approximate="tanh"),
                                 nn.Linear(int(width * mlp_ratio), width))
        self.modulation = nn.Sequential(nn.SiLU(), nn.Linear(width, 6 * width))

    def forward(self, x: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        shift_msa, scale_msa, gate_msa, shift_mlp, scale_mlp, gate_mlp = self.modulation(c).chunk(6, dim=1)
        x = x + gate_msa.unsqueeze(1) * self.attn(modulate(self.norm1(x), shift_msa, scale_msa))
        return x + gate_mlp.unsqueeze(1) * self.mlp(modulate(self.norm2(x), shift_mlp, scale_mlp))


class Denoiser(nn.Module):
    """Spatiotemporal patch transformer predicting the noise of a latent volume."""

    def __init__(self, cfg: DenoiserConfig = DenoiserConfig()):
        super().__init__()
        self.config: DenoiserConfig = cfg
        pt, ph, pw = cfg.patch
        self.patch_embed = nn.Linear(cfg.latent_channels * pt * ph * pw, cfg.width)
        self.condition = nn.Parameter(torch.zeros(cfg.width))
        self.t_embedder = TimestepEmbedder(cfg.width, cfg.frequency_dim)
        self.blocks = nn.ModuleList(DenoiserBlock(cfg.width, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth))
        self.norm_out = nn.LayerNorm(cfg.width, elementwise_affine=False, eps=1e-6)
        self.modulation_out = nn.Sequential(nn.SiLU(), nn.Linear(cfg.width, 2 * cfg.width))
        self.proj_out = nn.Linear(cfg.width, cfg.latent_channels * pt * ph * pw)
        self.forward_calls: int = 0
        self.initialize_weights()

    def initialize_weights(self):
        for module in self.modules():
            if isinstance(module, nn.Linear):
                nn.init.xavier_uniform_(module.weight)
                nn.init.zeros_(module.bias)
        nn.init.normal_(self.t_embedder.mlp[0].weight, std=0.02)
        nn.init.normal_(self.t_embedder.mlp[2].weight, std=0.02)
        nn.init.normal_(self.condition, std=0.02)
        for block in self.blocks:
            nn.init.zeros_(block.modulation[-1].weight)
            nn.init.zeros_(block.modulation[-1].bias)
        nn.init.zeros_(self.modulation_out[-1].weight)
        nn.init.zeros_(self.modulation_out[-1].bias)
        nn.init.zeros_(self.proj_out.weight)
        nn.init.zeros_(self.proj_out.bias)

    def check_latent(self, z: torch.Tensor):
        if z.ndim != 5 or z.shape[1] != self.config.latent_channels:
            raise ShapeError(f"Expected a [B,{self.config.latent_channels},T',h,w] latent, got {list(z.shape)}")
        if any(n % p for n, p in zip(z.shape[2:], self.config.patch)):
            raise ShapeError(f"Latent dims {list(z.shape[2:])} are not divisible by patch {self.config.patch}")

    def forward(self, z: torch.Tensor, t: torch.Tensor | int) -> torch.Tensor:
        self.check_latent(z)
        self.forward_calls += 1
        pt, ph, pw = self.config.patch
        b, _, tt, h, w = z.shape
        grid: tuple[int, int, int] = (tt // pt, h // ph, w // pw)
        if isinstance(t, int):
            t = torch.full((b,), t, device=z.device)
        x = self.patch_embed(rearrange(z, "b c (t pt) (h ph) (w pw) -> b (t h w) (pt ph pw c)", pt=pt, ph=ph, pw=pw))
        x = x + sincos_embedding_3d(self.config.width, grid).to(x) + self.condition
        c = self.t_embedder(t)
        for block in self.blocks:
            x = block(x, c)
        shift, scale = self.modulation_out(c).chunk(2, dim=1)
        x = self.proj_out(modulate(self.norm_out(x), shift, scale))
        return rearrange(x, "b (t h w) (pt ph pw c) -> b c (t pt) (h ph) (w pw)",
                         t=grid[0], h=grid[1], w=grid[2], pt=pt, ph=ph, pw=pw)


def one_step_denoise(denoiser: Denoiser, z_ni: LatentVolume, t: int = EDIT_TIMESTEP,
                     schedule: NoiseSchedule | None = None) -> LatentVolume:
    schedule = schedule or NoiseSchedule.cosine()
    schedule.check_timestep(t)
    with torch.no_grad():
        eps = denoiser(z_ni.batched(), t)[0]
    return LatentVolume(invert_noise_tensor(schedule, z_ni.data, t, eps))


def noise_pred_loss(denoiser: nn.Module, z0: torch.Tensor, t: torch.Tensor | int, eps: torch.Tensor,
                    schedule: NoiseSchedule | None = None) -> torch.Tensor:
    schedule = schedule or NoiseSchedule.cosine()
    if isinstance(t, int):
        z_t = add_noise_tensor(schedule, z0, t, eps)
    else:
        if z0.shape != eps.shape:
            raise ShapeError(f"Noise {list(eps.shape)} does not match latent {list(z0.shape)}")
        ab = schedule.alphas_cumprod.to(z0.device)[t].to(z0.dtype).reshape(-1, *[1] * (z0.ndim - 1))
        z_t = ab.sqrt() * z0 + (1 - ab).sqrt() * eps
    return F.mse_loss(denoiser(z_t, t), eps)


@dataclass
class EditResult:
    x_dr: VideoClip
    z_dr: LatentVolume
    timings: dict[str, float] = field(default_factory=dict)


class MirageModel(nn.Module):
    def __init__(self, vae_config: VaeConfig = VaeConfig(), injection_config: InjectionConfig = InjectionConfig(),
                 denoiser_config: DenoiserConfig | None = None):
        super().__init__()
        denoiser_config = denoiser_config or DenoiserConfig(latent_channels=vae_config.latent_channels)
        if denoiser_config.latent_channels != vae_config.latent_channels:
            raise ConfigError(f"Denoiser latent_channels={denoiser_config.latent_channels} does not match "
                              f"VAE latent_channels={vae_config.latent_channels}")
        self.vae = CausalVae(vae_config)
        self.injector = LatentInjector(injection_config, self.vae)
        self.denoiser = Denoiser(denoiser_config)
        self.schedule: NoiseSchedule = NoiseSchedule.cosine()
        self.adapter_specs: dict[str, AdapterSpec] = {}

    @property
    def timestep(self) -> int:
        return self.denoiser.config.timestep

    def noised_input(self, z_ni: torch.Tensor) -> torch.Tensor:
        if not self.denoiser.config.noise_augment:
            return z_ni
        eps = torch.randn(z_ni.shape, generator=make_generator(self.denoiser.config.seed), dtype=z_ni.dtype)
        return add_noise_tensor(self.schedule, z_ni, self.timestep, eps.to(z_ni.device))

    def denoise_tensor(self, z_ni: torch.Tensor) -> torch.Tensor:
        z_t = self.noised_input(z_ni)
        return invert_noise_tensor(self.schedule, z_t, self.timestep, self.denoiser(z_t, self.timestep))

    def forward_edit(self, x_ni: torch.Tensor) -> torch.Tensor:
        """Differentiable edit of a ``[B,3,T,H,W]`` volume."""
        taps = self.injector.prepare(self.vae, x_ni)
        return self.vae.decode(self.denoise_tensor(self.vae.encode(x_ni)), self.injector.hook(taps))

    def forward_reconstruct(self, x_gt: torch.Tensor, x_ni: torch.Tensor) -> torch.Tensor:
        taps = self.injector.prepare(self.vae, x_ni)
        return self.vae.decode(self.vae.encode(x_gt), self.injector.hook(taps))

    @torch.no_grad()
    def edit(self, x_ni: VideoClip) -> EditResult:
        timings: dict[str, float] = {}
        param: torch.Tensor = next(self.parameters())
        x = x_ni.volume(param.dtype).to(param.device)

        start: float = perf_counter()
        z_ni = self.vae.encode(x)
        taps = self.injector.prepare(self.vae, x)
        timings["encode"] = perf_counter() - start

        start = perf_counter()
        z_dr = self.denoise_tensor(z_ni)
        timings["denoise"] = perf_counter() - start

        start = perf_counter()
        x_dr = self.vae.decode(z_dr, self.injector.hook(taps))
        timings["decode"] = perf_counter() - start

        return EditResult(VideoClip.from_volume(x_dr, x_ni.fps), LatentVolume(z_dr[0]), timings)


def component_containers(model: MirageModel, metadata: dict[str, str] | None = None) -> dict[str, TensorContainer]:
    metadata = metadata or {}
    return {
        "vae": TensorContainer(base_state(model.vae), {**metadata, "config": dataclass_to_json(model.vae.config)}),
        "injector": TensorContainer(base_state(model.injector),
                                    {**metadata, "config": dataclass_to_json(model.injector.config)}),
        "denoiser": TensorContainer(base_state(model.denoiser),
                                    {**metadata, "config": dataclass_to_json(model.denoiser.config)}),
        "adapters": TensorContainer(adapter_state(model), {
            **metadata, **{f"spec.{n}": s.to_json() for n, s in attached_specs(model).items()}}),
    }


def save_checkpoint(model: MirageModel, folder: Path, metadata: dict[str, str] | None = None):
    folder.mkdir(parents=True, exist_ok=True)
    for name, container in component_containers(model, metadata).items():
        container.save(folder / f"{name}.mrg")


def checkpoint_metadata(folder: Path) -> dict[str, str]:
    return TensorContainer.load(component_path(folder, "vae")).metadata


def component_path(folder: Path, name: str) -> Path:
    if not (path := folder / f"{name}.mrg").is_file():
        raise LoadError(f"Missing checkpoint component {name!r} in {str(folder)!r}")
    return path


def load_checkpoint(folder: Path, injection_config: InjectionConfig | None = None) -> MirageModel:
    containers: dict[str, TensorContainer] = {n: TensorContainer.load(component_path(folder, n))
                                              for n in CHECKPOINT_COMPONENTS}
    model = MirageModel(dataclass_from_json(VaeConfig, containers["vae"].metadata["config"]),
                        injection_config or dataclass_from_json(InjectionConfig,
                                                                containers["injector"].metadata["config"]),
                        dataclass_from_json(DenoiserConfig, containers["denoiser"].metadata["config"]))
    for key, value in containers["adapters"].metadata.items():
        if key.startswith("spec."):
            attach(model, AdapterSpec.from_json(value))
    for name in ("vae", "injector", "denoiser"):
        try:
            getattr(model, name).load_state_dict(containers[name].tensors, strict=False)
        except RuntimeError as err:
            raise LoadError(f"Checkpoint component {name!r} does not fit the model: {err}") from err
        expected: set[str] = {n for n in getattr(model, name).state_dict() if ".adapters." not in n}
        if missing := sorted(expected - set(containers[name].tensors)):
            raise LoadError(f"Checkpoint component {name!r} is missing {missing[0]!r}")
    if missing := sorted(set(adapter_state(model)) - set(containers["adapters"].tensors)):
        raise LoadError(f"Checkpoint component 'adapters' is missing {missing[0]!r}")
    model.load_state_dict(containers["adapters"].tensors, strict=False)
    return model
