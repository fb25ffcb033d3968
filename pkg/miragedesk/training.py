"""
Training stages and their losses.

Stage ``P`` fits the base autoencoder and warm-starts the denoiser, stage ``A`` adapts the autoencoder to
injected per-frame features (2D encoder, fusion blocks, reconstruction adapters) and stage ``H`` tunes the
harmonization adapters through the full one-step edit path. Each stage trains exactly the parameter groups
of its freeze contract; every other parameter must stay bit-identical.
"""

from dataclasses import dataclass
from dataclasses import field
from json import dumps
from pathlib import Path
from typing import Callable
from typing import Literal
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange

from .adapters import FreezePartition
from .adapters import check_frozen_gradients
from .adapters import freeze_contract
from .core import VideoClip
from .core import make_generator
from .core import seed_everything
from .exceptions import ConfigError
from .exceptions import InputError
from .exceptions import ShapeError
from .pipeline import MirageModel
from .pipeline import TRAIN_STEPS
from .pipeline import noise_pred_loss

ClipPair = tuple[VideoClip, VideoClip]
ProgressCallback = Callable[[int, int, dict[str, float]], None]


@dataclass(frozen=True)
class StageConfig:
    stage: Literal["P", "A", "H"] = "A"
    steps: int = 10000
    lr: float = 1e-4
    lambda1: float = 0.1
    lambda2: float = 0.1
    gram_activation_step: int = 2000
    warmup_steps: int = 500
    warmup_target: Literal["lr", "gram"] = "lr"
    batch_size: int = 2
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.0
    mse_weight: float = 0.0
    perceptual_seed: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.stage not in ("P", "A", "H"):
            raise ConfigError(f"Unknown training stage {self.stage!r}")
        if self.warmup_target not in ("lr", "gram"):
            raise ConfigError(f"Unknown warmup_target {self.warmup_target!r}")
        for name in ("steps", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("lr", "lambda1", "lambda2"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("gram_activation_step", "warmup_steps", "weight_decay", "mse_weight"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must not be negative, got {getattr(self, name)}")

    def learning_rate(self, step: int) -> float:
        if self.stage == "H" and self.warmup_target == "lr" and step < self.warmup_steps:
            return self.lr / 10
        return self.lr

    def gram_weight(self, step: int) -> float:
        if step < self.gram_activation_step:
            return 0.0
        if self.warmup_target == "gram" and self.warmup_steps:
            return min(1.0, (step - self.gram_activation_step + 1) / self.warmup_steps)
        return 1.0


class PerceptualNet(nn.Module):
    """
    Fixed random-feature extractor standing in for a pretrained perceptual network. Four convolution stages
    with SiLU activations, the last three downsampling by 2. Weights are drawn from a seeded generator and
    registered as buffers, so the network never trains and never appears among model parameters.
    """

    def __init__(self, seed: int = 0, channels: tuple[int, ...] = (16, 32, 32, 64)):
        super().__init__()
        generator: torch.Generator = make_generator(seed)
        self.strides: tuple[int, ...] = tuple(1 if i == 0 else 2 for i in range(len(channels)))
        c_in: int = 3
        for i, c_out in enumerate(channels):
            fan_in: int = c_in * 9
            self.register_buffer(f"weight{i}", torch.randn(c_out, c_in, 3, 3, generator=generator) * (2 / fan_in) ** .5)
            self.register_buffer(f"bias{i}", torch.randn(c_out, generator=generator) * 0.1)
            c_in = c_out

    def raw_features(self, images: torch.Tensor) -> list[torch.Tensor]:
        h: torch.Tensor = images * 2 - 1
        features: list[torch.Tensor] = []
        for i, stride in enumerate(self.strides):
            h = F.silu(F.conv2d(h, getattr(self, f"weight{i}").to(h), getattr(self, f"bias{i}").to(h),
                                stride=stride, padding=1))
            features.append(h)
        return features

    @staticmethod
    def unit_normalize(f: torch.Tensor, eps: float = 1e-10) -> torch.Tensor:
        return f / (f.pow(2).sum(dim=1, keepdim=True).sqrt() + eps)

    def distance(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        """Per-image distance between two ``[N,3,H,W]`` batches."""
        total: torch.Tensor = torch.zeros(a.shape[0], dtype=a.dtype, device=a.device)
        for fa, fb in zip(self.raw_features(a), self.raw_features(b)):
            total = total + (self.unit_normalize(fa) - self.unit_normalize(fb)).pow(2).sum(dim=1).mean(dim=(1, 2))
        return total


_perceptual_nets: dict[int, PerceptualNet] = {}


def perceptual_net(seed: int = 0) -> PerceptualNet:
    if seed not in _perceptual_nets:
        _perceptual_nets[seed] = PerceptualNet(seed)
    return _perceptual_nets[seed]


def frames_of(x: torch.Tensor) -> torch.Tensor:
    """Frames of a ``[B,3,T,H,W]`` volume or ``[3,T,H,W]`` clip volume as an image batch."""
    if x.ndim == 4:
        x = x.unsqueeze(0)
    if x.ndim != 5 or x.shape[1] != 3:
        raise ShapeError(f"Expected a [B,3,T,H,W] volume, got {list(x.shape)}")
    return rearrange(x, "b c t h w -> (b t) c h w")


def check_same_shape(a: torch.Tensor, b: torch.Tensor):
    if a.shape != b.shape:
        raise ShapeError(f"Shape mismatch {list(a.shape)} != {list(b.shape)}")


def perceptual_distance(a: torch.Tensor, b: torch.Tensor, net: PerceptualNet | None = None) -> torch.Tensor:
    check_same_shape(a, b)
    return (net or perceptual_net()).distance(frames_of(a), frames_of(b)).mean()


def gram_matrix(features: torch.Tensor) -> torch.Tensor:
    """``F·Fᵀ / N`` for ``[C,N]`` features, batched over any leading axes."""
    if features.shape[-1] < 1:
        raise InputError("Gram matrix needs at least one feature position")
    return features @ features.transpose(-1, -2) / features.shape[-1]


def gram_loss(a: torch.Tensor, b: torch.Tensor, net: PerceptualNet | None = None) -> torch.Tensor:
    check_same_shape(a, b)
    net = net or perceptual_net()
    total: torch.Tensor = torch.zeros((), dtype=a.dtype, device=a.device)
    for fa, fb in zip(net.raw_features(frames_of(a)), net.raw_features(frames_of(b))):
        ga = gram_matrix(rearrange(fa, "n c h w -> n c (h w)"))
        gb = gram_matrix(rearrange(fb, "n c h w -> n c (h w)"))
        total = total + (ga - gb).pow(2).sum(dim=(1, 2)).mean()
    return total


def loss_vae(x_ro: torch.Tensor, x_gt: torch.Tensor, lambda1: float = 0.1, net: PerceptualNet | None = None,
             components: dict[str, float] | None = None) -> torch.Tensor:
    check_same_shape(x_ro, x_gt)
    mse = F.mse_loss(x_ro, x_gt)
    lpips = perceptual_distance(x_ro, x_gt, net)
    if components is not None:
        components |= {"mse": mse.item(), "perceptual": lpips.item()}
    return mse + lambda1 * lpips


def loss_harmon(x_dr: torch.Tensor, x_gt: torch.Tensor, step: int, cfg: StageConfig = StageConfig(stage="H"),
                net: PerceptualNet | None = None, components: dict[str, float] | None = None) -> torch.Tensor:
    check_same_shape(x_dr, x_gt)
    net = net or perceptual_net(cfg.perceptual_seed)
    loss = perceptual_distance(x_dr, x_gt, net)
    if components is not None:
        components["perceptual"] = loss.item()
    if weight := cfg.gram_weight(step):
        gram = gram_loss(x_dr, x_gt, net)
        loss = loss + weight * cfg.lambda2 * gram
        if components is not None:
            components["gram"] = gram.item()
    if cfg.mse_weight:
        mse = F.mse_loss(x_dr, x_gt)
        loss = loss + cfg.mse_weight * mse
        if components is not None:
            components["mse"] = mse.item()
    return loss


@dataclass
class TrainResult:
    stage: str
    losses: list[dict[str, float]] = field(default_factory=list)
    partition: FreezePartition | None = None

    @property
    def first_loss(self) -> float:
        return self.losses[0]["loss"]

    @property
    def last_loss(self) -> float:
        return self.losses[-1]["loss"]


class PairBatches:
    """Deterministic epoch-shuffled batches of stacked ``(x_NI, x_GT)`` volumes."""

    def __init__(self, dataset: Sequence[ClipPair], batch_size: int, seed: int, dtype: torch.dtype,
                 device: torch.device):
        if not dataset:
            raise InputError("Training dataset is empty")
        if len({tuple(p.frames.shape) for pair in dataset for p in pair}) != 1:
            raise ShapeError("All training clips must share one shape")
        self.ni: torch.Tensor = torch.cat([ni.volume(dtype) for ni, _ in dataset]).to(device)
        self.gt: torch.Tensor = torch.cat([gt.volume(dtype) for _, gt in dataset]).to(device)
        self.batch_size: int = min(batch_size, len(dataset))
        self.generator: torch.Generator = make_generator(seed)
        self.order: list[int] = []

    def next(self) -> tuple[torch.Tensor, torch.Tensor]:
        if len(self.order) < self.batch_size:
            self.order += torch.randperm(self.ni.shape[0], generator=self.generator).tolist()
        index, self.order = self.order[:self.batch_size], self.order[self.batch_size:]
        return self.ni[index], self.gt[index]


def _run_stage(model: MirageModel, dataset: Sequence[ClipPair], cfg: StageConfig,
               loss_fn: Callable[[torch.Tensor, torch.Tensor, int, dict[str, float]], torch.Tensor],
               log_file: Path | None, progress: ProgressCallback | None) -> TrainResult:
    seed_everything(cfg.seed)
    partition: FreezePartition = freeze_contract(model, cfg.stage)
    parameters: dict[str, nn.Parameter] = dict(model.named_parameters())
    trainable: list[nn.Parameter] = [parameters[n] for n in partition.trainable]
    if not trainable:
        raise ConfigError(f"Stage {cfg.stage} has no trainable parameters in this model")
    optimizer = torch.optim.AdamW(trainable, lr=cfg.learning_rate(0), betas=cfg.betas, weight_decay=cfg.weight_decay)
    param: torch.Tensor = trainable[0]
    batches: PairBatches = PairBatches(dataset, cfg.batch_size, cfg.seed, param.dtype, param.device)
    result: TrainResult = TrainResult(cfg.stage, partition=partition)
    log = log_file.open("w") if log_file else None
    model.train()
    try:
        for step in range(cfg.steps):
            lr: float = cfg.learning_rate(step)
            for group in optimizer.param_groups:
                group["lr"] = lr
            x_ni, x_gt = batches.next()
            components: dict[str, float] = {}
            optimizer.zero_grad(set_to_none=True)
            loss: torch.Tensor = loss_fn(x_ni, x_gt, step, components)
            loss.backward()
            check_frozen_gradients(model, partition)
            optimizer.step()
            entry: dict[str, float] = {"step": step, "loss": loss.item(), "lr": lr, **components}
            result.losses.append(entry)
            if log:
                log.write(dumps(entry) + "\n")
            if progress:
                progress(step + 1, cfg.steps, entry)
    finally:
        model.eval()
        if log:
            log.close()
    return result


def train_stage_p(model: MirageModel, dataset: Sequence[ClipPair], cfg: StageConfig,
                  log_file: Path | None = None, progress: ProgressCallback | None = None) -> TrainResult:
    """Fit the base autoencoder on ground-truth clips and warm-start the denoiser on their latents."""
    if cfg.stage != "P":
        raise ConfigError(f"Stage P training got a stage {cfg.stage} config")
    net: PerceptualNet = perceptual_net(cfg.perceptual_seed)
    generator: torch.Generator = make_generator(cfg.seed + 1)

    def loss_fn(_x_ni: torch.Tensor, x_gt: torch.Tensor, _step: int, components: dict[str, float]) -> torch.Tensor:
        z0 = model.vae.encode(x_gt)
        reconstruction = loss_vae(model.vae.decode(z0), x_gt, cfg.lambda1, net, components)
        t = torch.randint(0, TRAIN_STEPS, (z0.shape[0],), generator=generator).to(z0.device)
        eps = torch.randn(z0.shape, generator=generator, dtype=z0.dtype).to(z0.device)
        denoise = noise_pred_loss(model.denoiser, z0.detach(), t, eps, model.schedule)
        components["noise"] = denoise.item()
        return reconstruction + denoise

    return _run_stage(model, dataset, cfg, loss_fn, log_file, progress)


def train_stage_a(model: MirageModel, dataset: Sequence[ClipPair], cfg: StageConfig,
                  log_file: Path | None = None, progress: ProgressCallback | None = None) -> TrainResult:
    """Reconstruct ground truth from its own latent with features injected from the naive insertion."""
    if cfg.stage != "A":
        raise ConfigError(f"Stage A training got a stage {cfg.stage} config")
    net: PerceptualNet = perceptual_net(cfg.perceptual_seed)

    def loss_fn(x_ni: torch.Tensor, x_gt: torch.Tensor, _step: int, components: dict[str, float]) -> torch.Tensor:
        return loss_vae(model.forward_reconstruct(x_gt, x_ni), x_gt, cfg.lambda1, net, components)

    return _run_stage(model, dataset, cfg, loss_fn, log_file, progress)


def train_stage_h(model: MirageModel, dataset: Sequence[ClipPair], cfg: StageConfig,
                  log_file: Path | None = None, progress: ProgressCallback | None = None) -> TrainResult:
    """Tune the harmonization adapters through the one-step edit path."""
    if cfg.stage != "H":
        raise ConfigError(f"Stage H training got a stage {cfg.stage} config")
    net: PerceptualNet = perceptual_net(cfg.perceptual_seed)

    def loss_fn(x_ni: torch.Tensor, x_gt: torch.Tensor, step: int, components: dict[str, float]) -> torch.Tensor:
        return loss_harmon(model.forward_edit(x_ni), x_gt, step, cfg, net, components)

    return _run_stage(model, dataset, cfg, loss_fn, log_file, progress)
