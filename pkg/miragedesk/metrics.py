"""
Quality and temporal-consistency metrics and the evaluation protocol.

Every metric accepts a :class:`VideoClip` or a bare ``[T,H,W,3]`` frame tensor, so the same functions run on
full-resolution clips and on actor-centric crops.
"""

from dataclasses import dataclass
from dataclasses import field
from json import dumps
from math import ceil
from math import floor
from typing import Literal
from typing import Sequence
from warnings import warn

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange
from scipy.linalg import eigh

from .alignment import BBox2D
from .core import VideoClip
from .core import make_generator
from .exceptions import ConfigError
from .exceptions import InputError
from .exceptions import NumericError
from .exceptions import ShapeError
from .training import perceptual_net

EvalMode = Literal["full_resolution", "actor_centric"]
WarpNorm = Literal["mse", "mae"]
Frames = VideoClip | torch.Tensor

PSNR_CAP: float = 99.0
SSIM_WINDOW: int = 11
SSIM_SIGMA: float = 1.5
SSIM_C1: float = 0.01 ** 2
SSIM_C2: float = 0.03 ** 2
REC601: tuple[float, float, float] = (0.299, 0.587, 0.114)
METRIC_NAMES: tuple[str, ...] = ("psnr", "ssim", "perceptual", "e_warp")
# direction in which each metric improves
HIGHER_IS_BETTER: dict[str, bool] = {"psnr": True, "ssim": True, "perceptual": False, "e_warp": False, "vfid": False}


@dataclass(frozen=True)
class MetricsConfig:
    mode: EvalMode = "full_resolution"
    margin: float = 0.1
    warp_norm: WarpNorm = "mse"
    feature_seed: int = 0
    perceptual_seed: int = 0

    def __post_init__(self):
        if self.mode not in ("full_resolution", "actor_centric"):
            raise ConfigError(f"Unknown evaluation mode {self.mode!r}")
        if self.warp_norm not in ("mse", "mae"):
            raise ConfigError(f"Unknown warp_norm {self.warp_norm!r}")
        if self.margin < 0:
            raise ConfigError(f"margin must not be negative, got {self.margin}")


def frames_of(x: Frames) -> torch.Tensor:
    frames: torch.Tensor = x.frames if isinstance(x, VideoClip) else x
    if frames.ndim != 4 or frames.shape[-1] != 3:
        raise ShapeError(f"Frames must be [T,H,W,3], got {list(frames.shape)}")
    return frames.to(torch.float64)


def paired_frames(a: Frames, b: Frames) -> tuple[torch.Tensor, torch.Tensor]:
    fa, fb = frames_of(a), frames_of(b)
    if fa.shape != fb.shape:
        raise ShapeError(f"Cannot compare clips of shape {list(fa.shape)} and {list(fb.shape)}")
    return fa, fb


def psnr(a: Frames, b: Frames) -> float:
    fa, fb = paired_frames(a, b)
    mse: torch.Tensor = (fa - fb).pow(2).mean(dim=(1, 2, 3))
    values: torch.Tensor = torch.where(mse > 0, 10 * torch.log10(1 / mse), torch.full_like(mse, torch.inf))
    return float(values.clamp(max=PSNR_CAP).mean())


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> torch.Tensor:
    x: torch.Tensor = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g: torch.Tensor = torch.exp(-x ** 2 / (2 * sigma ** 2))
    g = g / g.sum()
    return torch.outer(g, g)[None, None]


def luma(frames: torch.Tensor) -> torch.Tensor:
    return rearrange(frames @ torch.tensor(REC601, dtype=frames.dtype), "t h w -> t 1 h w")


def ssim(a: Frames, b: Frames) -> float:
    fa, fb = paired_frames(a, b)
    if min(fa.shape[1:3]) < SSIM_WINDOW:
        raise InputError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {fa.shape[1]}x{fa.shape[2]}")
    x, y = luma(fa), luma(fb)
    window: torch.Tensor = gaussian_window()
    mu_x, mu_y = F.conv2d(x, window), F.conv2d(y, window)
    sigma_xx: torch.Tensor = F.conv2d(x * x, window) - mu_x * mu_x
    sigma_yy: torch.Tensor = F.conv2d(y * y, window) - mu_y * mu_y
    sigma_xy: torch.Tensor = F.conv2d(x * y, window) - mu_x * mu_y
    value: torch.Tensor = ((2 * mu_x * mu_y + SSIM_C1) * (2 * sigma_xy + SSIM_C2)) / \
                          ((mu_x * mu_x + mu_y * mu_y + SSIM_C1) * (sigma_xx + sigma_yy + SSIM_C2))
    return float(value.mean())


def backward_warp(frames: torch.Tensor, flow: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Sample ``frames`` at ``p + flow(p)`` bilinearly; also returns where the sample lies inside the image."""
    t, h, w, _ = frames.shape
    ys, xs = torch.meshgrid(torch.arange(h, dtype=torch.float64), torch.arange(w, dtype=torch.float64), indexing="ij")
    sx, sy = xs + flow[..., 0].to(torch.float64), ys + flow[..., 1].to(torch.float64)
    grid: torch.Tensor = torch.stack([2 * sx / max(w - 1, 1) - 1, 2 * sy / max(h - 1, 1) - 1], dim=-1)
    warped: torch.Tensor = F.grid_sample(rearrange(frames, "t h w c -> t c h w"), grid, mode="bilinear",
                                         padding_mode="zeros", align_corners=True)
    inside: torch.Tensor = (sx >= 0) & (sx <= w - 1) & (sy >= 0) & (sy <= h - 1)
    return rearrange(warped, "t c h w -> t h w c"), inside


def warp_error(x: Frames, flow: torch.Tensor, mask: torch.Tensor | None = None, norm: WarpNorm = "mse") -> float:
    """Mean over consecutive pairs of the masked difference between frame ``t`` and frame ``t+1`` warped back."""
    frames: torch.Tensor = frames_of(x)
    t, h, w, _ = frames.shape
    if tuple(flow.shape) != (t - 1, h, w, 2):
        raise ShapeError(f"Flow must be [{t - 1},{h},{w},2] for this clip, got {list(flow.shape)}")
    if mask is None:
        warn("Flow has no validity mask, treating every in-image pixel as valid")
        mask = torch.ones(t - 1, h, w, dtype=torch.bool)
    elif tuple(mask.shape) != (t - 1, h, w):
        raise ShapeError(f"Mask must be [{t - 1},{h},{w}], got {list(mask.shape)}")
    warped, inside = backward_warp(frames[1:], flow)
    valid: torch.Tensor = mask.to(torch.bool) & inside
    diff: torch.Tensor = warped - frames[:-1]
    diff = diff.pow(2) if norm == "mse" else diff.abs()
    errors: list[float] = [float(d[v].mean()) for d, v in zip(diff, valid) if v.any()]
    return float(np.mean(errors)) if errors else 0.0


def psd_sqrt(matrix: np.ndarray, tolerance: float = 1e-8) -> np.ndarray:
    values, vectors = eigh(matrix)
    if values.min() < -tolerance * max(1.0, abs(values.max())):
        raise NumericError(f"Matrix has a negative eigenvalue {values.min():.3g}")
    return (vectors * np.sqrt(np.clip(values, 0, None))) @ vectors.T


def _trace_sqrt_product(cov_a: np.ndarray, cov_b: np.ndarray) -> float:
    root_a: np.ndarray = psd_sqrt(cov_a)
    inner: np.ndarray = root_a @ cov_b @ root_a
    values: np.ndarray = eigh((inner + inner.T) / 2, eigvals_only=True)
    if values.min() < -1e-8 * max(1.0, abs(values.max())):
        raise NumericError(f"Covariance product has a negative eigenvalue {values.min():.3g}")
    return float(np.sqrt(np.clip(values, 0, None)).sum())


def gaussian_fit(features: np.ndarray, name: str) -> tuple[np.ndarray, np.ndarray]:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or len(features) < 2:
        raise InputError(f"Feature set {name} needs at least 2 vectors, got shape {list(features.shape)}")
    cov: np.ndarray = np.atleast_2d(np.cov(features, rowvar=False))
    if not np.isfinite(cov).all():
        raise NumericError(f"Feature set {name} has a non-finite covariance")
    return features.mean(axis=0), cov


def frechet_distance(feats_a: np.ndarray, feats_b: np.ndarray) -> float:
    mu_a, cov_a = gaussian_fit(feats_a, "a")
    mu_b, cov_b = gaussian_fit(feats_b, "b")
    if mu_a.shape != mu_b.shape:
        raise ShapeError(f"Feature sets differ in dimension: {mu_a.shape[0]} != {mu_b.shape[0]}")
    # symmetrized so that swapping the sets gives the same value bit for bit
    cross: float = _trace_sqrt_product(cov_a, cov_b) + _trace_sqrt_product(cov_b, cov_a)
    value: float = float(((mu_a - mu_b) ** 2).sum() + np.trace(cov_a + cov_b) - cross)
    return max(value, 0.0)


class VideoFeatureNet(nn.Module):
    """Fixed-seed 3D convolution network whose pooled activations describe a clip."""

    def __init__(self, seed: int = 0, channels: tuple[int, ...] = (8, 16, 32)):
        super().__init__()
        generator: torch.Generator = make_generator(seed)
        c_in: int = 3
        for i, c_out in enumerate(channels):
            self.register_buffer(f"weight{i}", torch.randn(c_out, c_in, 3, 3, 3, generator=generator) *
                                 (2 / (c_in * 27)) ** .5)
            c_in = c_out
        self.depth: int = len(channels)

    @torch.no_grad()
    def features(self, x: Frames) -> np.ndarray:
        h: torch.Tensor = rearrange(frames_of(x), "t h w c -> 1 c t h w") * 2 - 1
        for i in range(self.depth):
            h = F.silu(F.conv3d(h, getattr(self, f"weight{i}").to(h), stride=(1, 2, 2) if i else 1, padding=1))
        return torch.cat([h.mean(dim=(2, 3, 4)), h.std(dim=(2, 3, 4))], dim=1)[0].numpy()


def perceptual(a: Frames, b: Frames, seed: int = 0) -> float:
    fa, fb = paired_frames(a, b)
    with torch.no_grad():
        return float(perceptual_net(seed).distance(rearrange(fa, "t h w c -> t c h w"),
                                                   rearrange(fb, "t h w c -> t c h w")).mean())


def crop_box(boxes: Sequence[BBox2D], size: tuple[int, int], margin: float = 0.1) -> tuple[int, int, int, int]:
    """Integer ``(x0, y0, x1, y1)`` of the margin-expanded union box, clamped to an image of ``size = (H, W)``."""
    if not boxes:
        raise InputError("Actor crop needs at least one box")
    height, width = size
    union: BBox2D = boxes[0]
    for box in boxes[1:]:
        union = union.union(box)
    dx, dy = margin * union.width, margin * union.height
    x0, y0 = max(0, floor(union.x_min - dx)), max(0, floor(union.y_min - dy))
    x1, y1 = min(width, ceil(union.x_max + dx)), min(height, ceil(union.y_max + dy))
    if x1 - x0 < 1 or y1 - y0 < 1:
        raise InputError(f"Degenerate crop box {[x0, y0, x1, y1]} for boxes {union.as_list()}")
    return x0, y0, x1, y1


def actor_crop(clip: Frames, boxes: Sequence[BBox2D], margin: float = 0.1
               ) -> tuple[torch.Tensor, tuple[int, int, int, int]]:
    frames: torch.Tensor = clip.frames if isinstance(clip, VideoClip) else clip
    x0, y0, x1, y1 = box = crop_box(boxes, (frames.shape[1], frames.shape[2]), margin)
    return frames[:, y0:y1, x0:x1], box


@dataclass
class MetricReport:
    mode: EvalMode
    clips: dict[str, dict[str, float]] = field(default_factory=dict)
    crop_boxes: dict[str, list[int]] = field(default_factory=dict)
    vfid: float | None = None

    @property
    def aggregate(self) -> dict[str, float]:
        names: list[str] = [n for n in METRIC_NAMES if self.clips and all(n in v for v in self.clips.values())]
        values: dict[str, float] = {n: float(np.mean([v[n] for v in self.clips.values()])) for n in names}
        if self.vfid is not None:
            values["vfid"] = self.vfid
        return values

    def to_dict(self) -> dict:
        return {"mode": self.mode, "clips": dict(sorted(self.clips.items())), "aggregate": self.aggregate,
                "crop_boxes": dict(sorted(self.crop_boxes.items()))}

    def to_json(self) -> str:
        return dumps(self.to_dict(), indent=2)


def evaluate_clip(pred: Frames, gt: Frames, cfg: MetricsConfig = MetricsConfig(), flow: torch.Tensor | None = None,
                  mask: torch.Tensor | None = None) -> dict[str, float]:
    values: dict[str, float] = {"psnr": psnr(pred, gt), "ssim": ssim(pred, gt),
                                "perceptual": perceptual(pred, gt, cfg.perceptual_seed)}
    if flow is not None:
        values["e_warp"] = warp_error(pred, flow, mask, cfg.warp_norm)
    return values


def evaluate(pairs: dict[str, tuple[VideoClip, VideoClip]], cfg: MetricsConfig = MetricsConfig(),
             boxes: dict[str, Sequence[BBox2D]] | None = None,
             flows: dict[str, tuple[torch.Tensor, torch.Tensor | None]] | None = None) -> MetricReport:
    """
    Score every ``(prediction, ground truth)`` pair. Actor-centric mode crops both clips to the same
    margin-expanded union box and skips the warping error, whose flow is defined on full frames.
    """
    report: MetricReport = MetricReport(cfg.mode)
    net: VideoFeatureNet = VideoFeatureNet(cfg.feature_seed)
    pred_features: list[np.ndarray] = []
    gt_features: list[np.ndarray] = []
    for name in sorted(pairs):
        pred, gt = pairs[name]
        pred_frames, gt_frames = paired_frames(pred, gt)
        flow, mask = (flows or {}).get(name, (None, None))
        if cfg.mode == "actor_centric":
            if not (clip_boxes := (boxes or {}).get(name)):
                raise InputError(f"Actor-centric evaluation needs boxes for clip {name!r}")
            pred_frames, box = actor_crop(pred_frames, clip_boxes, cfg.margin)
            gt_frames, _ = actor_crop(gt_frames, clip_boxes, cfg.margin)
            report.crop_boxes[name] = list(box)
            flow = None
        report.clips[name] = evaluate_clip(pred_frames, gt_frames, cfg, flow, mask)
        pred_features.append(net.features(pred_frames))
        gt_features.append(net.features(gt_frames))
    if len(pairs) >= 2:
        report.vfid = frechet_distance(np.stack(pred_features), np.stack(gt_features))
    return report
