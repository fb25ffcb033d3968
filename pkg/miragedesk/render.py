"""
Minimal Gaussian splat rasterizer and naive-insertion compositing.

Pixel ``(i, j)`` sits at image coordinate ``(x=j, y=i)``, the same coordinates :func:`project_bbox` and the
refinement use. Layers are premultiplied RGBA ``[T,H,W,4]`` tensors.
"""

from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from einops import rearrange

from .alignment import AffineRefinement
from .alignment import CameraModel
from .alignment import GaussianSet
from .core import VideoClip
from .exceptions import ShapeError

MAX_ALPHA: float = 0.99
TRUNCATION: float = 3.0
# pixel variance added to every footprint so sub-pixel splats stay visible
LOWPASS: float = 0.09


def splat_footprints(g: GaussianSet, cam: CameraModel, frame: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Projected means ``[N,2]``, 2D covariances ``[N,2,2]`` and depths ``[N]`` of the splats in front of the camera."""
    rot: np.ndarray = cam.rotations[frame]
    p: np.ndarray = cam.to_camera(g.centers, frame)
    z: np.ndarray = np.maximum(p[:, 2], 1e-9)
    jacobian: np.ndarray = np.zeros((len(p), 2, 3))
    jacobian[:, 0, 0] = cam.fx / z
    jacobian[:, 0, 2] = -cam.fx * p[:, 0] / z ** 2
    jacobian[:, 1, 1] = cam.fy / z
    jacobian[:, 1, 2] = -cam.fy * p[:, 1] / z ** 2
    cov2d: np.ndarray = jacobian @ (rot @ g.covariances() @ rot.T) @ np.swapaxes(jacobian, 1, 2)
    return np.stack([cam.fx * p[:, 0] / z + cam.cx, cam.fy * p[:, 1] / z + cam.cy], axis=1), cov2d, p[:, 2]


def render_frame(g: GaussianSet, cam: CameraModel, frame: int, size: tuple[int, int] | None = None) -> torch.Tensor:
    height, width = size or (cam.height, cam.width)
    means, cov2d, depth = splat_footprints(g, cam, frame)
    ys, xs = torch.meshgrid(torch.arange(height, dtype=torch.float64), torch.arange(width, dtype=torch.float64),
                            indexing="ij")
    rgb: torch.Tensor = torch.zeros(height, width, 3, dtype=torch.float64)
    alpha: torch.Tensor = torch.zeros(height, width, dtype=torch.float64)
    for i in np.argsort(-depth, kind="stable"):
        if depth[i] <= 0:
            continue
        inverse: np.ndarray = np.linalg.inv(cov2d[i] + np.eye(2) * LOWPASS)
        dx, dy = xs - means[i, 0], ys - means[i, 1]
        power: torch.Tensor = inverse[0, 0] * dx ** 2 + 2 * inverse[0, 1] * dx * dy + inverse[1, 1] * dy ** 2
        a: torch.Tensor = (torch.exp(-0.5 * power) * g.opacities[i]).clamp(max=MAX_ALPHA)
        a = torch.where(power <= TRUNCATION ** 2, a, torch.zeros_like(a))
        rgb = torch.from_numpy(g.colors[i]) * a[..., None] + (1 - a[..., None]) * rgb
        alpha = a + (1 - a) * alpha
    return torch.cat([rgb, alpha[..., None]], dim=-1).to(torch.float32)


def render_asset(g: GaussianSet, cam: CameraModel, size: tuple[int, int] | None = None) -> torch.Tensor:
    """Premultiplied RGBA layer ``[T,H,W,4]`` of the set seen by every camera frame, composited back to front."""
    return torch.stack([render_frame(g, cam, f, size) for f in range(cam.frames)])


def warp_layer(layer: torch.Tensor, refinement: AffineRefinement) -> torch.Tensor:
    """Apply ``q = σ·p + d`` to a premultiplied layer by bilinear backward sampling; outside samples are clear."""
    if refinement.sigma == 1 and not refinement.d.any():
        return layer
    t, h, w, _ = layer.shape
    ys, xs = torch.meshgrid(torch.arange(h, dtype=torch.float64), torch.arange(w, dtype=torch.float64), indexing="ij")
    sx: torch.Tensor = (xs - float(refinement.d[0])) / refinement.sigma
    sy: torch.Tensor = (ys - float(refinement.d[1])) / refinement.sigma
    grid: torch.Tensor = torch.stack([2 * sx / max(w - 1, 1) - 1, 2 * sy / max(h - 1, 1) - 1], dim=-1)
    sampled: torch.Tensor = F.grid_sample(rearrange(layer.to(torch.float64), "t h w c -> t c h w"),
                                          grid.expand(t, h, w, 2), mode="bilinear", padding_mode="zeros",
                                          align_corners=True)
    return rearrange(sampled, "t c h w -> t h w c").to(layer.dtype)


def composite(background: VideoClip, layer: torch.Tensor | Sequence[torch.Tensor],
              refinement: AffineRefinement | None = None) -> VideoClip:
    layer = torch.stack(list(layer)) if not isinstance(layer, torch.Tensor) else layer
    if layer.ndim != 4 or layer.shape[-1] != 4:
        raise ShapeError(f"Layer must be [T,H,W,4], got {list(layer.shape)}")
    if tuple(layer.shape[:3]) != tuple(background.frames.shape[:3]):
        raise ShapeError(f"Layer {list(layer.shape[:3])} does not match background {list(background.frames.shape[:3])}")
    layer = warp_layer(layer, refinement or AffineRefinement.identity()).to(background.frames.dtype)
    rgb, alpha = layer[..., :3], layer[..., 3:]
    out: torch.Tensor = torch.where(alpha > 0, rgb + (1 - alpha) * background.frames, background.frames)
    return VideoClip(out.clamp(0, 1), background.fps)
