"""
Procedural driving-like scenes and data-pair curation.

A scene is a fronto-parallel textured background at depth ``background_depth`` seen by a camera panning
sideways by a whole number of pixels per frame, so ground-truth flow on the background is an exact integer
shift. Car-like Gaussian objects stand on the ground at ``object_depth``. The ground truth renders them with
scene lighting (a colour gain and a soft ground shadow). The asset is the selected object's shape under a
hidden similarity, resampled and stretched by ``mismatch`` when the mismatch is nonzero, and carries the
flat albedo only.

Bundles on disk::

    bundle/
        gt/                      clip folder
        background/              clip folder, selected object removed
        gaussians_object.json
        gaussians_asset.json
        cameras.json
        boxes.json               {"target": [[x0,y0,x1,y1], ...], "candidates": [[[...], ...], ...]}
        flow/flow.mrg            tensors "flow" [T-1,H,W,2] and "mask" [T-1,H,W]
        hidden.json              hidden similarity and generation parameters
"""

from dataclasses import dataclass
from dataclasses import field
from json import dumps
from json import loads
from pathlib import Path

import numpy as np
import torch
from scipy.spatial.transform import Rotation

from .alignment import AffineRefinement
from .alignment import BBox2D
from .alignment import CameraModel
from .alignment import GaussianSet
from .alignment import RefinementMode
from .alignment import SimilarityTransform
from .alignment import estimate_refinement
from .alignment import estimate_similarity
from .alignment import project_bbox
from .alignment import random_similarity
from .alignment import rotation_to_quaternion
from .core import TensorContainer
from .core import VideoClip
from .core import check_clip_length
from .core import load_clip
from .core import save_clip
from .exceptions import ConfigError
from .exceptions import InputError
from .exceptions import LoadError
from .exceptions import ShapeError
from .render import composite
from .render import render_asset

CLEAR_ALPHA: float = 1e-3
CLEAR_SHADOW: float = 1 - 1e-6


@dataclass(frozen=True)
class SceneSpec:
    frames: int = 9
    height: int = 64
    width: int = 96
    focal: float = 80.0
    background_depth: float = 20.0
    object_depth: float = 10.0
    candidates: int = 2
    object_gaussians: int = 160
    asset_gaussians: int = 160
    mismatch: float = 0.05
    max_pan: int = 2
    gain_range: tuple[float, float] = (0.6, 0.9)
    shadow_strength: float = 0.5
    asset_scale_range: tuple[float, float] = (0.5, 2.0)
    fps: float = 10.0

    def __post_init__(self):
        check_clip_length(self.frames)
        if self.height % 8 or self.width % 8:
            raise ConfigError(f"Scene size must be divisible by 8, got {self.height}x{self.width}")
        if self.candidates < 1:
            raise ConfigError(f"candidates must be at least 1, got {self.candidates}")
        if self.object_gaussians < 8 or self.asset_gaussians < 8:
            raise ConfigError("Objects need at least 8 Gaussians")
        if self.mismatch < 0:
            raise ConfigError(f"mismatch must not be negative, got {self.mismatch}")
        if self.max_pan < 0:
            raise ConfigError(f"max_pan must not be negative, got {self.max_pan}")
        if not 0 < self.object_depth < self.background_depth:
            raise ConfigError("object_depth must lie between the camera and the background")


@dataclass
class SceneBundle:
    x_gt: VideoClip
    background: VideoClip
    object: GaussianSet
    asset: GaussianSet
    cameras: CameraModel
    boxes: list[BBox2D]
    flow: torch.Tensor | None = None
    mask: torch.Tensor | None = None
    candidate_boxes: list[list[BBox2D]] = field(default_factory=list)
    hidden: dict = field(default_factory=dict)


def car_shape(rng: np.random.Generator, n: int, stretch: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Local centers of a car-like blob (x forward, y down, z across) and a cabin membership mask."""
    cabin: np.ndarray = rng.random(n) < 0.3
    body: np.ndarray = np.stack([-1.2 + 2.4 * rng.random(n) ** 0.8, rng.uniform(-0.4, 0.4, n),
                                 rng.uniform(-0.5, 0.5, n)], axis=1)
    top: np.ndarray = np.stack([rng.uniform(-0.9, 0.3, n), rng.uniform(-0.9, -0.4, n), rng.uniform(-0.4, 0.5, n)],
                               axis=1)
    centers: np.ndarray = np.where(cabin[:, None], top, body)
    centers[:, 0] *= stretch
    return centers, cabin


def car_gaussians(rng: np.random.Generator, n: int, body_color: np.ndarray, stretch: float = 1.0,
                  jitter: float = 0.0) -> GaussianSet:
    centers, cabin = car_shape(rng, n, stretch)
    if jitter:
        radius: float = float(np.sqrt(((centers - centers.mean(axis=0)) ** 2).sum(axis=1).mean()))
        centers = centers + rng.normal(0, jitter * radius, centers.shape)
    colors: np.ndarray = np.where(cabin[:, None], body_color * 0.3, body_color) + rng.normal(0, 0.03, (n, 3))
    return GaussianSet(centers, rng.uniform(0.05, 0.12, (n, 3)),
                       rotation_to_quaternion(Rotation.random(n, random_state=rng)),
                       rng.uniform(0.6, 1.0, n), np.clip(colors, 0, 1))


def panning_camera(spec: SceneSpec, pan: int) -> CameraModel:
    shift: float = pan * spec.background_depth / spec.focal
    translations: np.ndarray = np.array([[-t * shift, 0.0, 0.0] for t in range(spec.frames)])
    return CameraModel(spec.focal, spec.focal, (spec.width - 1) / 2, (spec.height - 1) / 2, spec.width, spec.height,
                       np.repeat(np.eye(3)[None], spec.frames, axis=0), translations)


def background_texture(rng: np.random.Generator, spec: SceneSpec, pan: int) -> np.ndarray:
    """Texture frames ``[T,H,W,3]``; frame ``t`` shows the panorama shifted by ``t·pan`` pixels."""
    wavelengths: np.ndarray = rng.uniform([12, 10, 16], [30, 24, 40], (3, 3))
    phases: np.ndarray = rng.uniform(0, 2 * np.pi, (3, 3))
    rows, cols = np.meshgrid(np.arange(spec.height), np.arange(spec.width), indexing="ij")
    road: np.ndarray = 0.8 + 0.2 * rows / spec.height
    frames: list[np.ndarray] = []
    for t in range(spec.frames):
        u: np.ndarray = cols + t * pan
        channels = [0.5 + 0.2 * np.sin(2 * np.pi * u / wl[0] + ph[0]) * np.cos(2 * np.pi * rows / wl[1] + ph[1])
                    + 0.1 * np.sin(2 * np.pi * (u + rows) / wl[2] + ph[2])
                    for wl, ph in zip(wavelengths, phases)]
        frames.append(np.stack(channels, axis=-1) * road[..., None])
    return np.clip(np.stack(frames), 0, 1)


def shadow_factor(boxes: list[BBox2D], spec: SceneSpec) -> np.ndarray:
    """Multiplicative ground shadow ``[T,H,W]`` under each box."""
    rows, cols = np.meshgrid(np.arange(spec.height), np.arange(spec.width), indexing="ij")
    factor: np.ndarray = np.ones((len(boxes), spec.height, spec.width))
    for t, box in enumerate(boxes):
        cx, cy = box.center[0], box.y_max - 0.1 * box.height
        rx, ry = 0.6 * box.width, 0.12 * box.height + 1
        factor[t] = 1 - spec.shadow_strength * np.exp(-2 * (((cols - cx) / rx) ** 2 + ((rows - cy) / ry) ** 2))
    return factor


def merge_sets(sets: list[GaussianSet]) -> GaussianSet:
    return GaussianSet(*(np.concatenate([getattr(g, n) for g in sets])
                         for n in ("centers", "scales", "rotations", "opacities", "colors")))


def select_target(boxes_per_object: list[list[BBox2D]], size: tuple[int, int]) -> int:
    """Index of the candidate fully inside the image in every frame with the largest mean box area."""
    height, width = size
    eligible: dict[int, float] = {i: float(np.mean([b.area for b in boxes])) for i, boxes in enumerate(boxes_per_object)
                                  if boxes and all(b.inside(width, height) for b in boxes)}
    if not eligible:
        raise InputError("No candidate object stays inside the image in every frame")
    return max(eligible, key=lambda i: (eligible[i], -i))


def render_scene(texture: np.ndarray, objects: list[GaussianSet], boxes: list[list[BBox2D]], gain: np.ndarray,
                 cam: CameraModel, spec: SceneSpec) -> tuple[VideoClip, np.ndarray, np.ndarray]:
    """Lit render of ``objects`` over the shadowed texture, plus the object alpha and shadow factor."""
    shadow: np.ndarray = np.ones(texture.shape[:3])
    for object_boxes in boxes:
        shadow = shadow * shadow_factor(object_boxes, spec)
    background: VideoClip = VideoClip(torch.from_numpy(texture * shadow[..., None]).to(torch.float32), spec.fps)
    if not objects:
        return background, np.zeros(texture.shape[:3]), shadow
    lit: GaussianSet = merge_sets([g.recolored(g.colors * gain) for g in objects])
    layer: torch.Tensor = render_asset(lit, cam)
    return composite(background, layer), layer[..., 3].numpy().astype(np.float64), shadow


def scene_flow(spec: SceneSpec, pan: int, alpha: np.ndarray, shadow: np.ndarray) -> tuple[torch.Tensor, torch.Tensor]:
    """Backward flow from frame ``t+1`` to frame ``t`` and its validity mask over unoccluded background."""
    t, h, w = alpha.shape
    flow: np.ndarray = np.zeros((t - 1, h, w, 2), dtype=np.float32)
    flow[..., 0] = -pan
    flow[..., 0][alpha[:-1] > 0.5] = -pan * spec.background_depth / spec.object_depth
    clear: np.ndarray = (alpha < CLEAR_ALPHA) & (shadow > CLEAR_SHADOW)
    mask: np.ndarray = np.zeros((t - 1, h, w), dtype=bool)
    mask[:, :, pan:] = clear[:-1, :, pan:] & clear[1:, :, :w - pan]
    return torch.from_numpy(flow), torch.from_numpy(mask)


def synth_scene(seed: int, spec: SceneSpec = SceneSpec()) -> SceneBundle:
    rng: np.random.Generator = np.random.default_rng(seed)
    pan: int = int(rng.integers(0, spec.max_pan + 1))
    cam: CameraModel = panning_camera(spec, pan)
    texture: np.ndarray = background_texture(rng, spec, pan)
    gain: np.ndarray = rng.uniform(*spec.gain_range, 3)
    middle_shift: float = (spec.frames - 1) / 2 * pan * spec.background_depth / spec.focal
    local_sets: list[GaussianSet] = []
    poses: list[SimilarityTransform] = []
    body_colors: list[np.ndarray] = []
    for i in range(spec.candidates):
        offset: float = rng.uniform(-0.15, 0.15) if i == 0 else rng.uniform(-0.6, 0.6)
        x: float = offset * spec.width * spec.object_depth / spec.focal + middle_shift
        yaw: Rotation = Rotation.from_euler("y", rng.uniform(-0.5, 0.5))
        poses.append(SimilarityTransform(1.0, yaw.as_matrix(), np.array([x, 1.1, spec.object_depth])))
        body_colors.append(rng.uniform(0.2, 0.9, 3))
        local_sets.append(car_gaussians(rng, spec.object_gaussians, body_colors[-1]))
    objects: list[GaussianSet] = [g.transformed(pose) for g, pose in zip(local_sets, poses)]
    boxes: list[list[BBox2D]] = [[project_bbox(g, cam, f) for f in range(spec.frames)] for g in objects]
    target: int = select_target(boxes, (spec.height, spec.width))
    x_gt, alpha, shadow = render_scene(texture, objects, boxes, gain, cam, spec)
    others: list[int] = [i for i in range(spec.candidates) if i != target]
    background, _, _ = render_scene(texture, [objects[i] for i in others], [boxes[i] for i in others], gain, cam, spec)
    flow, mask = scene_flow(spec, pan, alpha, shadow)

    hidden: SimilarityTransform = random_similarity(rng, spec.asset_scale_range)
    source: GaussianSet = objects[target]
    if spec.mismatch > 0:
        source = car_gaussians(rng, spec.asset_gaussians, body_colors[target], 1 + spec.mismatch,
                               spec.mismatch).transformed(poses[target])
    return SceneBundle(x_gt, background, objects[target], source.transformed(hidden.inverse()), cam, boxes[target],
                       flow, mask, boxes,
                       {"similarity": hidden.to_dict(), "mismatch": spec.mismatch, "seed": seed, "target": target,
                        "pan": pan, "gain": gain.tolist()})


def save_bundle(bundle: SceneBundle, folder: Path):
    folder.mkdir(parents=True, exist_ok=True)
    save_clip(bundle.x_gt, folder / "gt")
    save_clip(bundle.background, folder / "background")
    bundle.object.save(folder / "gaussians_object.json")
    bundle.asset.save(folder / "gaussians_asset.json")
    (folder / "cameras.json").write_text(dumps(bundle.cameras.to_dict()))
    boxes: dict[str, list] = {"target": [b.as_list() for b in bundle.boxes],
                              "candidates": [[b.as_list() for b in c] for c in bundle.candidate_boxes]}
    (folder / "boxes.json").write_text(dumps(boxes))
    if bundle.flow is not None:
        tensors: dict[str, torch.Tensor] = {"flow": bundle.flow}
        if bundle.mask is not None:
            tensors["mask"] = bundle.mask
        TensorContainer(tensors).save(folder / "flow" / "flow.mrg")
    if bundle.hidden:
        (folder / "hidden.json").write_text(dumps(bundle.hidden))


def load_bundle(folder: Path) -> SceneBundle:
    if not folder.is_dir():
        raise LoadError(f"Bundle not found {str(folder)!r}")
    for name in ("cameras.json", "boxes.json"):
        if not (folder / name).is_file():
            raise LoadError(f"Bundle {folder.name!r} is missing {name}")
    boxes: dict = loads((folder / "boxes.json").read_text())
    bundle: SceneBundle = SceneBundle(
        load_clip(folder / "gt"), load_clip(folder / "background"),
        GaussianSet.load(folder / "gaussians_object.json"), GaussianSet.load(folder / "gaussians_asset.json"),
        CameraModel.from_dict(loads((folder / "cameras.json").read_text())),
        [BBox2D(*b) for b in boxes["target"]],
        candidate_boxes=[[BBox2D(*b) for b in c] for c in boxes.get("candidates", [])],
        hidden=loads((folder / "hidden.json").read_text()) if (folder / "hidden.json").is_file() else {})
    if (flow_file := folder / "flow" / "flow.mrg").is_file():
        container: TensorContainer = TensorContainer.load(flow_file)
        bundle.flow, bundle.mask = container.tensors["flow"], container.tensors.get("mask")
    if bundle.x_gt.frames.shape != bundle.background.frames.shape:
        raise ShapeError(f"Bundle {folder.name!r} ground truth and background differ in shape")
    if not len(bundle.boxes) == bundle.cameras.frames == bundle.x_gt.length:
        raise ShapeError(f"Bundle {folder.name!r} boxes, cameras and frames differ in length")
    return bundle


@dataclass
class AlignmentReport:
    similarity: SimilarityTransform
    refinement: AffineRefinement
    iou_pre: list[float]
    iou_post: list[float]
    center_error_pre: list[float]
    center_error_post: list[float]

    @property
    def mean_iou_pre(self) -> float:
        return float(np.mean(self.iou_pre))

    @property
    def mean_iou_post(self) -> float:
        return float(np.mean(self.iou_post))

    @property
    def mean_center_error_pre(self) -> float:
        return float(np.mean(self.center_error_pre))

    @property
    def mean_center_error_post(self) -> float:
        return float(np.mean(self.center_error_post))

    def to_dict(self) -> dict:
        return {"similarity": self.similarity.to_dict(), "refinement": self.refinement.to_dict(),
                "iou_pre": self.iou_pre, "iou_post": self.iou_post,
                "center_error_pre": self.center_error_pre, "center_error_post": self.center_error_post,
                "mean_iou_pre": self.mean_iou_pre, "mean_iou_post": self.mean_iou_post,
                "mean_center_error_pre": self.mean_center_error_pre,
                "mean_center_error_post": self.mean_center_error_post}


@dataclass
class CuratedPair:
    x_ni: VideoClip
    x_gt: VideoClip
    report: AlignmentReport


def curate(bundle: SceneBundle, mode: RefinementMode = "diagonal", k: float = 3.0) -> CuratedPair:
    similarity: SimilarityTransform = estimate_similarity(bundle.asset, bundle.object)
    aligned: GaussianSet = bundle.asset.transformed(similarity)
    cam: CameraModel = bundle.cameras
    rendered: list[BBox2D] = [project_bbox(aligned, cam, f, k) for f in range(cam.frames)]
    refinement: AffineRefinement = estimate_refinement(rendered, bundle.boxes, mode)
    refined: list[BBox2D] = [refinement.apply_box(b) for b in rendered]
    layer: torch.Tensor = render_asset(aligned, cam, (bundle.background.height, bundle.background.width))
    x_ni: VideoClip = composite(bundle.background, layer, refinement)
    report: AlignmentReport = AlignmentReport(
        similarity, refinement,
        [r.iou(g) for r, g in zip(rendered, bundle.boxes)], [r.iou(g) for r, g in zip(refined, bundle.boxes)],
        [float(np.linalg.norm(r.center - g.center)) for r, g in zip(rendered, bundle.boxes)],
        [float(np.linalg.norm(r.center - g.center)) for r, g in zip(refined, bundle.boxes)])
    return CuratedPair(x_ni, bundle.x_gt, report)
