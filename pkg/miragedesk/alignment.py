"""
Asset alignment geometry.

Coarse alignment estimates a similarity that maps an asset's Gaussian set onto the scene object's set
without point correspondences: opacity-weighted centroids, principal axes of the opacity-weighted second
moment (signs fixed by the third moment along each axis) and the ratio of RMS radii. Fine alignment is a
single image-space scale and displacement averaged over every frame's bounding boxes.

Quaternions are stored scalar first, ``(w, x, y, z)``. Cameras use x right, y down, z forward.
"""

from dataclasses import dataclass
from json import dumps
from json import loads
from pathlib import Path
from typing import Literal
from typing import Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from .exceptions import DegeneracyError
from .exceptions import InputError
from .exceptions import LoadError
from .exceptions import VisibilityError

RefinementMode = Literal["diagonal", "edges"]
_axis_names: tuple[str, ...] = ("major", "middle", "minor")


def quaternion_to_rotation(q: np.ndarray) -> Rotation:
    return Rotation.from_quat(np.asarray(q, dtype=np.float64)[..., [1, 2, 3, 0]])


def rotation_to_quaternion(r: Rotation) -> np.ndarray:
    q = np.atleast_2d(r.as_quat())[:, [3, 0, 1, 2]]
    return q * np.where(q[:, :1] < 0, -1.0, 1.0)


@dataclass(frozen=True)
class GaussianSet:
    centers: np.ndarray
    scales: np.ndarray
    rotations: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray

    def __post_init__(self):
        n: int = len(self.centers)
        if n == 0:
            raise InputError("Gaussian set is empty")
        for name, shape in (("centers", (n, 3)), ("scales", (n, 3)), ("rotations", (n, 4)), ("opacities", (n,)),
                            ("colors", (n, 3))):
            if np.shape(getattr(self, name)) != shape:
                raise InputError(f"Gaussian {name} must have shape {shape}, got {np.shape(getattr(self, name))}")
        if (bad := np.flatnonzero(np.abs(np.linalg.norm(self.rotations, axis=1) - 1) > 1e-6)).size:
            raise InputError(f"Gaussian {bad[0]} rotation is not a unit quaternion")
        if (bad := np.flatnonzero((self.scales <= 0).any(axis=1))).size:
            raise InputError(f"Gaussian {bad[0]} has a non-positive scale")
        if (bad := np.flatnonzero((self.opacities <= 0) | (self.opacities > 1))).size:
            raise InputError(f"Gaussian {bad[0]} opacity outside (0, 1]")
        if (bad := np.flatnonzero(((self.colors < 0) | (self.colors > 1)).any(axis=1))).size:
            raise InputError(f"Gaussian {bad[0]} color outside [0, 1]")

    def __len__(self) -> int:
        return len(self.centers)

    @property
    def weights(self) -> np.ndarray:
        return self.opacities / self.opacities.sum()

    def rotation_matrices(self) -> np.ndarray:
        return quaternion_to_rotation(self.rotations).as_matrix()

    def covariances(self) -> np.ndarray:
        r = self.rotation_matrices()
        return r @ (self.scales[:, :, None] ** 2 * np.swapaxes(r, 1, 2))

    def transformed(self, transform: "SimilarityTransform") -> "GaussianSet":
        rotations = rotation_to_quaternion(Rotation.from_matrix(transform.R) * quaternion_to_rotation(self.rotations))
        return GaussianSet(transform.apply(self.centers), self.scales * transform.s, rotations,
                           self.opacities.copy(), self.colors.copy())

    def recolored(self, colors: np.ndarray) -> "GaussianSet":
        return GaussianSet(self.centers, self.scales, self.rotations, self.opacities, np.clip(colors, 0, 1))

    def to_records(self) -> list[dict]:
        return [{"center": c.tolist(), "scale": s.tolist(), "rotation": q.tolist(), "opacity": float(o),
                 "color": rgb.tolist()}
                for c, s, q, o, rgb in zip(self.centers, self.scales, self.rotations, self.opacities, self.colors)]

    @classmethod
    def from_records(cls, records: list[dict]) -> "GaussianSet":
        try:
            return cls(*(np.array([r[k] for r in records], dtype=np.float64).reshape(len(records), *shape)
                         for k, shape in (("center", (3,)), ("scale", (3,)), ("rotation", (4,)), ("opacity", ()),
                                          ("color", (3,)))))
        except KeyError as err:
            raise LoadError(f"Gaussian record is missing {err.args[0]!r}") from err

    def save(self, path: Path):
        path.write_text(dumps(self.to_records()))

    @classmethod
    def load(cls, path: Path) -> "GaussianSet":
        if not path.is_file():
            raise LoadError(f"Gaussian set not found {str(path)!r}")
        return cls.from_records(loads(path.read_text()))


@dataclass(frozen=True)
class SimilarityTransform:
    s: float
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        if not self.s > 0:
            raise InputError(f"Similarity scale must be positive, got {self.s}")
        if np.abs(self.R.T @ self.R - np.eye(3)).max() > 1e-6 or np.linalg.det(self.R) < 0:
            raise InputError("Similarity rotation is not a proper rotation")

    @classmethod
    def identity(cls) -> "SimilarityTransform":
        return cls(1.0, np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.s * points @ self.R.T + self.t

    def compose(self, other: "SimilarityTransform") -> "SimilarityTransform":
        """``self ∘ other``."""
        return SimilarityTransform(self.s * other.s, self.R @ other.R, self.s * self.R @ other.t + self.t)

    def inverse(self) -> "SimilarityTransform":
        return SimilarityTransform(1 / self.s, self.R.T, -(self.R.T @ self.t) / self.s)

    def rotation_angle_to(self, other: "SimilarityTransform") -> float:
        return float(np.linalg.norm(Rotation.from_matrix(self.R.T @ other.R).as_rotvec()))

    def to_dict(self) -> dict:
        return {"s": float(self.s), "R": self.R.tolist(), "t": self.t.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "SimilarityTransform":
        return cls(float(data["s"]), np.array(data["R"], dtype=np.float64), np.array(data["t"], dtype=np.float64))


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotations: np.ndarray
    translations: np.ndarray

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise InputError(f"Focal lengths must be positive, got {self.fx}, {self.fy}")
        if self.rotations.ndim != 3 or self.rotations.shape[1:] != (3, 3) or \
                self.translations.shape != (len(self.rotations), 3):
            raise InputError("Camera extrinsics must be [T,3,3] rotations and [T,3] translations")
        for i, r in enumerate(self.rotations):
            if np.abs(r.T @ r - np.eye(3)).max() > 1e-6:
                raise InputError(f"Camera rotation of frame {i} is not orthonormal")

    @property
    def frames(self) -> int:
        return len(self.rotations)

    def to_camera(self, points: np.ndarray, frame: int) -> np.ndarray:
        return points @ self.rotations[frame].T + self.translations[frame]

    def project(self, points_cam: np.ndarray) -> np.ndarray:
        return np.stack([self.fx * points_cam[:, 0] / points_cam[:, 2] + self.cx,
                         self.fy * points_cam[:, 1] / points_cam[:, 2] + self.cy], axis=1)

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy, "width": self.width,
                "height": self.height, "rotations": self.rotations.tolist(), "translations": self.translations.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "CameraModel":
        return cls(float(data["fx"]), float(data["fy"]), float(data["cx"]), float(data["cy"]), int(data["width"]),
                   int(data["height"]), np.array(data["rotations"], dtype=np.float64),
                   np.array(data["translations"], dtype=np.float64))


@dataclass(frozen=True)
class BBox2D:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise InputError(f"Degenerate box {self.as_list()}")

    @property
    def center(self) -> np.ndarray:
        return np.array([(self.x_min + self.x_max) / 2, (self.y_min + self.y_max) / 2])

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def diagonal(self) -> float:
        return float(np.hypot(self.width, self.height))

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_list(self) -> list[float]:
        return [float(self.x_min), float(self.y_min), float(self.x_max), float(self.y_max)]

    def iou(self, other: "BBox2D") -> float:
        w: float = max(0.0, min(self.x_max, other.x_max) - max(self.x_min, other.x_min))
        h: float = max(0.0, min(self.y_max, other.y_max) - max(self.y_min, other.y_min))
        return w * h / (self.area + other.area - w * h)

    def inside(self, width: int, height: int) -> bool:
        return self.x_min >= 0 and self.y_min >= 0 and self.x_max <= width and self.y_max <= height

    def union(self, other: "BBox2D") -> "BBox2D":
        return BBox2D(min(self.x_min, other.x_min), min(self.y_min, other.y_min),
                      max(self.x_max, other.x_max), max(self.y_max, other.y_max))


@dataclass(frozen=True)
class AffineRefinement:
    sigma: float
    d: np.ndarray

    def __post_init__(self):
        if not self.sigma > 0:
            raise InputError(f"Refinement scale must be positive, got {self.sigma}")

    @classmethod
    def identity(cls) -> "AffineRefinement":
        return cls(1.0, np.zeros(2))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.sigma * points + self.d

    def apply_box(self, box: BBox2D) -> BBox2D:
        x0, y0 = self.apply(np.array([box.x_min, box.y_min]))
        x1, y1 = self.apply(np.array([box.x_max, box.y_max]))
        return BBox2D(x0, y0, x1, y1)

    def to_dict(self) -> dict:
        return {"sigma": float(self.sigma), "d": self.d.tolist()}


def weighted_moments(g: GaussianSet) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    w: np.ndarray = g.weights
    mu: np.ndarray = w @ g.centers
    x: np.ndarray = g.centers - mu
    return mu, x, (w[:, None] * x).T @ x


def principal_frame(g: GaussianSet, rank_tolerance: float = 1e-10) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Centroid, descending principal axes as columns with third-moment signs, and per-axis skewness."""
    mu, x, cov = weighted_moments(g)
    values, vectors = np.linalg.eigh(cov)
    values, vectors = values[::-1], vectors[:, ::-1]
    for axis, value in enumerate(values):
        if value <= rank_tolerance * max(values[0], np.finfo(float).tiny):
            raise DegeneracyError(f"Degenerate covariance along the {_axis_names[axis]} axis (variance {value:.3g})")
    skew: np.ndarray = g.weights @ (x @ vectors) ** 3 / values ** 1.5
    vectors = vectors * np.where(skew < 0, -1.0, 1.0)
    return mu, vectors, np.abs(skew)


def estimate_similarity(asset: GaussianSet, obj: GaussianSet) -> SimilarityTransform:
    mu_a, axes_a, _ = principal_frame(asset)
    mu_o, axes_o, skew_o = principal_frame(obj)
    if np.linalg.det(axes_o) * np.linalg.det(axes_a) < 0:
        axes_o[:, int(np.argmin(skew_o))] *= -1
    r: np.ndarray = axes_o @ axes_a.T
    _, _, cov_a = weighted_moments(asset)
    _, _, cov_o = weighted_moments(obj)
    s: float = float(np.sqrt(np.trace(cov_o) / np.trace(cov_a)))
    return SimilarityTransform(s, r, mu_o - s * r @ mu_a)


def estimate_similarity_corresponding(asset: GaussianSet, obj: GaussianSet) -> SimilarityTransform:
    """Least-squares similarity for sets whose records correspond one to one."""
    if len(asset) != len(obj):
        raise InputError(f"Corresponding sets differ in size: {len(asset)} != {len(obj)}")
    w: np.ndarray = asset.weights
    mu_a, mu_o = w @ asset.centers, w @ obj.centers
    xa, xo = asset.centers - mu_a, obj.centers - mu_o
    u, d, vh = np.linalg.svd((w[:, None] * xo).T @ xa)
    signs: np.ndarray = np.ones(3)
    if np.linalg.det(u) * np.linalg.det(vh) < 0:
        signs[-1] = -1
    r: np.ndarray = u @ np.diag(signs) @ vh
    s: float = float((d * signs).sum() / (w @ (xa ** 2).sum(axis=1)))
    return SimilarityTransform(s, r, mu_o - s * r @ mu_a)


def project_bbox(g: GaussianSet, cam: CameraModel, frame: int = 0, k: float = 3.0) -> BBox2D:
    rot: np.ndarray = cam.rotations[frame]
    p: np.ndarray = cam.to_camera(g.centers, frame)
    if (behind := np.flatnonzero(p[:, 2] <= 0)).size:
        raise VisibilityError(f"Gaussian {behind[0]} is behind the camera in frame {frame}")
    uv: np.ndarray = cam.project(p)
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    jacobian: np.ndarray = np.zeros((len(p), 2, 3))
    jacobian[:, 0, 0] = cam.fx / z
    jacobian[:, 0, 2] = -cam.fx * x / z ** 2
    jacobian[:, 1, 1] = cam.fy / z
    jacobian[:, 1, 2] = -cam.fy * y / z ** 2
    cov2d: np.ndarray = jacobian @ (rot @ g.covariances() @ rot.T) @ np.swapaxes(jacobian, 1, 2)
    extent: np.ndarray = k * np.sqrt(np.stack([cov2d[:, 0, 0], cov2d[:, 1, 1]], axis=1))
    low, high = (uv - extent).min(axis=0), (uv + extent).max(axis=0)
    return BBox2D(low[0], low[1], high[0], high[1])


def estimate_refinement(rendered: Sequence[BBox2D], gt: Sequence[BBox2D],
                        mode: RefinementMode = "diagonal") -> AffineRefinement:
    if not rendered or not gt:
        raise InputError("Refinement needs at least one frame of boxes")
    if len(rendered) != len(gt):
        raise InputError(f"Box sequences differ in length: {len(rendered)} != {len(gt)}")
    if mode == "diagonal":
        sigma: float = float(np.mean([g.diagonal / r.diagonal for r, g in zip(rendered, gt)]))
        d: np.ndarray = np.mean([g.center - sigma * r.center for r, g in zip(rendered, gt)], axis=0)
        return AffineRefinement(sigma, d)
    elif mode == "edges":
        rows: list[list[float]] = []
        targets: list[float] = []
        for r, g in zip(rendered, gt):
            for value, target, axis in ((r.x_min, g.x_min, 0), (r.x_max, g.x_max, 0),
                                        (r.y_min, g.y_min, 1), (r.y_max, g.y_max, 1)):
                rows.append([value, axis == 0, axis == 1])
                targets.append(target)
        [sigma, dx, dy], *_ = np.linalg.lstsq(np.array(rows, dtype=np.float64), np.array(targets), rcond=None)
        return AffineRefinement(float(sigma), np.array([dx, dy]))
    raise InputError(f"Unknown refinement mode {mode!r}")


def random_similarity(rng: np.random.Generator, scale_range: tuple[float, float] = (0.5, 2.0),
                      translation: float = 5.0) -> SimilarityTransform:
    return SimilarityTransform(float(np.exp(rng.uniform(*np.log(scale_range)))),
                               Rotation.random(random_state=rng).as_matrix(),
                               rng.uniform(-translation, translation, 3))
