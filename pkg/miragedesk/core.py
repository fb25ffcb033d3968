"""
Shared data model: video clips, latent volumes, the tensor container used for every checkpoint and
binary artifact, and deterministic seeding.

Clips on disk are directories of 8-bit PNG frames named ``frame_0000.png`` … plus a ``meta.json``
sidecar holding ``fps``. Tensor containers are safetensors files whose string metadata carries the
configuration and training stage of a checkpoint component.
"""

from dataclasses import asdict
from dataclasses import dataclass
from dataclasses import field
from dataclasses import fields
from json import dumps
from json import loads
from math import ceil
from pathlib import Path
from random import seed as random_seed
from re import compile as re_compile

import numpy as np
import torch
from einops import rearrange
from PIL import Image
from safetensors import SafetensorError
from safetensors import safe_open
from safetensors.torch import load_file
from safetensors.torch import save_file

from .exceptions import BoundsError
from .exceptions import InputError
from .exceptions import LoadError
from .exceptions import ShapeError

TEMPORAL_FACTOR: int = 4
SPATIAL_FACTOR: int = 8
MAX_SEED: int = 2 ** 64 - 1

_frame_pattern = re_compile(r"^frame_(\d{4,})\.png$")


def check_clip_length(t: int):
    if t < 1 or t % TEMPORAL_FACTOR != 1:
        raise ShapeError(f"T ≡ 1 (mod {TEMPORAL_FACTOR}) violated: T={t}")


def latent_length(t: int) -> int:
    check_clip_length(t)
    return 1 + (t - 1) // TEMPORAL_FACTOR


def frame_to_latent_index(f: int, t: int) -> int:
    """
    Latent time slice whose receptive group contains frame ``f``. Groups are ``{0}, {1..4}, {5..8}, …``,
    the partition induced by two stride-2 causal temporal downsamples with the first frame as anchor.
    """
    if not 0 <= f < t:
        raise BoundsError(f"Frame index {f} out of range [0, {t})")
    return 0 if f == 0 else ceil(f / TEMPORAL_FACTOR)


def latent_groups(t: int) -> list[range]:
    return [range(0, 1)] + [range(1 + TEMPORAL_FACTOR * (j - 1), 1 + TEMPORAL_FACTOR * j)
                            for j in range(1, latent_length(t))]


@dataclass(frozen=True)
class VideoClip:
    frames: torch.Tensor
    fps: float = 10.0

    def __post_init__(self):
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3:
            raise ShapeError(f"Clip frames must be [T,H,W,3], got {list(self.frames.shape)}")
        t, h, w, _ = self.frames.shape
        check_clip_length(t)
        if h % SPATIAL_FACTOR or w % SPATIAL_FACTOR:
            raise ShapeError(f"Clip height and width must be divisible by {SPATIAL_FACTOR}, got {h}x{w}")
        if not bool(torch.isfinite(self.frames).all()):
            raise ShapeError("Clip contains non-finite values")
        if bool((self.frames < 0).any()) or bool((self.frames > 1).any()):
            raise ShapeError("Clip values must lie in [0, 1]")
        if self.fps <= 0:
            raise ShapeError(f"fps must be positive, got {self.fps}")

    @property
    def length(self) -> int:
        return self.frames.shape[0]

    @property
    def height(self) -> int:
        return self.frames.shape[1]

    @property
    def width(self) -> int:
        return self.frames.shape[2]

    def volume(self, dtype: torch.dtype | None = None) -> torch.Tensor:
        """Frames as a batched ``[1,3,T,H,W]`` volume."""
        return rearrange(self.frames if dtype is None else self.frames.to(dtype), "t h w c -> 1 c t h w")

    @classmethod
    def from_volume(cls, volume: torch.Tensor, fps: float = 10.0) -> "VideoClip":
        if volume.ndim == 5:
            if volume.shape[0] != 1:
                raise ShapeError(f"Expected a single clip, got batch of {volume.shape[0]}")
            volume = volume[0]
        return cls(rearrange(volume.detach().clamp(0, 1), "c t h w -> t h w c").contiguous(), fps)


@dataclass(frozen=True)
class LatentVolume:
    data: torch.Tensor

    def __post_init__(self):
        if self.data.ndim != 4:
            raise ShapeError(f"Latent volume must be [C,T',h,w], got {list(self.data.shape)}")
        if not bool(torch.isfinite(self.data).all()):
            raise ShapeError("Latent volume contains non-finite values")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def length(self) -> int:
        return self.data.shape[1]

    def batched(self) -> torch.Tensor:
        return self.data.unsqueeze(0)

    def check_source(self, clip: VideoClip):
        expected = (latent_length(clip.length), clip.height // SPATIAL_FACTOR, clip.width // SPATIAL_FACTOR)
        if tuple(self.data.shape[1:]) != expected:
            raise ShapeError(f"Latent {list(self.data.shape)} does not match clip {list(clip.frames.shape)}")


@dataclass
class TensorContainer:
    """Named tensors with string metadata, stored as one safetensors file."""

    tensors: dict[str, torch.Tensor] = field(default_factory=dict)
    metadata: dict[str, str] = field(default_factory=dict)

    def save(self, path: Path):
        path.parent.mkdir(parents=True, exist_ok=True)
        save_file({n: t.detach().to("cpu", copy=True).contiguous() for n, t in self.tensors.items()}, str(path),
                  metadata={k: str(v) for k, v in self.metadata.items()})

    @classmethod
    def load(cls, path: Path) -> "TensorContainer":
        if not path.is_file():
            raise LoadError(f"Container not found {str(path)!r}")
        try:
            with safe_open(str(path), framework="pt") as file:
                metadata: dict[str, str] = file.metadata() or {}
            tensors: dict[str, torch.Tensor] = load_file(str(path))
        except SafetensorError as err:
            raise LoadError(f"Corrupt container {str(path)!r}: {err}") from err
        return cls(dict(sorted(tensors.items())), dict(metadata))


def seed_everything(seed: int) -> torch.Generator:
    if not 0 <= seed <= MAX_SEED:
        raise InputError(f"Seed must be a 64-bit unsigned integer, got {seed}")
    random_seed(seed)
    np.random.seed(seed % 2 ** 32)
    torch.manual_seed(seed)
    return make_generator(seed)


def make_generator(seed: int) -> torch.Generator:
    generator = torch.Generator()
    generator.manual_seed(seed)
    return generator


def frame_indices(folder: Path) -> list[int]:
    return sorted(int(m.group(1)) for p in folder.iterdir() if (m := _frame_pattern.match(p.name)))


def load_clip(path: Path) -> VideoClip:
    if not path.is_dir():
        raise LoadError(f"Clip folder not found {str(path)!r}")
    if not (meta_file := path / "meta.json").is_file():
        raise LoadError(f"Missing meta.json in {str(path)!r}")
    indices: list[int] = frame_indices(path)
    if not indices:
        raise LoadError(f"No frames in {str(path)!r}")
    if missing := sorted(set(range(indices[-1] + 1)) - set(indices)):
        raise LoadError(f"Missing frame index {missing[0]} in {str(path)!r}")
    check_clip_length(len(indices))
    frames: list[np.ndarray] = []
    for i in indices:
        with Image.open(path / f"frame_{i:04d}.png") as image:
            frames.append(np.asarray(image.convert("RGB"), dtype=np.uint8))
    if len({f.shape for f in frames}) != 1:
        raise ShapeError(f"Frames in {str(path)!r} have different sizes")
    meta: dict = loads(meta_file.read_text())
    return VideoClip(torch.from_numpy(np.stack(frames)).to(torch.float32) / 255, float(meta.get("fps", 10.0)))


def save_clip(clip: VideoClip, path: Path):
    path.mkdir(parents=True, exist_ok=True)
    frames: np.ndarray = (clip.frames.detach().cpu().to(torch.float64) * 255).round().clamp(0, 255) \
        .to(torch.uint8).numpy()
    for i, frame in enumerate(frames):
        Image.fromarray(frame).save(path / f"frame_{i:04d}.png", optimize=False)
    (path / "meta.json").write_text(dumps({"fps": clip.fps, "frames": clip.length,
                                           "height": clip.height, "width": clip.width}))


def quantize(clip: VideoClip) -> VideoClip:
    """The clip as it reads back after an 8-bit save."""
    return VideoClip((clip.frames.to(torch.float64) * 255).round().clamp(0, 255).to(torch.float32) / 255, clip.fps)


def dataclass_to_json(obj) -> str:
    return dumps(asdict(obj), separators=(",", ":"))


def dataclass_from_json(cls: type, data: str):
    """Rebuild a frozen config dataclass from its JSON echo, turning lists back into tuples."""
    values: dict = loads(data)
    names: set[str] = {f.name for f in fields(cls)}
    return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in values.items() if k in names})
