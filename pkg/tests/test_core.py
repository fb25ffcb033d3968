from pathlib import Path

import torch
from pytest import raises
from safetensors.torch import load_file
from safetensors.torch import save_file

from miragedesk.core import TensorContainer
from miragedesk.core import VideoClip
from miragedesk.core import check_clip_length
from miragedesk.core import dataclass_from_json
from miragedesk.core import dataclass_to_json
from miragedesk.core import frame_to_latent_index
from miragedesk.core import latent_groups
from miragedesk.core import latent_length
from miragedesk.core import load_clip
from miragedesk.core import quantize
from miragedesk.core import save_clip
from miragedesk.core import seed_everything
from miragedesk.causal_vae import VaeConfig
from miragedesk.exceptions import BoundsError
from miragedesk.exceptions import LoadError
from miragedesk.exceptions import ShapeError

from .conftest import random_clip


def test_clip_length_rule() -> None:
    for t in (1, 5, 9, 13):
        check_clip_length(t)
    for t in (0, 2, 8, 10):
        with raises(ShapeError, match="mod 4"):
            check_clip_length(t)


def test_latent_groups() -> None:
    assert latent_length(9) == 3
    assert latent_groups(9) == [range(0, 1), range(1, 5), range(5, 9)]
    assert [frame_to_latent_index(f, 9) for f in range(9)] == [0, 1, 1, 1, 1, 2, 2, 2, 2]
    with raises(BoundsError):
        frame_to_latent_index(9, 9)


def test_clip_validation() -> None:
    with raises(ShapeError):
        VideoClip(torch.zeros(9, 16, 16, 4))
    with raises(ShapeError):
        VideoClip(torch.zeros(8, 16, 16, 3))
    with raises(ShapeError):
        VideoClip(torch.zeros(9, 12, 16, 3))
    with raises(ShapeError, match="non-finite"):
        VideoClip(torch.full((9, 16, 16, 3), float("nan")))
    with raises(ShapeError, match=r"\[0, 1\]"):
        VideoClip(torch.full((9, 16, 16, 3), 1.5))


def test_clip_volume_layout() -> None:
    clip = random_clip(1)
    volume = clip.volume()
    assert volume.shape == (1, 3, 9, 16, 16)
    assert torch.equal(volume[0, :, 4, 2, 3], clip.frames[4, 2, 3])
    assert torch.equal(VideoClip.from_volume(volume).frames, clip.frames)


def test_clip_save_load(tmp_path: Path) -> None:
    clip = random_clip(2)
    save_clip(clip, tmp_path / "clip")
    loaded = load_clip(tmp_path / "clip")
    assert torch.equal(loaded.frames, quantize(clip).frames)
    assert loaded.fps == clip.fps


def test_clip_load_errors(tmp_path: Path) -> None:
    with raises(LoadError, match="not found"):
        load_clip(tmp_path / "missing")
    save_clip(random_clip(3), tmp_path / "clip")
    (tmp_path / "clip" / "frame_0004.png").unlink()
    with raises(LoadError, match="Missing frame index 4"):
        load_clip(tmp_path / "clip")


def test_tensor_container(tmp_path: Path) -> None:
    container = TensorContainer({"a": torch.arange(6, dtype=torch.int64).reshape(2, 3),
                                 "b": torch.rand(4, dtype=torch.float64),
                                 "mask": torch.tensor([True, False])}, {"stage": "A"})
    container.save(tmp_path / "c.mrg")
    loaded = TensorContainer.load(tmp_path / "c.mrg")
    assert list(loaded.tensors) == ["a", "b", "mask"]
    assert loaded.metadata == {"stage": "A"}
    for name, tensor in container.tensors.items():
        assert loaded.tensors[name].dtype == tensor.dtype
        assert torch.equal(loaded.tensors[name], tensor)

    (tmp_path / "tiny.mrg").write_bytes(b"\x00")
    with raises(LoadError, match="Corrupt container"):
        TensorContainer.load(tmp_path / "tiny.mrg")
    (tmp_path / "cut.mrg").write_bytes((tmp_path / "c.mrg").read_bytes()[:-4])
    with raises(LoadError, match="Corrupt container"):
        TensorContainer.load(tmp_path / "cut.mrg")
    with raises(LoadError, match="not found"):
        TensorContainer.load(tmp_path / "missing.mrg")


def test_seed_everything() -> None:
    seed_everything(5)
    a = torch.rand(3)
    seed_everything(5)
    assert torch.equal(a, torch.rand(3))
    assert torch.equal(torch.rand(3, generator=seed_everything(9)), torch.rand(3, generator=seed_everything(9)))
    with raises(ValueError):
        seed_everything(-1)


def test_dataclass_json_restores_tuples() -> None:
    config = VaeConfig(encoder_channels=(8, 8, 16, 16))
    restored = dataclass_from_json(VaeConfig, dataclass_to_json(config))
    assert restored == config
    assert isinstance(restored.encoder_channels, tuple)


def test_tensor_container_reads_plain_safetensors(tmp_path: Path) -> None:
    save_file({"w": torch.ones(2, 2)}, str(tmp_path / "plain.safetensors"), metadata={"source": "export"})
    loaded = TensorContainer.load(tmp_path / "plain.safetensors")
    assert loaded.metadata == {"source": "export"}
    assert torch.equal(loaded.tensors["w"], torch.ones(2, 2))
    TensorContainer({"w": torch.zeros(3)}).save(tmp_path / "ours.mrg")
    assert torch.equal(load_file(str(tmp_path / "ours.mrg"))["w"], torch.zeros(3))
