from json import loads

import numpy as np
import torch
from pytest import approx
from pytest import raises
from pytest import warns

from miragedesk.alignment import BBox2D
from miragedesk.core import VideoClip
from miragedesk.exceptions import ConfigError
from miragedesk.exceptions import InputError
from miragedesk.exceptions import ShapeError
from miragedesk.metrics import MetricReport
from miragedesk.metrics import MetricsConfig
from miragedesk.metrics import PSNR_CAP
from miragedesk.metrics import VideoFeatureNet
from miragedesk.metrics import actor_crop
from miragedesk.metrics import crop_box
from miragedesk.metrics import evaluate
from miragedesk.metrics import frechet_distance
from miragedesk.metrics import gaussian_fit
from miragedesk.metrics import perceptual
from miragedesk.metrics import psnr
from miragedesk.metrics import ssim
from miragedesk.metrics import warp_error

from .conftest import random_clip


def shifted_clip(frames: int = 5, height: int = 16, width: int = 24, shift: int = 1) -> VideoClip:
    """A panorama scrolling left by ``shift`` pixels per frame."""
    panorama = torch.rand(height, width + frames * shift, 3, generator=torch.Generator().manual_seed(0))
    return VideoClip(torch.stack([panorama[:, t * shift:t * shift + width] for t in range(frames)]))


def test_psnr() -> None:
    clip = random_clip(0)
    assert psnr(clip, clip) == PSNR_CAP == 99
    frames = torch.full((5, 16, 16, 3), 0.5)
    assert psnr(frames, frames + 0.1) == approx(20, abs=1e-5)
    with raises(ShapeError):
        psnr(clip, random_clip(1, 5))


def test_psnr_caps_each_frame() -> None:
    a = torch.full((5, 16, 16, 3), 0.5)
    b = a.clone()
    b[0] += 0.1
    assert psnr(a, b) == approx((20 + 4 * 99) / 5, abs=1e-5)


def test_ssim() -> None:
    clip = random_clip(2)
    assert ssim(clip, clip) == approx(1)
    assert ssim(clip, random_clip(3)) < 0.5
    with raises(InputError, match="11x11"):
        ssim(torch.rand(1, 8, 8, 3), torch.rand(1, 8, 8, 3))


def test_perceptual() -> None:
    clip = random_clip(4)
    assert perceptual(clip, clip) == 0
    assert perceptual(clip, random_clip(5)) > 0


def test_warp_error_vanishes_on_exact_flow() -> None:
    clip = shifted_clip()
    flow = torch.zeros(4, 16, 24, 2)
    flow[..., 0] = -1
    mask = torch.ones(4, 16, 24, dtype=torch.bool)
    assert warp_error(clip, flow, mask) == approx(0, abs=1e-12)
    assert warp_error(clip, flow, mask, "mae") == approx(0, abs=1e-6)
    assert warp_error(clip, torch.zeros(4, 16, 24, 2), mask) > 1e-3


def test_warp_error_ignores_masked_pixels() -> None:
    clip = shifted_clip()
    frames = clip.frames.clone()
    frames[2, :, :4] = 1
    flow = torch.zeros(4, 16, 24, 2)
    flow[..., 0] = -1
    mask = torch.ones(4, 16, 24, dtype=torch.bool)
    mask[1:3, :, :5] = False
    assert warp_error(frames, flow, mask) == approx(0, abs=1e-12)


def test_warp_error_inputs() -> None:
    clip = shifted_clip()
    with warns(UserWarning, match="validity mask"):
        warp_error(clip, torch.zeros(4, 16, 24, 2))
    with raises(ShapeError, match="Flow must be"):
        warp_error(clip, torch.zeros(5, 16, 24, 2))
    with raises(ShapeError, match="Mask must be"):
        warp_error(clip, torch.zeros(4, 16, 24, 2), torch.ones(4, 16, 23, dtype=torch.bool))


def test_frechet_distance() -> None:
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(50, 4)), rng.normal(1.0, 2.0, size=(40, 4))
    assert frechet_distance(a, a) == approx(0, abs=1e-8)
    assert frechet_distance(a, b) == frechet_distance(b, a)
    assert frechet_distance(a, b) > 4
    shifted = a + [3.0, 0, 0, 0]
    assert frechet_distance(a, shifted) == approx(9, abs=1e-6)
    with raises(ShapeError):
        frechet_distance(a, b[:, :3])


def test_gaussian_fit_needs_two_vectors() -> None:
    with raises(InputError, match="at least 2"):
        gaussian_fit(np.zeros((1, 4)), "pred")
    mean, cov = gaussian_fit(np.array([[0.0, 0.0], [2.0, 2.0]]), "gt")
    assert mean.tolist() == [1, 1]
    assert cov.tolist() == [[2, 2], [2, 2]]


def test_crop_box_clamps_to_image() -> None:
    assert crop_box([BBox2D(10, 10, 20, 20)], (32, 48)) == (9, 9, 21, 21)
    assert crop_box([BBox2D(-5, 2, 10, 12), BBox2D(30, 4, 60, 30)], (32, 48), margin=0) == (0, 2, 48, 30)
    with raises(InputError, match="at least one box"):
        crop_box([], (32, 48))
    with raises(InputError, match="Degenerate crop"):
        crop_box([BBox2D(50, 50, 60, 60)], (32, 48))


def test_actor_crop() -> None:
    clip = random_clip(6, 5, 32, 48)
    crop, box = actor_crop(clip, [BBox2D(10, 4, 20, 12)], 0)
    assert box == (10, 4, 20, 12)
    assert torch.equal(crop, clip.frames[:, 4:12, 10:20])


def test_video_feature_net() -> None:
    net = VideoFeatureNet(0)
    clip = random_clip(7)
    features = net.features(clip)
    assert features.shape == (64,)
    assert np.array_equal(features, VideoFeatureNet(0).features(clip))
    assert list(net.parameters()) == []


def test_evaluate_full_resolution() -> None:
    pairs = {"b": (random_clip(1), random_clip(1)), "a": (random_clip(2), random_clip(3))}
    report = evaluate(pairs)
    assert list(report.to_dict()["clips"]) == ["a", "b"]
    assert report.clips["b"]["psnr"] == 99
    assert report.clips["b"]["ssim"] == approx(1)
    assert "e_warp" not in report.clips["a"]
    assert report.vfid is not None and report.vfid >= 0
    assert set(report.aggregate) == {"psnr", "ssim", "perceptual", "vfid"}
    assert report.aggregate["psnr"] == approx((99 + report.clips["a"]["psnr"]) / 2)


def test_evaluate_warp_error_and_single_clip() -> None:
    clip = shifted_clip(5, 16, 16)
    flow = torch.zeros(4, 16, 16, 2)
    flow[..., 0] = -1
    report = evaluate({"only": (clip, clip)}, flows={"only": (flow, torch.ones(4, 16, 16, dtype=torch.bool))})
    assert report.clips["only"]["e_warp"] == approx(0, abs=1e-12)
    assert report.vfid is None
    assert "vfid" not in report.aggregate


def test_evaluate_actor_centric() -> None:
    cfg = MetricsConfig(mode="actor_centric", margin=0.5)
    clip = random_clip(8, 5, 32, 48)
    boxes = {"x": [BBox2D(10, 10, 22, 22)] * 5}
    report = evaluate({"x": (clip, clip)}, cfg, boxes)
    assert report.crop_boxes["x"] == [4, 4, 28, 28]
    assert report.to_dict()["mode"] == "actor_centric"
    with raises(InputError, match="needs boxes"):
        evaluate({"x": (clip, clip)}, cfg)


def test_metric_report_json() -> None:
    report = MetricReport("full_resolution", {"a": {"psnr": 30.0, "ssim": 0.9}}, vfid=1.5)
    assert report.aggregate == {"psnr": 30.0, "ssim": 0.9, "vfid": 1.5}
    assert loads(report.to_json())["aggregate"]["vfid"] == 1.5


def test_metrics_config_validation() -> None:
    with raises(ConfigError, match="evaluation mode"):
        MetricsConfig(mode="crop")
    with raises(ConfigError, match="warp_norm"):
        MetricsConfig(warp_norm="l3")
    with raises(ConfigError, match="margin"):
        MetricsConfig(margin=-1)
