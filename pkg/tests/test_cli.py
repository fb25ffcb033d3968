from json import loads
from pathlib import Path

from click.testing import CliRunner
from click.testing import Result
from pytest import CaptureFixture
from pytest import MonkeyPatch
from pytest import mark
from pytest import raises
from pytest import warns

from miragedesk.__main__ import main
from miragedesk.__version__ import __version__
from miragedesk.console import app
from miragedesk.console.config import parse_config
from miragedesk.console.util import Bar
from miragedesk.core import load_clip
from miragedesk.core import save_clip
from miragedesk.exceptions import InputError
from miragedesk.pipeline import save_checkpoint

from .conftest import random_clip
from .conftest import tiny_model


def invoke(*args: str | Path) -> Result:
    return CliRunner().invoke(app, [str(a) for a in args])


def synth(config: Path, out: Path, count: int = 2, seed: int = 0) -> Path:
    result = invoke("synth", "--config", config, "--seed", str(seed), "--out", out, "--count", str(count))
    assert result.exit_code == 0, result.output
    return out


def test_version() -> None:
    result = invoke("--version")
    assert result.exit_code == 0
    assert result.output.strip() == f"mirage {__version__}"


def test_help_command() -> None:
    result = invoke("help", "train")
    assert result.exit_code == 0, result.output
    assert "STAGE" in result.output
    assert "--init" in result.output
    assert invoke("help", "config", "show").exit_code == 0
    assert "synth" in invoke("help").output


def test_help_unknown_command() -> None:
    result = invoke("help", "fly")
    assert result.exit_code == 2
    assert "No such command 'fly'" in result.output


def test_progress_bar(capsys: CaptureFixture[str]) -> None:
    bar = Bar(10)
    bar.update(4, 2, 0.5)
    bar.update(4, 4)
    bar.close()
    assert capsys.readouterr().out == "\r[#####     ] 2/4 loss 0.5\r[##########] 4/4\n"


def test_config_defaults_parse_back() -> None:
    result = invoke("config", "defaults")
    assert result.exit_code == 0
    assert parse_config(result.output) == parse_config("")


def test_config_show(tiny_config: Path) -> None:
    result = invoke("config", "show", "--config", tiny_config)
    assert result.exit_code == 0
    assert "training.steps" in result.output


def test_synth_nothing(tmp_path: Path, tiny_config: Path) -> None:
    synth(tiny_config, tmp_path / "bundles", 0)
    assert loads((tmp_path / "bundles" / "manifest.json").read_text()) == {"seed": 0, "scenes": []}
    assert (tmp_path / "bundles" / "config.ini").is_file()


def test_synth_is_deterministic(tmp_path: Path, tiny_config: Path) -> None:
    a = synth(tiny_config, tmp_path / "a", 1, 7)
    b = synth(tiny_config, tmp_path / "b", 1, 7)
    frame = Path("scene_0000", "gt", "frame_0000.png")
    assert (a / frame).read_bytes() == (b / frame).read_bytes()
    assert (a / "scene_0000" / "boxes.json").read_text() == (b / "scene_0000" / "boxes.json").read_text()


def test_synth_refuses_existing_output(tmp_path: Path, tiny_config: Path) -> None:
    (out := tmp_path / "out").mkdir()
    (out / "file.txt").write_text("x")
    result = invoke("synth", "--config", tiny_config, "--out", out, "--count", "1")
    assert result.exit_code == 2
    assert "exists" in result.output
    assert not (out / "manifest.json").exists()


def test_synth_negative_count(tmp_path: Path, tiny_config: Path) -> None:
    result = invoke("synth", "--config", tiny_config, "--out", tmp_path / "out", "--count", "-1")
    assert isinstance(result.exception, InputError)


def test_align_report(tmp_path: Path, tiny_config: Path) -> None:
    bundles = synth(tiny_config, tmp_path / "bundles", 1)
    result = invoke("align", bundles / "scene_0000", "--mode", "edges", "--report", tmp_path / "report.json")
    assert result.exit_code == 0, result.output
    assert "IoU refined" in result.output
    assert loads((tmp_path / "report.json").read_text())["refinement"]


def test_curate_skips_broken_bundles(tmp_path: Path, tiny_config: Path) -> None:
    bundles = synth(tiny_config, tmp_path / "bundles")
    (bundles / "broken").mkdir()
    with warns(UserWarning, match="Skipped bundle 'broken'"):
        result = invoke("curate", bundles, "--config", tiny_config, "--out", tmp_path / "curated")
    assert result.exit_code == 0, result.output
    assert "broken" in result.output
    pairs = tmp_path / "curated" / "pairs"
    assert sorted(p.name for p in pairs.iterdir()) == ["scene_0000", "scene_0001"]
    for name in ("ni", "gt", "boxes.json", "report.json", "flow"):
        assert (pairs / "scene_0000" / name).exists()
    splits = loads((tmp_path / "curated" / "splits.json").read_text())
    assert sorted(splits["train"] + splits["val"]) == ["scene_0000", "scene_0001"]


def test_curate_without_pairs(tmp_path: Path, tiny_config: Path) -> None:
    (bundles := tmp_path / "bundles").mkdir()
    (bundles / "broken").mkdir()
    with warns(UserWarning):
        result = invoke("curate", bundles, "--config", tiny_config, "--out", tmp_path / "curated")
    assert isinstance(result.exception, InputError)
    assert "No pairs produced" in str(result.exception)


def test_eval_identical_clips(tmp_path: Path, tiny_config: Path) -> None:
    synth(tiny_config, tmp_path / "bundles")
    assert invoke("curate", tmp_path / "bundles", "--config", tiny_config, "--out", tmp_path / "curated").exit_code == 0
    result = invoke("eval", "--pred", tmp_path / "curated", "--gt", tmp_path / "curated", "--naive", "--per-clip",
                    "--config", tiny_config, "--out", tmp_path / "scores")
    assert result.exit_code == 0, result.output
    metrics = loads((tmp_path / "scores" / "metrics.json").read_text())
    assert set(metrics["methods"]) == {"curated", "naive"}
    clips = metrics["methods"]["curated"]["clips"]
    assert set(clips) == {"scene_0000", "scene_0001"}
    assert all(c["psnr"] == 99 for c in clips.values())
    assert all("e_warp" in c for c in clips.values())
    assert all(c["psnr"] < 99 for c in metrics["methods"]["naive"]["clips"].values())
    assert "vfid" in metrics["methods"]["naive"]["aggregate"]
    assert (tmp_path / "scores" / "config.ini").is_file()
    lines = result.output.splitlines()
    header = next(i for i, line in enumerate(lines) if line.startswith("method"))
    assert lines[header].split() == ["method", "psnr", "ssim", "perceptual", "e_warp", "vfid"]
    assert [line.split()[0] for line in lines[header + 1:header + 3]] == ["curated", "naive"]
    assert sum(line.startswith("clip") for line in lines) == 2


def test_eval_compares_methods(tmp_path: Path) -> None:
    save_clip(gt := random_clip(0, 5, 32, 48), tmp_path / "gt" / "clip")
    save_clip(gt, tmp_path / "runs" / "a" / "clip")
    save_clip(random_clip(1, 5, 32, 48), tmp_path / "other" / "a" / "clip")
    result = invoke("eval", "--pred", tmp_path / "runs" / "a", "--pred", tmp_path / "other" / "a",
                    "--gt", tmp_path / "gt", "--out", tmp_path / "scores")
    assert result.exit_code == 0, result.output
    methods = loads((tmp_path / "scores" / "metrics.json").read_text())["methods"]
    assert list(methods) == ["a", "a-2"]
    assert methods["a"]["aggregate"]["psnr"] == 99
    assert methods["a-2"]["aggregate"]["psnr"] < 99
    assert "clip" not in [line.split()[0] for line in result.output.splitlines() if line.strip()]

    result = invoke("eval", "--pred", tmp_path / "runs" / "a", "--gt", tmp_path / "gt", "--naive",
                    "--out", tmp_path / "naive")
    assert isinstance(result.exception, InputError)
    assert "holds no naive insertions" in str(result.exception)


def test_train_needs_previous_stage(tmp_path: Path) -> None:
    result = invoke("train", "h", "--data", tmp_path, "--out", tmp_path / "run")
    assert result.exit_code == 1
    assert isinstance(result.exception, InputError)
    assert "needs a stage A checkpoint" in str(result.exception)


def test_main_reports_missing_checkpoint_component(tmp_path: Path, monkeypatch: MonkeyPatch,
                                                   capsys: CaptureFixture[str]) -> None:
    save_clip(random_clip(0, 5, 32, 48), tmp_path / "clip")
    save_checkpoint(tiny_model(), tmp_path / "ckpt")
    (tmp_path / "ckpt" / "denoiser.mrg").unlink()
    monkeypatch.setattr("sys.argv", ["mirage", "edit", str(tmp_path / "clip"), "--ckpt", str(tmp_path / "ckpt"),
                                     "--out", str(tmp_path / "edited")])
    with raises(SystemExit) as exit_info:
        main()
    assert exit_info.value.code == 1
    assert "Missing checkpoint component 'denoiser'" in capsys.readouterr().err


def test_main_usage_error_is_a_user_error(tmp_path: Path, monkeypatch: MonkeyPatch) -> None:
    monkeypatch.setattr("sys.argv", ["mirage", "train", "x", "--data", str(tmp_path), "--out", str(tmp_path / "o")])
    with raises(SystemExit) as exit_info:
        main()
    assert exit_info.value.code == 1


@mark.slow
def test_curate_split(tmp_path: Path, tiny_config: Path) -> None:
    synth(tiny_config, tmp_path / "bundles", 10)
    assert invoke("curate", tmp_path / "bundles", "--config", tiny_config, "--seed", "3",
                  "--out", tmp_path / "curated").exit_code == 0
    splits = loads((tmp_path / "curated" / "splits.json").read_text())
    assert (len(splits["train"]), len(splits["val"])) == (8, 2)
    assert not set(splits["train"]) & set(splits["val"])


@mark.slow
def test_train_edit_eval_chain(tmp_path: Path, tiny_config: Path) -> None:
    synth(tiny_config, tmp_path / "bundles")
    assert invoke("curate", tmp_path / "bundles", "--config", tiny_config, "--out", tmp_path / "curated").exit_code == 0
    init: Path | None = None
    for stage in ("p", "a", "h"):
        args: list[str | Path] = ["train", stage, "--data", tmp_path / "curated", "--config", tiny_config,
                                  "--out", tmp_path / stage]
        result = invoke(*args, *(("--init", init) if init else ()))
        assert result.exit_code == 0, result.output
        summary = loads((tmp_path / stage / "summary.json").read_text())
        assert summary["stage"] == stage.upper()
        assert summary["steps"] == 2
        assert len((tmp_path / stage / "loss.jsonl").read_text().splitlines()) == 2
        init = tmp_path / stage

    result = invoke("train", "h", "--data", tmp_path / "curated", "--init", tmp_path / "p", "--out", tmp_path / "x")
    assert isinstance(result.exception, InputError)

    result = invoke("edit", tmp_path / "curated", "--ckpt", tmp_path / "h", "--out", tmp_path / "edited")
    assert result.exit_code == 0, result.output
    edited = load_clip(tmp_path / "edited" / "scene_0000")
    assert edited.frames.shape == (5, 32, 48, 3)
    timings = loads((tmp_path / "edited" / "scene_0000" / "timings.json").read_text())
    assert set(timings) == {"encode", "denoise", "decode"}

    result = invoke("eval", "--pred", tmp_path / "edited", "--gt", tmp_path / "curated", "--mode", "actor_centric",
                    "--out", tmp_path / "scores")
    assert result.exit_code == 0, result.output
    metrics = loads((tmp_path / "scores" / "metrics.json").read_text())
    assert metrics["mode"] == "actor_centric"
    assert set(metrics["methods"]["edited"]["clips"]) == {"scene_0000", "scene_0001"}
