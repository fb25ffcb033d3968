from dataclasses import replace
from json import dumps
from json import loads
from pathlib import Path
from typing import Callable

import torch
from click import Context
from click import Path as PathClick
from click import argument
from click import command
from click import echo
from click import option
from click import pass_context

from .colors import *
from .config import RunConfig
from .config import load_config
from .util import Bar
from .util import EnvVars
from .util import OutputType
from .util import StageChoice
from .util import clip_folders
from .util import color_option
from .util import config_option
from .util import docstring_format
from .util import help_option
from .util import out_option
from .util import output_type
from .util import refuse_existing
from .util import report
from .util import seed_option
from .util import terminal_width
from ..adapters import attach_stage_adapters
from ..core import VideoClip
from ..core import load_clip
from ..core import save_clip
from ..exceptions import InputError
from ..pipeline import EditResult
from ..pipeline import MirageModel
from ..pipeline import checkpoint_metadata
from ..pipeline import load_checkpoint
from ..pipeline import save_checkpoint
from ..training import StageConfig
from ..training import TrainResult
from ..training import train_stage_a
from ..training import train_stage_h
from ..training import train_stage_p

_stage_trainers: dict[str, Callable[..., TrainResult]] = {"P": train_stage_p, "A": train_stage_a, "H": train_stage_h}
_stage_requires: dict[str, str] = {"A": "P", "H": "A"}
_folder_path = PathClick(exists=True, file_okay=False, path_type=Path)


def set_threads():
    if EnvVars.NUM_WORKERS is not None:
        torch.set_num_threads(EnvVars.workers())


def load_pairs(data: Path, split: str = "train") -> list[tuple[str, tuple[VideoClip, VideoClip]]]:
    """Load the ``(NI, GT)`` clips of one split of a curated folder, or every pair if it has no split file."""
    pairs_folder: Path = data / "pairs" if (data / "pairs").is_dir() else data
    names: list[str]
    if (splits_file := data / "splits.json").is_file():
        names = loads(splits_file.read_text())[split]
    else:
        names = sorted(p.name for p in pairs_folder.iterdir() if (p / "ni").is_dir() and (p / "gt").is_dir())
    if not names:
        raise InputError(f"No {split} pairs in {str(data)!r}")
    return [(name, (load_clip(pairs_folder / name / "ni"), load_clip(pairs_folder / name / "gt"))) for name in names]


def stage_model(stage: str, cfg: RunConfig, init: Path | None) -> MirageModel:
    if stage == "P":
        return MirageModel(cfg.vae, cfg.injection, cfg.pipeline) if init is None else load_checkpoint(init)
    if init is None:
        raise InputError(f"Stage {stage} needs a stage {_stage_requires[stage]} checkpoint (--init)")
    if (found := checkpoint_metadata(init).get("stage")) != _stage_requires[stage]:
        raise InputError(f"Stage {stage} needs a stage {_stage_requires[stage]} checkpoint, "
                         f"{str(init)!r} is from stage {found}")
    return load_checkpoint(init)


@command("train", short_help="Run one training stage.")
@argument("stage", type=StageChoice(), metavar="STAGE")
@option("--data", type=_folder_path, required=True, help="Curated pairs folder.")
@option("--init", type=_folder_path, default=None, help="Checkpoint of the previous stage.")
@config_option
@seed_option
@out_option
@color_option
@help_option
@pass_context
@docstring_format(stages="\n".join(f"    * {i.value} {i.help}" for i in StageChoice.completion_items))
def model_train(ctx: Context, stage: str, data: Path, init: Path | None, config: Path | None, seed: int,
                out: Path):
    """
    Train {yellow}STAGE{reset} on the train split of the curated pairs in {yellow}--data{reset} and save the
    checkpoint, the loss log ({cyan}loss.jsonl{reset}) and the configuration in {yellow}--out{reset}.

    \b
{stages}

    Stage {yellow}a{reset} continues from a stage {yellow}p{reset} checkpoint and stage {yellow}h{reset} from a
    stage {yellow}a{reset} checkpoint, both given with {yellow}--init{reset}.
    """

    stage = stage.upper()
    cfg: RunConfig = load_config(config)
    stage_cfg: StageConfig = replace(cfg.stage(stage), seed=seed)
    refuse_existing(ctx, out)
    set_threads()
    model: MirageModel = stage_model(stage, cfg, init)
    groups = attach_stage_adapters(model, stage, cfg.adapters)
    dataset = load_pairs(data)
    echo(f"{role_color('stage')}Stage {stage}{reset} {yellow}{len(dataset)}{reset} pairs, "
         f"{yellow}{stage_cfg.steps}{reset} steps", color=ctx.color)

    bar: Bar | None = Bar(min(40, terminal_width() - 32)) if output_type() == OutputType.rich else None
    out.mkdir(parents=True, exist_ok=True)
    try:
        result: TrainResult = _stage_trainers[stage](
            model, [pair for _, pair in dataset], stage_cfg, out / "loss.jsonl",
            (lambda step, total, entry: bar.update(total, step, entry["loss"])) if bar else None)
    finally:
        bar.close() if bar else None

    save_checkpoint(model, out, {"stage": stage, "seed": str(seed)})
    cfg.save(out)
    summary: dict[str, object] = {"stage": stage, "pairs": [n for n, _ in dataset], "steps": len(result.losses),
                                  "first_loss": result.first_loss if result.losses else None,
                                  "last_loss": result.last_loss if result.losses else None,
                                  "adapters": {g.spec.name: g.size for g in groups},
                                  "trainable": len(result.partition.trainable) if result.partition else 0}
    (out / "summary.json").write_text(dumps(summary, indent=2))
    echo(report([("Stage", stage), ("Pairs", len(dataset)), ("Steps", summary["steps"]),
                 ("First loss", summary["first_loss"]), ("Last loss", summary["last_loss"]),
                 ("New adapters", ", ".join(summary["adapters"]) or "-"), ("Checkpoint", out)]), color=ctx.color)


@command("edit", short_help="Edit naive-insertion clips in one step.")
@argument("clips", type=_folder_path)
@option("--ckpt", type=_folder_path, required=True, help="Checkpoint folder.")
@out_option
@color_option
@help_option
@pass_context
@docstring_format()
def model_edit(ctx: Context, clips: Path, ckpt: Path, out: Path):
    """
    Harmonize the naive-insertion clips in {yellow}CLIPS{reset} with the checkpoint in {yellow}--ckpt{reset}.
    {yellow}CLIPS{reset} may be a single clip folder or a curated pairs folder, whose {cyan}ni{reset} clips
    are edited. Each edited clip is saved with a {cyan}timings.json{reset} report.
    """

    refuse_existing(ctx, out)
    set_threads()
    model: MirageModel = load_checkpoint(ckpt)
    model.eval()
    folders: dict[str, Path] = clip_folders(clips, "ni")
    single: bool = (clips / "meta.json").is_file()
    for name, folder in folders.items():
        result: EditResult = model.edit(load_clip(folder))
        save_clip(result.x_dr, target := out if single else out / name)
        (target / "timings.json").write_text(dumps(result.timings, indent=2))
        echo(f"{blue}{name}{reset} " +
             " ".join(f"{k} {yellow}{v * 1000:.1f}ms{reset}" for k, v in result.timings.items()), color=ctx.color)
    echo(report([("Clips", len(folders)), ("Folder", out)]), color=ctx.color)
