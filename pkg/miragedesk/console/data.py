from concurrent.futures import ProcessPoolExecutor
from json import dumps
from pathlib import Path
from shutil import copy2
from warnings import warn

import numpy as np
from click import Choice
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
from .util import EnvVars
from .util import color_option
from .util import config_option
from .util import docstring_format
from .util import help_option
from .util import out_option
from .util import refuse_existing
from .util import report
from .util import seed_option
from ..core import save_clip
from ..exceptions import InputError
from ..exceptions import MirageError
from ..synth import CuratedPair
from ..synth import curate
from ..synth import load_bundle
from ..synth import save_bundle
from ..synth import synth_scene

_bundle_path = PathClick(exists=True, file_okay=False, path_type=Path)


def scene_seeds(seed: int, count: int) -> list[int]:
    return [int(s.generate_state(1, np.uint64)[0]) for s in np.random.SeedSequence(seed).spawn(count)]


def split_scenes(names: list[str], seed: int, val_fraction: float) -> dict[str, list[str]]:
    order: list[str] = [names[i] for i in np.random.default_rng(seed).permutation(len(names))]
    n_val: int = int(len(names) * val_fraction + 0.5) if len(names) > 1 else 0
    return {"train": sorted(order[n_val:]), "val": sorted(order[:n_val])}


def curate_folder(folder: Path, mode: str) -> tuple[str, CuratedPair | None, str | None]:
    try:
        return folder.name, curate(load_bundle(folder), mode), None
    except (MirageError, OSError, KeyError, ValueError) as err:
        return folder.name, None, f"{type(err).__name__}: {err}"


def curate_many(folders: list[Path], mode: str = "diagonal", workers: int = 1
                ) -> list[tuple[str, CuratedPair | None, str | None]]:
    """Curate every bundle folder, in order; failures are returned with their reason instead of raised."""
    if workers > 1 and len(folders) > 1:
        with ProcessPoolExecutor(min(workers, len(folders))) as pool:
            return list(pool.map(curate_folder, folders, [mode] * len(folders)))
    return [curate_folder(f, mode) for f in folders]


def write_pair(pair: CuratedPair, bundle: Path, folder: Path):
    save_clip(pair.x_ni, folder / "ni")
    save_clip(pair.x_gt, folder / "gt")
    copy2(bundle / "boxes.json", folder / "boxes.json")
    if (flow := bundle / "flow" / "flow.mrg").is_file():
        (folder / "flow").mkdir(parents=True, exist_ok=True)
        copy2(flow, folder / "flow" / "flow.mrg")
    (folder / "report.json").write_text(dumps(pair.report.to_dict(), indent=2))


@command("synth", short_help="Generate synthetic scene bundles.")
@config_option
@seed_option
@out_option
@option("--count", type=int, default=None, help="Number of scenes [default: data.scenes].")
@color_option
@help_option
@pass_context
@docstring_format()
def data_synth(ctx: Context, config: Path | None, seed: int, out: Path, count: int | None):
    """
    Generate procedural scene bundles in {yellow}--out{reset}. Each bundle holds the ground-truth clip, the
    background with the target object removed, the object and asset Gaussian sets, cameras, exact flow and
    per-frame boxes. The same {yellow}--seed{reset} always produces the same bundles.

    An existing non-empty output folder is refused.
    """

    cfg: RunConfig = load_config(config)
    count = cfg.data.scenes if count is None else count
    if count < 0:
        raise InputError(f"count must not be negative, got {count}")
    refuse_existing(ctx, out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out)
    names: list[str] = []
    for i, scene_seed in enumerate(scene_seeds(seed, count)):
        save_bundle(synth_scene(scene_seed, cfg.data.scene_spec()), out / (name := f"scene_{i:04d}"))
        names.append(name)
        echo(f"{blue}{name}{reset} {yellow}{i + 1}/{count}{reset}", color=ctx.color)
    (out / "manifest.json").write_text(dumps({"seed": seed, "scenes": names}, indent=2))
    echo(report([("Scenes", count), ("Folder", out)]), color=ctx.color)


@command("align", short_help="Align one bundle and print the report.")
@argument("bundle", type=_bundle_path)
@option("--mode", type=Choice(["diagonal", "edges"]), default=None, help="Refinement fit [default: data.refinement].")
@config_option
@option("--report", "report_file", type=PathClick(dir_okay=False, writable=True, path_type=Path), default=None,
        help="Write the alignment report as JSON.")
@color_option
@help_option
@pass_context
@docstring_format()
def data_align(ctx: Context, bundle: Path, mode: str | None, config: Path | None, report_file: Path | None):
    """
    Run coarse 3D similarity alignment and 2D box refinement on {yellow}BUNDLE{reset} and print the recovered
    transforms with the box overlap before and after refinement.
    """

    cfg: RunConfig = load_config(config)
    pair: CuratedPair = curate(load_bundle(bundle), mode or cfg.data.refinement)
    if report_file:
        report_file.write_text(dumps(pair.report.to_dict(), indent=2))
    r = pair.report
    echo(report([
        ("Scale", f"{r.similarity.s:.6f}"),
        ("Rotation", [[round(v, 6) for v in row] for row in r.similarity.R.tolist()]),
        ("Translation", [round(v, 6) for v in r.similarity.t.tolist()]),
        ("Refinement scale", f"{r.refinement.sigma:.6f}"),
        ("Refinement shift", [round(v, 3) for v in r.refinement.d.tolist()]),
        ("IoU coarse", f"{r.mean_iou_pre:.4f}"),
        ("IoU refined", f"{r.mean_iou_post:.4f}"),
        ("Center error coarse", f"{r.mean_center_error_pre:.3f} px"),
        ("Center error refined", f"{r.mean_center_error_post:.3f} px"),
    ]), color=ctx.color)


@command("curate", short_help="Build naive-insertion training pairs.")
@argument("bundles", type=_bundle_path)
@config_option
@seed_option
@out_option
@color_option
@help_option
@pass_context
@docstring_format()
def data_curate(ctx: Context, bundles: Path, config: Path | None, seed: int, out: Path):
    """
    Align and composite every bundle in {yellow}BUNDLES{reset} into {yellow}--out{reset}/pairs/ID/{{ni,gt}}
    with the alignment report of each pair, and split the scenes into train and validation sets
    ({cyan}splits.json{reset}, seeded by {yellow}--seed{reset}).

    Bundles that cannot be read are skipped with a warning. At least one pair must be produced.
    """

    cfg: RunConfig = load_config(config)
    refuse_existing(ctx, out)
    folders: list[Path] = sorted(p for p in bundles.iterdir() if p.is_dir())
    produced: list[str] = []
    ious: list[tuple[float, float]] = []
    for name, pair, reason in curate_many(folders, cfg.data.refinement, EnvVars.workers()):
        if pair is None:
            warn(f"Skipped bundle {name!r}: {reason}")
            echo(f"{red}{name}{reset} skipped: {reason}", color=ctx.color)
            continue
        write_pair(pair, bundles / name, out / "pairs" / name)
        produced.append(name)
        ious.append((pair.report.mean_iou_pre, pair.report.mean_iou_post))
        echo(f"{blue}{name}{reset} IoU {yellow}{ious[-1][0]:.3f}{reset} -> {yellow}{ious[-1][1]:.3f}{reset}",
             color=ctx.color)
    if not produced:
        raise InputError(f"No pairs produced from {str(bundles)!r}")
    splits: dict[str, list[str]] = split_scenes(produced, seed, cfg.data.val_fraction)
    (out / "splits.json").write_text(dumps({"seed": seed, **splits}, indent=2))
    cfg.save(out)
    echo(report([("Pairs", len(produced)), ("Skipped", len(folders) - len(produced)),
                 ("Train", len(splits["train"])), ("Validation", len(splits["val"])),
                 ("Mean IoU coarse", f"{np.mean([i for i, _ in ious]):.4f}"),
                 ("Mean IoU refined", f"{np.mean([i for _, i in ious]):.4f}")]), color=ctx.color)
