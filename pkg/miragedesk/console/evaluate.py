from dataclasses import replace
from json import dumps
from json import loads
from pathlib import Path

import torch
from click import Context
from click import Path as PathClick
from click import command
from click import echo
from click import option
from click import pass_context

from .colors import *
from .config import RunConfig
from .config import load_config
from .util import ModeChoice
from .util import clip_folders
from .util import color_option
from .util import config_option
from .util import docstring_format
from .util import help_option
from .util import out_option
from .util import refuse_existing
from .util import report
from .util import table
from ..alignment import BBox2D
from ..core import TensorContainer
from ..core import VideoClip
from ..core import load_clip
from ..exceptions import InputError
from ..metrics import HIGHER_IS_BETTER
from ..metrics import MetricReport
from ..metrics import MetricsConfig
from ..metrics import evaluate

_folder_path = PathClick(exists=True, file_okay=False, path_type=Path)


def clip_extras(folder: Path) -> tuple[list[BBox2D] | None, tuple[torch.Tensor, torch.Tensor | None] | None]:
    """Target boxes and flow stored next to a clip, in the clip folder or in its pair folder."""
    boxes: list[BBox2D] | None = None
    flow: tuple[torch.Tensor, torch.Tensor | None] | None = None
    for base in (folder, folder.parent):
        if boxes is None and (boxes_file := base / "boxes.json").is_file():
            boxes = [BBox2D(*b) for b in loads(boxes_file.read_text())["target"]]
        if flow is None and (flow_file := base / "flow" / "flow.mrg").is_file():
            container: TensorContainer = TensorContainer.load(flow_file)
            flow = container.tensors["flow"], container.tensors.get("mask")
    return boxes, flow


def metric_highlights(rows: list[list[str]], names: list[str], values: list[dict[str, float]]
                      ) -> dict[tuple[int, int], str]:
    highlights: dict[tuple[int, int], str] = {}
    if len(rows) < 2:
        return highlights
    for c, name in enumerate(names, start=1):
        column: list[float] = [v[name] for v in values]
        best, worst = (max, min) if HIGHER_IS_BETTER[name] else (min, max)
        if best(column) == worst(column):
            continue
        highlights[(column.index(best(column)), c)] = role_color("best")
        highlights[(column.index(worst(column)), c)] = role_color("worst")
    return highlights


def method_labels(folders: tuple[Path, ...]) -> list[str]:
    labels: list[str] = []
    for folder in folders:
        label, n = folder.name, 2
        while label in labels:
            label, n = f"{folder.name}-{n}", n + 1
        labels.append(label)
    return labels


def method_pairs(pred_folders: dict[str, Path], gt_folders: dict[str, Path]) -> dict[str, tuple[VideoClip, VideoClip]]:
    if len(pred_folders) == len(gt_folders) == 1:
        gt_folders = {next(iter(pred_folders)): next(iter(gt_folders.values()))}
    if missing := sorted(set(gt_folders) - set(pred_folders)):
        raise InputError(f"No prediction for clip {missing[0]!r}")
    return {name: (load_clip(pred_folders[name]), load_clip(folder)) for name, folder in gt_folders.items()}


@command("eval", short_help="Score edited clips against ground truth.")
@option("--pred", type=_folder_path, required=True, multiple=True,
        help="Predicted clips of one method, repeat to compare methods.")
@option("--gt", type=_folder_path, required=True, help="Ground-truth clips or curated pairs.")
@option("--mode", type=ModeChoice(), default=None, help="Evaluation mode [default: metrics.mode].")
@option("--naive", is_flag=True, default=False, help="Add a row for the naive insertions stored with --gt.")
@option("--per-clip", is_flag=True, default=False, help="Also print per-clip tables.")
@config_option
@out_option
@color_option
@help_option
@pass_context
@docstring_format(modes="\n".join(f"    * {i.value} {i.help}" for i in ModeChoice.completion_items))
def evaluate_app(ctx: Context, pred: tuple[Path, ...], gt: Path, mode: str | None, naive: bool, per_clip: bool,
                 config: Path | None, out: Path):
    """
    Compare every clip in each {yellow}--pred{reset} folder with the clip of the same id in {yellow}--gt{reset}
    and write per-clip and aggregate metrics of every method to {yellow}--out{reset}/{cyan}metrics.json{reset}.
    Methods are named after their folders and printed one per row, with the aggregate metrics as columns.

    \b
{modes}

    Actor-centric evaluation crops both clips to the target boxes stored with the ground truth and does not
    report the warping error. The warping error needs the flow stored with the ground truth.
    """

    cfg: RunConfig = load_config(config)
    metrics_cfg: MetricsConfig = replace(cfg.metrics, mode=mode) if mode else cfg.metrics
    refuse_existing(ctx, out)
    gt_folders: dict[str, Path] = clip_folders(gt, "gt")
    labels: list[str] = method_labels((*pred, Path("naive")) if naive else pred)
    methods: dict[str, dict[str, Path]] = {label: clip_folders(folder, "gt") for label, folder in zip(labels, pred)}
    if naive:
        if any(folder.name != "gt" for folder in gt_folders.values()):
            raise InputError(f"{str(gt)!r} is not a curated pairs folder, it holds no naive insertions")
        methods[labels[-1]] = {name: folder.parent / "ni" for name, folder in gt_folders.items()}

    boxes: dict[str, list[BBox2D]] = {}
    flows: dict[str, tuple[torch.Tensor, torch.Tensor | None]] = {}
    for name, folder in gt_folders.items():
        clip_boxes, clip_flow = clip_extras(folder)
        if clip_boxes is not None:
            boxes[name] = clip_boxes
        if clip_flow is not None:
            flows[name] = clip_flow

    results: dict[str, MetricReport] = {label: evaluate(method_pairs(folders, gt_folders), metrics_cfg, boxes, flows)
                                        for label, folders in methods.items()}
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(dumps({"mode": metrics_cfg.mode,
                                             "methods": {k: r.to_dict() for k, r in results.items()}}, indent=2))
    cfg.save(out)

    if per_clip:
        for label, result in results.items():
            names: list[str] = [n for n in result.aggregate if n != "vfid"]
            rows: list[list[str]] = [[clip, *(f"{v[n]:.4f}" for n in names)] for clip, v in result.clips.items()]
            echo(f"{bold}{label}{reset}", color=ctx.color)
            echo(table(["clip", *names], rows, metric_highlights(rows, names, list(result.clips.values()))),
                 color=ctx.color)
            echo(color=ctx.color)

    aggregates: list[dict[str, float]] = [r.aggregate for r in results.values()]
    names = [n for n in aggregates[0] if all(n in a for a in aggregates)]
    rows = [[label, *(f"{a[n]:.4f}" for n in names)] for label, a in zip(results, aggregates)]
    echo(table(["method", *names], rows, metric_highlights(rows, names, aggregates)), color=ctx.color)
    echo(report([("Mode", metrics_cfg.mode), ("Methods", len(results)), ("Clips", len(gt_folders))]),
         color=ctx.color)
