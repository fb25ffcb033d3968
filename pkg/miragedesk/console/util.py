from enum import Enum
from os import environ
from pathlib import Path
from shutil import get_terminal_size
from sys import stderr
from typing import TextIO

from click import Choice
from click import Context
from click import Option
from click import Parameter
from click import Path as PathClick
from click import UsageError
from click import echo
from click import help_option as help_option_click
from click import option
from click.core import ParameterSource
from click.shell_completion import CompletionItem
from click_help_colors import HelpColorsGroup
from wcwidth import wcswidth

from .colors import *
from ..exceptions import LoadError

__prog_name__ = "mirage"
_envar_prefix: str = __prog_name__.upper()
_envar_config: str = f"{_envar_prefix}_CONFIG"
_envar_no_color: str = f"{_envar_prefix}_NOCOLOR"
_envar_num_workers: str = f"{_envar_prefix}_NUM_WORKERS"
_help_option_names: list[str] = ["--help", "-h"]


class OutputType(int, Enum):
    rich = 1
    simple = 2


def color_callback(ctx: Context, param: Option, value: bool) -> bool:
    if (src := ctx.get_parameter_source(param.name)) == ParameterSource.COMMANDLINE:
        ctx.color = value
    elif ctx.color is None and src == ParameterSource.ENVIRONMENT:
        EnvVars.print_nocolor()
        ctx.color = value = False
    return value


def config_callback(ctx: Context, param: Option, value: Path | None) -> Path | None:
    if value is not None and ctx.get_parameter_source(param.name) == ParameterSource.ENVIRONMENT:
        EnvVars.print_config()
    return value

config_option = option("--config", type=PathClick(exists=True, dir_okay=False, path_type=Path), default=None,
                       envvar=_envar_config, show_envvar=True, callback=config_callback,
                       help="Run configuration file.")
seed_option = option("--seed", type=int, default=0, show_default=True, help="Random seed.")
out_option = option("--out", type=PathClick(file_okay=False, writable=True, path_type=Path), required=True,
                    help="Output folder.")
color_option = option("--color/--no-color", is_flag=True, is_eager=True, default=None, expose_value=False,
                      callback=color_callback, envvar=_envar_no_color, help="Toggle ANSI colors.")
help_option = help_option_click(*_help_option_names, is_eager=True, help="Show help message and exit.")


class CustomHelpColorsGroup(HelpColorsGroup):
    def __init__(self, *args, **kwargs) -> None:
        super().__init__(*args, **kwargs)
        self.help_headers_color = "blue"
        self.help_options_color = "yellow"


class CompleteChoice(Choice):
    completion_items: list[CompletionItem] = []

    def __init__(self):
        super(CompleteChoice, self).__init__([c.value for c in self.completion_items], False)

    def shell_complete(self, ctx: Context, param: Parameter, incomplete: str) -> list[CompletionItem]:
        return [i for i in self.completion_items if i.value.lower().startswith(incomplete.lower())]


class StageChoice(CompleteChoice):
    completion_items: list[CompletionItem] = [
        CompletionItem("p", help="Fit the base autoencoder and denoiser"),
        CompletionItem("a", help="Adapt the autoencoder to injected features"),
        CompletionItem("h", help="Train the harmonization adapters"),
    ]


class ModeChoice(CompleteChoice):
    completion_items: list[CompletionItem] = [
        CompletionItem("full_resolution", help="Score whole frames"),
        CompletionItem("actor_centric", help="Score crops around the inserted object"),
    ]


class EnvVars:
    CONFIG: Path | None = Path(p) if (p := environ.get(_envar_config, None)) is not None else None
    NOCOLOR: bool = environ.get(_envar_no_color, None) is not None
    NUM_WORKERS: int | None = int(e) if (e := environ.get(_envar_num_workers, None)) is not None else None

    @classmethod
    def print_config(cls, file: TextIO = stderr):
        if cls.CONFIG:
            echo(f"Using {_envar_config}: {cls.CONFIG}", file=file)

    @classmethod
    def print_nocolor(cls, file: TextIO = stderr):
        if cls.NOCOLOR:
            echo(f"Using {_envar_no_color}", file=file)

    @classmethod
    def print_num_workers(cls, file: TextIO = stderr):
        if cls.NUM_WORKERS is not None:
            echo(f"Using {_envar_num_workers}: {cls.NUM_WORKERS}", file=file)

    @classmethod
    def workers(cls) -> int:
        if cls.NUM_WORKERS is None:
            return 1
        cls.print_num_workers()
        if cls.NUM_WORKERS < 1:
            raise UsageError(f"{_envar_num_workers} must be at least 1, got {cls.NUM_WORKERS}")
        return cls.NUM_WORKERS


def docstring_format(*args, **kwargs):
    def inner(obj: {__doc__}) -> {__doc__}:
        obj.__doc__ = (obj.__doc__ or "").format(*args, **colors_dict, **kwargs)
        return obj

    return inner


def terminal_width() -> int:
    return get_terminal_size((0, 0)).columns


def output_type() -> OutputType:
    return OutputType.rich if terminal_width() else OutputType.simple


def pad(value: str, width: int, align: str = "<") -> str:
    fill: str = " " * max(0, width - wcswidth(value))
    return value + fill if align == "<" else fill + value


def report(items: list[tuple[str, object]]) -> str:
    if not items:
        return ""
    name_padding: int = max(wcswidth(name) for name, _ in items)
    return "\n".join(f"{blue}{pad(name, name_padding)}{reset}: {yellow}{value}{reset}" for name, value in items)


def table(headers: list[str], rows: list[list[str]], highlights: dict[tuple[int, int], str] | None = None) -> str:
    """Plain-text table aligned by display width; ``highlights`` maps ``(row, column)`` to an ANSI color."""
    highlights = highlights or {}
    widths: list[int] = [max(wcswidth(str(c)) for c in column) for column in zip(headers, *rows)]
    lines: list[str] = ["  ".join(f"{bold}{pad(h, w)}{reset}" for h, w in zip(headers, widths))]
    for r, row in enumerate(rows):
        lines.append("  ".join(
            f"{highlights[(r, c)]}{pad(str(v), w, '<' if c == 0 else '>')}{reset}" if (r, c) in highlights
            else pad(str(v), w, "<" if c == 0 else ">")
            for c, (v, w) in enumerate(zip(row, widths))))
    return "\n".join(lines)


def refuse_existing(ctx: Context, path: Path):
    if path.exists() and (not path.is_dir() or any(path.iterdir())):
        raise UsageError(f"Output {str(path)!r} exists", ctx)


class Bar:
    """Single-line step progress redrawn in place: ``[####    ] step/total loss``."""

    def __init__(self, length: int):
        self.length: int = max(1, length)

    def update(self, total: int, current: int, loss: float | None = None):
        filled: int = min(self.length, int(current / total * self.length)) if total else self.length
        line: str = f"[{bold}{'#' * filled}{reset}{' ' * (self.length - filled)}] {current}/{total}"
        if loss is not None:
            line += f" loss {yellow}{loss:.4g}{reset}"
        echo("\r" + line, nl=False)

    @staticmethod
    def close(end: str = "\n"):
        echo(end, nl=False)


def clip_folders(root: Path, kind: str = "gt") -> dict[str, Path]:
    """
    Resolve the clips under ``root`` by id. ``root`` may be a clip itself, a folder of clips, or a folder of
    pairs holding ``kind`` sub-clips (a curated ``pairs`` folder, or its parent).
    """
    if (root / "meta.json").is_file():
        return {root.name: root}
    if (root / "pairs").is_dir():
        root = root / "pairs"
    folders: dict[str, Path] = {}
    for folder in sorted(p for p in root.iterdir() if p.is_dir()):
        if (folder / "meta.json").is_file():
            folders[folder.name] = folder
        elif (folder / kind / "meta.json").is_file():
            folders[folder.name] = folder / kind
    if not folders:
        raise LoadError(f"No clips found in {str(root)!r}")
    return folders
