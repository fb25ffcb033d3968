from typing import Type

from click import Command
from click import Context
from click import Group
from click import Option
from click import UsageError
from click import argument
from click import echo
from click import group
from click import option
from click import pass_context
from click.shell_completion import BashComplete
from click.shell_completion import CompletionItem
from click.shell_completion import FishComplete
from click.shell_completion import ShellComplete
from click.shell_completion import ZshComplete
from click.shell_completion import get_completion_class

from .colors import *
from .config import config_app
from .data import data_align
from .data import data_curate
from .data import data_synth
from .evaluate import evaluate_app
from .model import model_edit
from .model import model_train
from .util import CompleteChoice
from .util import CustomHelpColorsGroup
from .util import __prog_name__
from .util import color_option
from .util import docstring_format
from .util import help_option
from ..__version__ import __version__


class ShellChoice(CompleteChoice):
    completion_items: list[CompletionItem] = [
        CompletionItem(BashComplete.name, help="The Bourne Again SHell"),
        CompletionItem(FishComplete.name, help="The friendly interactive shell"),
        CompletionItem(ZshComplete.name, help="The Z shell")
    ]


def resolve_command(names: list[str]) -> Command:
    """Walk ``names`` down from the root group, stopping at the first leaf command."""
    command: Command = app
    for name in names:
        if not isinstance(command, Group):
            break
        if (command := command.commands.get(name)) is None:
            raise KeyError(name)
    return command


def version_callback(ctx: Context, _param: Option, value: str):
    if not value or ctx.resilient_parsing:
        return
    echo(f"{bold}{__prog_name__}{reset} {yellow}{__version__}{reset}", color=ctx.color)
    ctx.exit()


def commands_completion(ctx: Context, param: Option, incomplete: str) -> list[CompletionItem]:
    try:
        group_: Command = resolve_command(ctx.params.get(param.name, ctx.args))
    except KeyError:
        return []
    return [CompletionItem(name, help=sub.short_help) for name, sub in getattr(group_, "commands", {}).items()
            if name.lower().startswith(incomplete.lower())]


@group(name=__prog_name__, no_args_is_help=True, cls=CustomHelpColorsGroup, add_help_option=False)
@option("--version", is_flag=True, expose_value=False, is_eager=True, callback=version_callback,
        help="Show version and exit.")
@color_option
@help_option
@docstring_format(__prog_name__, __version__)
def app():
    """
    {bold}{0}{reset} {yellow}{1}{reset}

    Desk-scale one-step video harmonization: generate synthetic driving scenes, align and composite 3D assets
    into naive-insertion pairs, train the causal video autoencoder, latent injection and adapters stage by
    stage, edit clips in one denoising step, and score the results.
    """
    pass


@app.command("help", context_settings={"ignore_unknown_options": True})
@argument("commands", nargs=-1, required=False, type=str, callback=lambda _c, _p, v: list(v),
          shell_complete=commands_completion)
@color_option
@help_option
@pass_context
@docstring_format()
def app_help(ctx: Context, commands: list[str]):
    """
    Show the help for {yellow}COMMANDS{reset}, or for {bold}mirage{reset} itself when none is given.
    """

    names: list[str] = [c for c in commands if not c.startswith("-")]
    try:
        target: Command = resolve_command(names)
    except KeyError:
        raise UsageError(f"No such command {' '.join(names)!r}.", ctx)
    prog_name: str = " ".join([ctx.find_root().info_name, *names])
    with target.make_context(prog_name, [], resilient_parsing=True) as help_ctx:
        echo(target.get_help(help_ctx), color=ctx.color)


@app.command("completions", short_help="Generate tab-completion scripts.")
@argument("shell", type=ShellChoice(), callback=lambda _c, _p, v: get_completion_class(v))
@option("--alias", type=str, metavar="NAME", default=None, help="Program name used in the script.")
@color_option
@help_option
@pass_context
@docstring_format("\n    ".join(f" * {s.value}\t{s.help}" for s in ShellChoice.completion_items))
def app_completions(ctx: Context, shell: Type[ShellComplete], alias: str | None):
    """
    Print the tab-completion script for {yellow}SHELL{reset}. Source it from the shell startup file, or save it
    where the shell looks for completions. Use {yellow}--alias{reset} when {yellow}mirage{reset} is installed
    under another name.

    \b
    Supported shells are:
    {0}
    """

    root: Context = ctx.find_root()
    prog_name: str = alias or root.info_name
    complete_var: str = "_" + prog_name.replace("-", "_").upper() + "_COMPLETE"
    echo(shell(root.command, {}, prog_name, complete_var).source())


app.add_command(data_synth, data_synth.name)
app.add_command(data_align, data_align.name)
app.add_command(data_curate, data_curate.name)
app.add_command(model_train, model_train.name)
app.add_command(model_edit, model_edit.name)
app.add_command(evaluate_app, evaluate_app.name)
app.add_command(config_app, config_app.name)
app.list_commands = lambda *_: [
    data_synth.name,
    data_align.name,
    data_curate.name,
    model_train.name,
    model_edit.name,
    evaluate_app.name,
    config_app.name,
    app_completions.name,
    app_help.name,
]
