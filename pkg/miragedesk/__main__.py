from pathlib import Path
from signal import SIGINT
from sys import exit
import sys
from traceback import print_exc

from click import ClickException
from click import echo
from click import secho
from click import UsageError
from click.exceptions import Abort
from click.exceptions import Exit

from .console import app
from .exceptions import UserError

_user_error_code: int = 1
_internal_error_code: int = 2


def _pretty_traceback():
    """Switch the remaining traceback output to pretty_errors, monochrome outside a terminal."""
    import pretty_errors

    pretty_errors.configure(
        filename_display=pretty_errors.FILENAME_EXTENDED,
        line_number_first=True,
        lines_before=3,
        lines_after=1,
        line_color=pretty_errors.RED + "> " + pretty_errors.default_config.line_color,
        truncate_code=True,
        display_locals=False,
    )
    if not pretty_errors.terminal_is_interactive:
        pretty_errors.mono()


def main():
    try:
        exit(app.main(standalone_mode=False) or 0)
    except SystemExit:
        raise
    except Exit as err:
        exit(err.exit_code)
    except (KeyboardInterrupt, Abort):
        print()
        exit(128 + SIGINT)
    except UserError as err:
        secho(f"Error: {err}", fg="red", bold=True, file=sys.stderr)
        exit(_user_error_code)
    except UsageError as err:
        secho(f"Error: {err.format_message()}", fg="red", bold=True, file=sys.stderr,
              color=None if err.ctx is None else err.ctx.color)
        if err.ctx is not None:
            echo("\n" + err.ctx.command.get_usage(err.ctx), file=sys.stderr, color=err.ctx.color)
        exit(_user_error_code)
    except ClickException as err:
        secho("Error: " + err.format_message(), fg="red", bold=True, file=sys.stderr)
        exit(err.exit_code)
    except BaseException:
        echo()
        with Path.cwd().joinpath("mirage.log").open("w") as f:
            print_exc(file=f)
            secho(f"Trace written to {f.name}", fg="red", bold=True, file=sys.stderr)
        _pretty_traceback()
        print_exc()
        exit(_internal_error_code)


if __name__ == "__main__":
    main()
