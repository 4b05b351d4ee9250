import logging
from pathlib import Path
from typing import Callable, Optional, Sequence

import click

from .carplib.config import ConfigError, RunConfig, parse_lines
from .common_base import composed, print_version

EPILOG = "Consistent assignment of views over random partitions, at desk scale."


def click_callback_wrap_exit(cb: Callable[[], None]):
    """Execute a callback from click callback function and exit"""

    def wrap(ctx: click.Context, param: click.Parameter, value: str):
        if not value or ctx.resilient_parsing:
            return
        cb()
        ctx.exit()

    return wrap


def main_options():
    return composed(
        click.option(
            "--version",
            is_flag=True,
            callback=click_callback_wrap_exit(print_version),
            expose_value=False,
            is_eager=True,
            help="Print program version then exit.",
        ),
    )


def common_options():
    return composed(
        click.help_option("-h", "--help"),
    )


def init_logging(verbose: int, quiet: int):
    """INFO by default, every -v one level lower, every -q one level higher"""
    level = min(logging.CRITICAL, max(logging.DEBUG, logging.INFO + 10 * (quiet - verbose)))
    logging.basicConfig(
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        level=level,
    )
    logging.root.setLevel(level)


def load_config(path: Optional[Path], overrides: Sequence[str] = ()) -> RunConfig:
    """Read a key=value config file, apply key=value overrides and validate"""
    try:
        data = parse_lines(path.read_text().splitlines(), str(path)) if path else {}
        data.update(parse_lines(overrides, "--set"))
        return RunConfig(data)
    except ConfigError as e:
        raise click.UsageError(str(e)) from e
