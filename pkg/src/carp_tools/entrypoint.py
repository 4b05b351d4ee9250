#!/usr/bin/env python3

import click

from . import entry_ablate, entry_eval, entry_train
from .common_click import EPILOG, common_options, main_options


@click.group(
    "carptools",
    help="Train and evaluate prototype clustering with consistent assignments over random partitions.",
    epilog=EPILOG,
)
@common_options()
@main_options()
def cli():
    pass


cli.add_command(entry_ablate.cli)
cli.add_command(entry_eval.cli)
cli.add_command(entry_train.cli)


def main():
    cli(max_content_width=9999)


if __name__ == "__main__":
    main()
