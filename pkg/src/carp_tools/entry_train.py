import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

import click
import clickdc

from .carplib.experiment import run_training
from .carplib.trainer import TrainingAborted
from .common_click import EPILOG, common_options, init_logging, load_config

log = logging.getLogger(__name__)


@dataclass
class Args:
    config: Optional[Path] = clickdc.option(
        "-c",
        type=click.Path(exists=True, dir_okay=False, path_type=Path),
        help="Flat key=value configuration file. Missing keys take their defaults.",
    )
    out: Path = clickdc.option(
        "-o",
        required=True,
        type=click.Path(file_okay=False, path_type=Path),
        help="Run directory receiving metrics.jsonl, checkpoints and resolved-config.txt.",
    )
    set: Tuple[str, ...] = clickdc.option(
        "-s",
        multiple=True,
        help="Override one configuration key, in the form key=value.",
    )
    verbose: int = clickdc.option("-v", count=True, help="Be more verbose.")
    quiet: int = clickdc.option("-q", count=True, help="Be more quiet.")


@click.command(
    "train",
    help="""
Train a student/teacher pair with the configured objective.

\b
Writes into the run directory:
  metrics.jsonl        one JSON object per optimizer step
  student.ckpt         final student parameters
  teacher.ckpt         final teacher parameters
  resolved-config.txt  every configuration key with its value

\b
Exits with the following exit status:
  0  on success,
  1  when training aborted on a non-finite loss,
  2  on an unknown or invalid configuration key.
""",
    epilog=EPILOG,
)
@common_options()
@clickdc.adddc("args", Args)
def cli(args: Args):
    init_logging(args.verbose, args.quiet)
    cfg = load_config(args.config, args.set)
    log.debug(f"{cfg}")
    try:
        run_training(cfg, args.out)
    except TrainingAborted as e:
        raise click.ClickException(str(e)) from e
