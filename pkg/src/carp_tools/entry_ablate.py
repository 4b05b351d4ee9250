import concurrent.futures
import csv
import dataclasses
import logging
import statistics
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

import click
import clickdc
import tabulate
from matplotlib.figure import Figure

from .carplib.config import RunConfig
from .carplib.experiment import run_training
from .common_base import andjoin
from .common_click import EPILOG, common_options, init_logging, load_config

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Cell:
    param: str
    value: str
    overrides: Dict[str, Any] = dataclasses.field(hash=False)


def _block_size(base: RunConfig) -> List[Cell]:
    k = base.prototypes
    sizes = sorted({k, k // 2, k // 8, k // 32} - {0}, reverse=True)
    return [Cell("block_size", str(nb), dict(block_size=nb)) for nb in sizes if k % nb == 0]


def _partition_strategy(base: RunConfig) -> List[Cell]:
    return [Cell("partition_strategy", x, dict(partition_strategy=x)) for x in ("constant", "random")]


def _ema(base: RunConfig) -> List[Cell]:
    return [Cell("use_teacher", x, dict(use_teacher=x)) for x in ("true", "false")]


def _prototypes(base: RunConfig) -> List[Cell]:
    return [Cell("prototypes", str(k), dict(prototypes=k, block_size=min(base.block_size, k))) for k in (4, 16, 64)]


def _batch_size(base: RunConfig) -> List[Cell]:
    return [Cell("batch_size", str(n), dict(batch_size=n)) for n in (32, 64, 128, 256)]


SUITES: Dict[str, Callable[[RunConfig], List[Cell]]] = {
    "block_size": _block_size,
    "partition_strategy": _partition_strategy,
    "ema": _ema,
    "prototypes": _prototypes,
    "batch_size": _batch_size,
}

CSV_COLUMNS = [
    "suite",
    "param",
    "value",
    "seed",
    "status",
    "knn_accuracy",
    "max_assignment_fraction",
    "prototype_usage_entropy",
]


@dataclass
class CellResult:
    cell: Cell
    seed: int
    status: str = "ok"
    knn_accuracy: Optional[float] = None
    max_assignment_fraction: Optional[float] = None
    prototype_usage_entropy: Optional[float] = None

    def row(self, suite: str) -> Dict[str, Any]:
        return dict(
            suite=suite,
            param=self.cell.param,
            value=self.cell.value,
            seed=self.seed,
            status=self.status,
            knn_accuracy=self.knn_accuracy,
            max_assignment_fraction=self.max_assignment_fraction,
            prototype_usage_entropy=self.prototype_usage_entropy,
        )


def run_cell(base: RunConfig, cell: Cell, seed: int, out: Path) -> CellResult:
    res = CellResult(cell, seed)
    try:
        cfg = base.replace(seed=seed, **cell.overrides)
        result = run_training(cfg, out / f"{cell.param}={cell.value}" / f"seed{seed}")
    except Exception as e:
        log.exception(f"Cell {cell.param}={cell.value} seed={seed} failed")
        res.status = f"failed: {e}"
        return res
    last = result.metrics[-1]
    res.knn_accuracy = last.knn_accuracy
    res.max_assignment_fraction = last.max_assignment_fraction
    res.prototype_usage_entropy = last.prototype_usage_entropy
    return res


def _medians(results: List[CellResult], cells: List[Cell]) -> List[Tuple[Cell, Optional[float], Optional[float]]]:
    ret = []
    for cell in cells:
        ok = [r for r in results if r.cell == cell and r.status == "ok"]
        acc = [r.knn_accuracy for r in ok if r.knn_accuracy is not None]
        frac = [r.max_assignment_fraction for r in ok if r.max_assignment_fraction is not None]
        ret.append(
            (
                cell,
                statistics.median(acc) if acc else None,
                statistics.median(frac) if frac else None,
            )
        )
    return ret


def write_csv(path: Path, suite: str, results: List[CellResult]):
    with path.open("w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for r in results:
            writer.writerow(r.row(suite))


def write_svg(path: Path, suite: str, results: List[CellResult], cells: List[Cell]):
    """Per-seed k-NN accuracy and collapse fraction with their medians, one column per cell"""
    fig = Figure(figsize=(8, 3.5))
    axes = fig.subplots(1, 2)
    xs = list(range(len(cells)))
    medians = _medians(results, cells)
    for ax, attr, idx, title in (
        (axes[0], "knn_accuracy", 1, "k-NN accuracy"),
        (axes[1], "max_assignment_fraction", 2, "max assignment fraction"),
    ):
        for x, cell in zip(xs, cells):
            ys = [getattr(r, attr) for r in results if r.cell == cell and getattr(r, attr) is not None]
            ax.scatter([x] * len(ys), ys, color="gray", s=10)
        ys = [m[idx] for m in medians]
        ax.plot([x for x, y in zip(xs, ys) if y is not None], [y for y in ys if y is not None], marker="o")
        ax.set_xticks(xs)
        ax.set_xticklabels([c.value for c in cells])
        ax.set_xlabel(cells[0].param if cells else suite)
        ax.set_title(title)
        ax.set_ylim(0, 1.05)
    fig.suptitle(suite)
    fig.tight_layout()
    fig.savefig(path, format="svg")


@dataclass
class Args:
    suite: str = clickdc.option(required=True, type=click.Choice(list(SUITES)), help="Ablation grid to run.")
    out: Path = clickdc.option(
        "-o",
        required=True,
        type=click.Path(file_okay=False, path_type=Path),
        help="Directory receiving the CSV, the SVG plot and one run directory per cell.",
    )
    seeds: int = clickdc.option(default=5, show_default=True, type=click.IntRange(min=1), help="Seeds per cell.")
    jobs: int = clickdc.option(
        "-j", default=1, show_default=True, type=click.IntRange(min=1), help="Cells trained concurrently."
    )
    config: Optional[Path] = clickdc.option(
        "-c",
        type=click.Path(exists=True, dir_okay=False, path_type=Path),
        help="Base configuration shared by every cell.",
    )
    set: Tuple[str, ...] = clickdc.option("-s", multiple=True, help="Override one base configuration key, key=value.")
    verbose: int = clickdc.option("-v", count=True, help="Be more verbose.")
    quiet: int = clickdc.option("-q", count=True, help="Be more quiet.")


@click.command(
    "ablate",
    help=f"""
Run an ablation grid, every cell with several seeds, and summarize the final
k-NN accuracy and collapse statistics.

\b
Suites:
  block_size          N_B in {{K, K/2, K/8, K/32}}
  partition_strategy  constant or random partitions
  ema                 with and without the momentum teacher
  prototypes          K in {{4, 16, 64}}
  batch_size          N in {{32, 64, 128, 256}}

\b
Writes <suite>.csv with columns: {", ".join(CSV_COLUMNS)}
and <suite>.svg. Seeds are base seed, base seed + 1, ...
Exits with 1 if any cell failed; the other cells are still completed.
""",
    epilog=EPILOG,
)
@common_options()
@clickdc.adddc("args", Args)
def cli(args: Args):
    init_logging(args.verbose, args.quiet)
    base = load_config(args.config, args.set)
    cells = SUITES[args.suite](base)
    work = [(cell, base.seed + s) for cell in cells for s in range(args.seeds)]
    log.info(f"Running {len(work)} trainings of suite {args.suite} with {args.jobs} jobs")
    args.out.mkdir(parents=True, exist_ok=True)
    with concurrent.futures.ThreadPoolExecutor(max_workers=args.jobs) as pool:
        results = list(pool.map(lambda w: run_cell(base, w[0], w[1], args.out), work))
    write_csv(args.out / f"{args.suite}.csv", args.suite, results)
    write_svg(args.out / f"{args.suite}.svg", args.suite, results, cells)
    print(
        tabulate.tabulate(
            [(c.param, c.value, acc, frac) for c, acc, frac in _medians(results, cells)],
            headers=["param", "value", "median knn_accuracy", "median max_assignment_fraction"],
        )
    )
    failed = [f"{r.cell.param}={r.cell.value}/seed{r.seed}" for r in results if r.status != "ok"]
    if failed:
        raise click.ClickException(f"{len(failed)} cells failed: {andjoin(failed)}")
