import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import click
import clickdc

from .carplib.checkpoint import CheckpointError, load_params
from .carplib.evaluation import DEFAULT_K, DEFAULT_TAU, assign_to_centroids, cluster_metrics, kmeans
from .carplib.experiment import CONFIG_FILE, knn_score, prepare_data
from .carplib.model import Features, ModelParams, embed
from .carplib.numerics import make_rng
from .common_click import EPILOG, common_options, init_logging, load_config

log = logging.getLogger(__name__)

KMEANS_STREAM = 2


@dataclass
class Args:
    ckpt: Path = clickdc.option(
        required=True,
        type=click.Path(exists=True, path_type=Path),
        help="Checkpoint file, or a run directory in which --branch picks the checkpoint.",
    )
    mode: str = clickdc.option(
        required=True,
        type=click.Choice(["knn", "cluster"]),
        help="Weighted k-NN classification or k-means clustering.",
    )
    branch: str = clickdc.option(
        default="student",
        show_default=True,
        type=click.Choice(["student", "teacher"]),
        help="Network to embed with when --ckpt is a run directory.",
    )
    k: Tuple[int, ...] = clickdc.option(
        multiple=True,
        type=click.IntRange(min=1),
        help=f"Neighbours for knn mode, can be repeated [default: {DEFAULT_K}]."
        " Number of clusters for cluster mode [default: number of classes].",
    )
    tau: float = clickdc.option(
        default=DEFAULT_TAU,
        show_default=True,
        type=click.FloatRange(min=0, min_open=True),
        help="Temperature of the k-NN vote weights.",
    )
    features: Optional[str] = clickdc.option(
        type=click.Choice([x.value for x in Features]),
        help="Encoder output, projected embedding or one-hot prototype assignments"
        " per block [default: eval_features of the config].",
    )
    iters: int = clickdc.option(default=100, show_default=True, help="Lloyd iterations per k-means redo.")
    redos: int = clickdc.option(default=20, show_default=True, help="k-means restarts.")
    config: Optional[Path] = clickdc.option(
        "-c",
        type=click.Path(exists=True, dir_okay=False, path_type=Path),
        help=f"Configuration describing the dataset [default: {CONFIG_FILE} next to the checkpoint].",
    )
    set: Tuple[str, ...] = clickdc.option("-s", multiple=True, help="Override one configuration key, key=value.")
    verbose: int = clickdc.option("-v", count=True, help="Be more verbose.")
    quiet: int = clickdc.option("-q", count=True, help="Be more quiet.")


def resolve_paths(args: Args) -> Tuple[Path, Optional[Path]]:
    rundir = args.ckpt if args.ckpt.is_dir() else args.ckpt.parent
    ckpt = args.ckpt / f"{args.branch}.ckpt" if args.ckpt.is_dir() else args.ckpt
    config = args.config
    if config is None and (rundir / CONFIG_FILE).exists():
        config = rundir / CONFIG_FILE
    return ckpt, config


def knn_report(args: Args, params: ModelParams, cfg, features: Features) -> Dict[str, Any]:
    train, holdout = prepare_data(cfg)
    ks = args.k or (DEFAULT_K,)
    scores = {str(k): knn_score(params, train, holdout, k, args.tau, features, cfg.assignment_block()) for k in ks}
    return dict(accuracy=scores[str(ks[0])], knn=scores, tau=args.tau)


def cluster_report(args: Args, params: ModelParams, cfg, features: Features) -> Dict[str, Any]:
    train, holdout = prepare_data(cfg)
    nclusters = args.k[0] if args.k else train.num_classes
    res = kmeans(
        embed(params, train.samples, features, cfg.assignment_block()),
        nclusters,
        args.iters,
        args.redos,
        make_rng(cfg.seed, KMEANS_STREAM),
    )
    scored = holdout if len(holdout) else train
    pred = assign_to_centroids(embed(params, scored.samples, features, cfg.assignment_block()), res.centroids)
    metrics = cluster_metrics(pred, scored.labels)
    return dict(k=nclusters, nmi=metrics.nmi, ami=metrics.ami, ari=metrics.ari, objective=res.objective)


@click.command(
    "eval",
    help="""
Evaluate frozen features of a checkpoint and print a JSON report.

\b
knn      weighted k-NN vote of holdout samples against a bank of train samples
cluster  spherical k-means fitted on train samples, NMI/AMI/ARI on holdout samples
""",
    epilog=EPILOG,
)
@common_options()
@clickdc.adddc("args", Args)
def cli(args: Args):
    init_logging(args.verbose, args.quiet)
    ckpt, config = resolve_paths(args)
    cfg = load_config(config, args.set)
    try:
        params = load_params(ckpt)
    except (CheckpointError, OSError) as e:
        raise click.ClickException(f"{ckpt}: {e}") from e
    features = Features(args.features) if args.features else cfg.eval_features
    log.info(f"Evaluating {ckpt} in {args.mode} mode on {features.value} features")
    report: Dict[str, Any] = dict(mode=args.mode, checkpoint=str(ckpt), branch=args.branch, features=features.value)
    if args.mode == "knn":
        report.update(knn_report(args, params, cfg, features))
    else:
        report.update(cluster_report(args, params, cfg, features))
    print(json.dumps(report))
