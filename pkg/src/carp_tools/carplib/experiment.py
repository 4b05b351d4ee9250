"""Glue between configuration, training, checkpoints and evaluation."""

import logging
from pathlib import Path
from typing import Dict, Optional, Tuple

from .checkpoint import save_params
from .config import RunConfig, dataset_from_config
from .data import Dataset, split_dataset
from .evaluation import EmbeddingBank, knn_accuracy
from .model import Features, ModelParams, embed
from .numerics import make_rng
from .trainer import Monitor, TrainResult, train

log = logging.getLogger(__name__)

DATA_STREAM = 1
"""Key mixed into the run seed for dataset generation and splitting"""

METRICS_FILE = "metrics.jsonl"
CONFIG_FILE = "resolved-config.txt"


def prepare_data(cfg: RunConfig) -> Tuple[Dataset, Dataset]:
    """(train, holdout) for the configured dataset"""
    rng = make_rng(cfg.seed, DATA_STREAM)
    ds = dataset_from_config(cfg, rng)
    return split_dataset(ds, cfg.holdout_fraction, rng)


def knn_score(
    params: ModelParams,
    train: Dataset,
    holdout: Dataset,
    k: int,
    tau: float,
    features: Features,
    block_size: Optional[int] = None,
) -> float:
    """
    Weighted k-NN accuracy of holdout queries against a bank of train
    embeddings. Without a holdout, the train set is queried against itself.
    block_size only applies to assignment features.
    """
    queries = holdout if len(holdout) else train
    bank = EmbeddingBank.build(
        embed(params, train.samples, features, block_size),
        train.labels,
        max(train.num_classes, queries.num_classes),
    )
    return knn_accuracy(bank, embed(params, queries.samples, features, block_size), queries.labels, min(k, len(bank)), tau)


def knn_monitor(cfg: RunConfig, train: Dataset, holdout: Dataset) -> Monitor:
    def monitor(epoch: int, student: ModelParams, teacher: ModelParams) -> Dict[str, float]:
        def score(params: ModelParams) -> float:
            return knn_score(params, train, holdout, cfg.knn_k, cfg.knn_tau, cfg.eval_features, cfg.assignment_block())

        ret = {"knn_accuracy": score(student)}
        if cfg.use_teacher:
            ret["teacher_knn_accuracy"] = score(teacher)
        log.info(f"epoch {epoch} k-NN accuracy {ret}")
        return ret

    return monitor


def run_training(cfg: RunConfig, out_dir: Optional[Path] = None) -> TrainResult:
    """
    Train with k-NN monitoring. With out_dir, writes the resolved config,
    metrics.jsonl, periodic and final student/teacher checkpoints.
    """
    train_ds, holdout = prepare_data(cfg)
    monitor = knn_monitor(cfg, train_ds, holdout)
    if out_dir is None:
        return train(cfg, train_ds, monitor=monitor)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / CONFIG_FILE).write_text(cfg.to_text())
    dtype = cfg.checkpoint_dtype.value

    def on_checkpoint(epoch: int, student: ModelParams, teacher: ModelParams):
        save_params(student, out_dir / f"student-epoch{epoch:04d}.ckpt", dtype)
        save_params(teacher, out_dir / f"teacher-epoch{epoch:04d}.ckpt", dtype)

    with (out_dir / METRICS_FILE).open("w") as sink:
        result = train(cfg, train_ds, monitor=monitor, sink=sink, on_checkpoint=on_checkpoint)
    save_params(result.student, out_dir / "student.ckpt", dtype)
    save_params(result.teacher, out_dir / "teacher.ckpt", dtype)
    log.info(f"Wrote run outputs to {out_dir}")
    return result
