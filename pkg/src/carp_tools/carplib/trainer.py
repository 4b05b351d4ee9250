"""
Student/teacher training loop.

Every step draws a batch, makes two views of it, embeds both views with the
student and the teacher, builds the prototype partition, evaluates the loss,
backpropagates through the student only, takes an SGD step and moves the
teacher towards the student.

The random streams are spawned from the run seed in a fixed order:
initialization, batch order, views, partitions.
"""

from __future__ import annotations

import concurrent.futures
import dataclasses
import functools
import json
import logging
import math
import operator
from typing import IO, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.stats

from .config import Objective, RunConfig
from .data import Dataset, make_views
from .ema import CosineSchedule, EmaSchedule, ema_update, schedule_value
from .errors import require
from .loss import LossBreakdown, carp_loss, global_loss
from .model import ForwardTrace, Gradients, ModelParams, backward, forward, init
from .numerics import Matrix, make_rng, softmax_rows, spawn
from .optim import SgdMomentum
from .partition import Partition, PartitionSpec, gather_block_logits, make_partition

log = logging.getLogger(__name__)

Monitor = Callable[[int, ModelParams, ModelParams], Dict[str, float]]
"""Called with (epoch, student, teacher) at the evaluation cadence"""
CheckpointHook = Callable[[int, ModelParams, ModelParams], None]


@dataclasses.dataclass
class StepMetrics:
    step: int
    epoch: int
    loss: LossBreakdown
    max_assignment_fraction: float
    prototype_usage_entropy: float
    block_max_fraction: float
    """Mean over blocks of the modal assignment fraction within the block"""
    lr: float
    eta: Optional[float]
    knn_accuracy: Optional[float] = None
    teacher_knn_accuracy: Optional[float] = None

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self))


@dataclasses.dataclass(eq=False)
class TrainingAborted(Exception):
    metrics: StepMetrics

    def __str__(self):
        m = self.metrics
        return (
            f"Non-finite loss at step {m.step} (epoch {m.epoch}): "
            f"consistency={m.loss.consistency} entropy_term={m.loss.entropy_term} "
            f"max_assignment_fraction={m.max_assignment_fraction} lr={m.lr}"
        )


@dataclasses.dataclass
class TrainResult:
    student: ModelParams
    teacher: ModelParams
    metrics: List[StepMetrics]


def collapse_stats(assignments: np.ndarray, k: int) -> Tuple[float, float]:
    """(fraction of the modal index, entropy of the empirical index distribution)"""
    assignments = np.asarray(assignments, dtype=np.int64)
    require(
        len(assignments) > 0 and bool(np.all((assignments >= 0) & (assignments < k))),
        f"assignments must be non-empty and in [0, {k})",
    )
    counts = np.bincount(assignments, minlength=k)
    return float(counts.max() / counts.sum()), float(scipy.stats.entropy(counts))


def block_assignments(probs: Sequence[np.ndarray], partition: Partition) -> np.ndarray:
    """
    Prototype index chosen within every block for every row of every view:
    the argmax over each [N_P, N, N_B] array mapped through partition.blocks,
    flattened to N_P * N * len(probs) indices.
    """
    rows = np.arange(partition.num_blocks)[:, None]
    return np.concatenate([partition.blocks[rows, np.argmax(p, axis=-1)].ravel() for p in probs])


def _block_max_fraction(probs: Sequence[np.ndarray]) -> float:
    """probs: [N_P, N, N_B] arrays of the student views"""
    assign = np.concatenate([np.argmax(p, axis=-1) for p in probs], axis=1)
    fractions = [np.bincount(row).max() / row.size for row in assign]
    return float(np.mean(fractions))


class _Sharded:
    """Runs forward and backward over micro-batches, reducing in shard order"""

    def __init__(self, pool: concurrent.futures.Executor, shards: int):
        self.pool = pool
        self.shards = shards

    def forward(self, params: ModelParams, x: Matrix) -> List[ForwardTrace]:
        return list(self.pool.map(functools.partial(forward, params), np.array_split(x, self.shards)))

    def backward(self, params: ModelParams, traces: List[ForwardTrace], dlogits: Matrix) -> Gradients:
        parts = np.array_split(dlogits, self.shards)
        grads = list(self.pool.map(functools.partial(backward, params), traces, parts))
        return functools.reduce(operator.add, grads)


def _logits(traces: List[ForwardTrace]) -> Matrix:
    return np.concatenate([t.logits for t in traces])


def _evaluate_loss(
    cfg: RunConfig,
    spec: Optional[PartitionSpec],
    partition_rng: np.random.Generator,
    student_logits: Tuple[Matrix, Matrix],
    teacher_logits: Tuple[Matrix, Matrix],
) -> Tuple[LossBreakdown, Tuple[Matrix, Matrix], float, np.ndarray]:
    """
    Loss, student logit gradients, block_max_fraction and the prototype indices
    the collapse statistics count: within-block choices for the partitioned
    objective, the argmax over all K for the global one.
    """
    if cfg.objective == Objective.PARTITIONED:
        assert spec is not None
        partition: Partition = make_partition(spec, partition_rng)
        s1, s2 = (gather_block_logits(x, partition) for x in student_logits)
        t1, t2 = (gather_block_logits(x, partition) for x in teacher_logits)
        breakdown, grads = carp_loss(s1, s2, t1, t2, partition)
        return breakdown, grads, _block_max_fraction([s1, s2]), block_assignments([s1, s2], partition)
    s1, s2 = (softmax_rows(x) for x in student_logits)
    t1, t2 = (softmax_rows(x) for x in teacher_logits)
    breakdown, grads = global_loss(s1, s2, t1, t2, cfg.lambda_e)
    return (
        breakdown,
        grads,
        _block_max_fraction([s1[None], s2[None]]),
        np.argmax(np.concatenate(student_logits), axis=1),
    )


def _finite(breakdown: LossBreakdown, grads: Tuple[Matrix, Matrix]) -> bool:
    return math.isfinite(breakdown.total) and all(bool(np.all(np.isfinite(g))) for g in grads)


def train(
    cfg: RunConfig,
    data: Union[Dataset, Matrix],
    monitor: Optional[Monitor] = None,
    sink: Optional[IO[str]] = None,
    on_checkpoint: Optional[CheckpointHook] = None,
) -> TrainResult:
    """
    Train on the samples of data, labels are never read. Every StepMetrics is
    appended to the result and, when sink is given, written to it as one JSON line.
    """
    samples = np.asarray(data.samples if isinstance(data, Dataset) else data, dtype=np.float64)
    require(samples.ndim == 2 and samples.shape[0] >= 1, "dataset must be a non-empty matrix")
    init_rng, order_rng, view_rng, partition_rng = spawn(make_rng(cfg.seed), 4)
    student = init(init_rng, cfg.model_dims(samples.shape[1]))
    teacher = student.copy()
    steps_per_epoch = math.ceil(samples.shape[0] / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    lr_schedule = CosineSchedule(cfg.lr_start, cfg.lr_end, total_steps)
    eta_schedule = EmaSchedule(cfg.eta_start, cfg.eta_end, total_steps)
    spec = (
        PartitionSpec(cfg.prototypes, cfg.block_size, cfg.partition_strategy)
        if cfg.objective == Objective.PARTITIONED
        else None
    )
    optimizer = SgdMomentum(cfg.momentum, cfg.weight_decay)
    views = cfg.view_config()
    metrics: List[StepMetrics] = []
    log.info(
        f"Training {cfg.objective.value} objective on {samples.shape[0]} samples:"
        f" {cfg.epochs} epochs x {steps_per_epoch} steps, K={cfg.prototypes}"
        + (f" N_B={cfg.block_size}" if spec else f" lambda_e={cfg.lambda_e}")
    )
    step = 0
    with concurrent.futures.ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        sharded = _Sharded(pool, cfg.shards)
        for epoch in range(1, cfg.epochs + 1):
            order = order_rng.permutation(samples.shape[0])
            first = len(metrics)
            for start in range(0, len(order), cfg.batch_size):
                x1, x2 = make_views(view_rng, samples[order[start : start + cfg.batch_size]], views)
                traces = [sharded.forward(student, x) for x in (x1, x2)]
                student_logits = (_logits(traces[0]), _logits(traces[1]))
                if cfg.use_teacher:
                    teacher_logits = tuple(_logits(sharded.forward(teacher, x)) for x in (x1, x2))
                else:
                    # Stop-gradient targets taken from the student itself.
                    teacher_logits = tuple(x.copy() for x in student_logits)
                breakdown, grads, block_max, assignments = _evaluate_loss(
                    cfg, spec, partition_rng, student_logits, teacher_logits  # type: ignore[arg-type]
                )
                lr = schedule_value(lr_schedule, step)
                eta = eta_schedule.value(step) if cfg.use_teacher else None
                max_fraction, usage_entropy = collapse_stats(assignments, cfg.prototypes)
                m = StepMetrics(
                    step=step,
                    epoch=epoch,
                    loss=breakdown,
                    max_assignment_fraction=max_fraction,
                    prototype_usage_entropy=usage_entropy,
                    block_max_fraction=block_max,
                    lr=lr,
                    eta=eta,
                )
                if not _finite(breakdown, grads):
                    if sink:
                        for p in (*metrics[first:], m):
                            print(p.to_json(), file=sink, flush=True)
                    raise TrainingAborted(m)
                gradients = sharded.backward(student, traces[0], grads[0]) + sharded.backward(
                    student, traces[1], grads[1]
                )
                optimizer.step(student.leaves(), gradients.leaves(), lr)
                if eta is not None:
                    ema_update(teacher, student, eta)
                log.debug(f"step {step} loss {breakdown.total:.6f}")
                metrics.append(m)
                step += 1
            last = metrics[-1]
            if monitor and (epoch == cfg.epochs or (cfg.eval_every and epoch % cfg.eval_every == 0)):
                for key, val in monitor(epoch, student, teacher).items():
                    setattr(last, key, val)
            if on_checkpoint and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
                on_checkpoint(epoch, student, teacher)
            if sink:
                for m in metrics[first:]:
                    print(m.to_json(), file=sink, flush=True)
            log.info(
                f"epoch {epoch}/{cfg.epochs} loss={last.loss.total:.4f}"
                f" consistency={last.loss.consistency:.4f} entropy={last.loss.entropy_term:.4f}"
                f" max_fraction={last.max_assignment_fraction:.3f}"
                f" usage_entropy={last.prototype_usage_entropy:.3f} lr={last.lr:.4g}"
                + (f" eta={last.eta:.5f}" if last.eta is not None else "")
                + (f" knn={last.knn_accuracy:.4f}" if last.knn_accuracy is not None else "")
            )
    return TrainResult(student, teacher, metrics)
