import io
import json
import math

import numpy as np
import pytest

from carp_tools.carplib.data import make_views
from carp_tools.carplib.ema import EmaSchedule
from carp_tools.carplib.errors import ContractError
from carp_tools.carplib.experiment import prepare_data
from carp_tools.carplib.loss import carp_loss
from carp_tools.carplib.model import backward, forward, init
from carp_tools.carplib.numerics import make_rng, spawn
from carp_tools.carplib.partition import Partition, PartitionSpec, gather_block_logits, make_partition
from carp_tools.carplib.trainer import TrainingAborted, block_assignments, collapse_stats, train
from tests.testlib import tiny_config


def _samples(cfg):
    return prepare_data(cfg)[0].samples


def _same(a, b) -> bool:
    x, y = a.leaves(), b.leaves()
    return x.keys() == y.keys() and all(np.array_equal(x[k], y[k]) for k in x)


def test_collapse_stats():
    frac, ent = collapse_stats(np.array([0, 0, 1, 2]), 4)
    assert frac == 0.5
    assert ent == pytest.approx(1.0397, abs=1e-4)
    frac, ent = collapse_stats(np.array([3, 3, 3]), 4)
    assert frac == 1.0
    assert ent == 0.0
    frac, ent = collapse_stats(np.array([0, 1, 2, 3, 3, 2, 1, 0]), 4)
    assert frac == 0.25
    assert ent == pytest.approx(math.log(4))
    frac, ent = collapse_stats(np.arange(8), 8)
    assert frac == 1 / 8
    assert ent == pytest.approx(math.log(8))
    with pytest.raises(ContractError):
        collapse_stats(np.array([4]), 4)
    with pytest.raises(ContractError):
        collapse_stats(np.array([], dtype=int), 4)


def test_block_assignments():
    partition = Partition(np.array([[2, 0], [3, 1]]))
    view1 = np.array([[[0.9, 0.1], [0.2, 0.8]], [[0.4, 0.6], [0.7, 0.3]]])
    view2 = np.array([[[0.5, 0.5], [0.0, 1.0]], [[1.0, 0.0], [0.1, 0.9]]])
    # One view after the other, each block-major.
    assert block_assignments([view1, view2], partition).tolist() == [2, 0, 1, 3, 2, 0, 3, 1]
    assert block_assignments([view1], partition).tolist() == [2, 0, 1, 3]


def test_train_metrics():
    cfg = tiny_config()
    samples = _samples(cfg)
    sink = io.StringIO()
    res = train(cfg, samples, sink=sink)
    steps_per_epoch = math.ceil(len(samples) / cfg.batch_size)
    assert len(res.metrics) == cfg.epochs * steps_per_epoch
    assert [m.step for m in res.metrics] == list(range(len(res.metrics)))
    assert res.metrics[0].lr == cfg.lr_start
    assert res.metrics[0].eta == cfg.eta_start
    lines = sink.getvalue().splitlines()
    assert len(lines) == len(res.metrics)
    first = json.loads(lines[0])
    assert first["step"] == 0
    assert set(first["loss"]) == {"consistency", "entropy_term", "total", "per_block_kl"}
    for m in res.metrics:
        assert 0 < m.max_assignment_fraction <= 1
        assert 0 <= m.prototype_usage_entropy <= math.log(cfg.prototypes) + 1e-12
        assert m.loss.total == pytest.approx(m.loss.consistency + m.loss.entropy_term, abs=1e-12)


def test_train_deterministic():
    cfg = tiny_config()
    samples = _samples(cfg)
    a, b = train(cfg, samples), train(cfg, samples)
    assert _same(a.student, b.student)
    assert _same(a.teacher, b.teacher)
    assert [m.loss.total for m in a.metrics] == [m.loss.total for m in b.metrics]


def test_train_workers_do_not_change_results():
    cfg = tiny_config(shards=3)
    samples = _samples(cfg)
    a = train(cfg, samples)
    b = train(cfg.replace(workers=3), samples)
    assert _same(a.student, b.student)
    assert [m.loss.total for m in a.metrics] == [m.loss.total for m in b.metrics]


def test_train_shards_match_full_batch():
    cfg = tiny_config()
    samples = _samples(cfg)
    a = train(cfg, samples)
    b = train(cfg.replace(shards=2, workers=2), samples)
    x, y = a.student.leaves(), b.student.leaves()
    assert all(np.allclose(x[k], y[k], rtol=1e-9, atol=1e-12) for k in x)


def test_zero_lr_keeps_student():
    cfg = tiny_config(lr_start=0.0, lr_end=0.0)
    samples = _samples(cfg)
    res = train(cfg, samples)
    init_rng = spawn(make_rng(cfg.seed), 4)[0]
    start = init(init_rng, cfg.model_dims(samples.shape[1]))
    assert _same(res.student, start)
    # eta * p + (1 - eta) * p is p up to rounding.
    t, s = res.teacher.leaves(), start.leaves()
    assert all(np.allclose(t[k], s[k], rtol=1e-14, atol=0) for k in s)


def test_eta_one_keeps_teacher():
    cfg = tiny_config(eta_start=1.0, eta_end=1.0)
    samples = _samples(cfg)
    res = train(cfg, samples)
    init_rng = spawn(make_rng(cfg.seed), 4)[0]
    start = init(init_rng, cfg.model_dims(samples.shape[1]))
    assert _same(res.teacher, start)
    assert not _same(res.student, start)


HAND_BUILT = np.array([[1.0, 0.5, -0.5, 2.0, 0.0, 1.0], [-1.0, 0.25, 0.75, -2.0, 1.0, 0.5]])


@pytest.mark.parametrize(
    "overrides,hand_built",
    [
        (dict(), False),
        (dict(prototypes=4, block_size=2), True),
    ],
)
def test_single_step_replay(overrides, hand_built):
    """One optimizer step of train() reproduced by hand from the same streams"""
    cfg = tiny_config(epochs=1, batch_size=1000, momentum=0.0, weight_decay=0.0, **overrides)
    samples = HAND_BUILT if hand_built else _samples(cfg)
    res = train(cfg, samples)
    assert len(res.metrics) == 1

    init_rng, order_rng, view_rng, partition_rng = spawn(make_rng(cfg.seed), 4)
    student = init(init_rng, cfg.model_dims(samples.shape[1]))
    teacher = student.copy()
    order = order_rng.permutation(len(samples))
    x1, x2 = make_views(view_rng, samples[order], cfg.view_config())
    partition = make_partition(PartitionSpec(cfg.prototypes, cfg.block_size), partition_rng)
    tr1, tr2 = forward(student, x1), forward(student, x2)
    views = [gather_block_logits(t.logits, partition) for t in (tr1, tr2, forward(teacher, x1), forward(teacher, x2))]
    breakdown, (g1, g2) = carp_loss(*views, partition)
    assert res.metrics[0].loss.total == pytest.approx(breakdown.total, abs=1e-12)
    frac, ent = collapse_stats(block_assignments(views[:2], partition), cfg.prototypes)
    assert res.metrics[0].max_assignment_fraction == frac
    assert res.metrics[0].prototype_usage_entropy == pytest.approx(ent, abs=1e-12)
    grads = (backward(student, tr1, g1) + backward(student, tr2, g2)).leaves()
    eta = EmaSchedule(cfg.eta_start, cfg.eta_end, 1).value(0)
    got_student, got_teacher = res.student.leaves(), res.teacher.leaves()
    for name, p in student.leaves().items():
        stepped = p - cfg.lr_start * grads[name]
        assert np.allclose(got_student[name], stepped, rtol=1e-10, atol=1e-12), name
        assert np.allclose(got_teacher[name], eta * p + (1 - eta) * stepped, rtol=1e-10, atol=1e-12), name


def test_train_without_teacher():
    cfg = tiny_config(use_teacher=False, epochs=3)
    res = train(cfg, _samples(cfg))
    assert all(math.isfinite(m.loss.total) for m in res.metrics)
    assert all(m.eta is None for m in res.metrics)
    assert _same(res.teacher, train(cfg.replace(lr_start=0.0, lr_end=0.0), _samples(cfg)).student)


def test_train_global_objective():
    cfg = tiny_config(objective="global", lambda_e=0.5, block_size=3)
    res = train(cfg, _samples(cfg))
    for m in res.metrics:
        assert m.loss.entropy_term <= 0
        assert len(m.loss.per_block_kl) == 1


def test_monitor_and_checkpoints():
    cfg = tiny_config(epochs=4, eval_every=2, checkpoint_every=3)
    calls = []
    saved = []

    def monitor(epoch, student, teacher):
        calls.append(epoch)
        return {"knn_accuracy": 0.5}

    res = train(cfg, _samples(cfg), monitor=monitor, on_checkpoint=lambda e, s, t: saved.append(e))
    assert calls == [2, 4]
    assert saved == [3]
    per_epoch = {}
    for m in res.metrics:
        per_epoch.setdefault(m.epoch, []).append(m)
    assert per_epoch[2][-1].knn_accuracy == 0.5
    assert per_epoch[4][-1].knn_accuracy == 0.5
    assert per_epoch[1][-1].knn_accuracy is None


def test_training_aborts_on_nonfinite_loss():
    cfg = tiny_config(lr_start=float("inf"), lr_end=float("inf"))
    sink = io.StringIO()
    with pytest.raises(TrainingAborted) as e:
        train(cfg, _samples(cfg), sink=sink)
    assert "Non-finite loss" in str(e.value)
    last = json.loads(sink.getvalue().splitlines()[-1])
    assert last["step"] == e.value.metrics.step


def test_train_rejects_empty():
    with pytest.raises(ContractError):
        train(tiny_config(), np.zeros((0, 6)))


def test_train_accepts_dataset():
    cfg = tiny_config(epochs=1)
    train_ds, _ = prepare_data(cfg)
    a, b = train(cfg, train_ds), train(cfg, train_ds.samples)
    assert _same(a.student, b.student)


def test_global_objective_counts_argmax_over_all_prototypes():
    cfg = tiny_config(epochs=1, batch_size=1000, objective="global", block_size=3)
    samples = _samples(cfg)
    res = train(cfg, samples)
    init_rng, order_rng, view_rng, _ = spawn(make_rng(cfg.seed), 4)
    student = init(init_rng, cfg.model_dims(samples.shape[1]))
    x1, x2 = make_views(view_rng, samples[order_rng.permutation(len(samples))], cfg.view_config())
    logits = np.concatenate([forward(student, x1).logits, forward(student, x2).logits])
    frac, ent = collapse_stats(np.argmax(logits, axis=1), cfg.prototypes)
    assert res.metrics[0].max_assignment_fraction == frac
    assert res.metrics[0].prototype_usage_entropy == pytest.approx(ent, abs=1e-12)
