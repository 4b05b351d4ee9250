import math
from collections import Counter

import numpy as np
import pytest

from carp_tools.carplib.data import make_blobs
from carp_tools.carplib.errors import ContractError
from carp_tools.carplib.evaluation import (
    EmbeddingBank,
    assign_to_centroids,
    cluster_metrics,
    kmeans,
    knn_accuracy,
    knn_predict,
)
from carp_tools.carplib.numerics import make_rng


def brute_force_knn(features, labels, query, k, tau, num_classes):
    def unit(v):
        return v / np.linalg.norm(v)

    sims = [(float(unit(f) @ unit(query)), i) for i, f in enumerate(features)]
    sims.sort(key=lambda x: (-x[0], x[1]))
    scores = [0.0] * num_classes
    for sim, i in sims[:k]:
        scores[labels[i]] += math.exp(sim / tau)
    return max(range(num_classes), key=lambda c: (scores[c], -c)), scores


@pytest.mark.parametrize("k,tau", [(1, 0.07), (5, 0.07), (7, 0.5), (30, 1.0), (9, 1e6)])
def test_knn_matches_brute_force(rng, k, tau):
    features = rng.standard_normal((30, 4))
    labels = rng.integers(0, 3, size=30)
    bank = EmbeddingBank.build(features, labels)
    for _ in range(10):
        q = rng.standard_normal(4)
        pred, scores = knn_predict(bank, q, k, tau)
        want, want_scores = brute_force_knn(features, labels, q, k, tau, bank.num_classes)
        assert pred == want
        assert scores == pytest.approx(want_scores, rel=1e-12)


def test_knn_temperature():
    bank = EmbeddingBank.build(
        np.array([[1.0, 0.0], [0.8, 0.6], [0.6, 0.8], [-1.0, 0.0]]),
        [0, 1, 1, 0],
    )
    q = np.array([1.0, 0.0])
    # Large tau is a plain majority vote, small tau trusts the nearest row.
    assert knn_predict(bank, q, k=3, tau=1e6)[0] == 1
    assert knn_predict(bank, q, k=3, tau=0.01)[0] == 0


def test_knn_tie_goes_to_smallest_class():
    bank = EmbeddingBank.build(np.array([[1.0, 0.0], [1.0, 0.0]]), [1, 0])
    pred, scores = knn_predict(bank, np.array([1.0, 0.0]), k=2, tau=0.1)
    assert scores[0] == scores[1]
    assert pred == 0


def test_knn_contract(rng):
    bank = EmbeddingBank.build(rng.standard_normal((3, 2)), [0, 1, 0])
    with pytest.raises(ContractError):
        knn_predict(bank, np.ones(2), k=4)
    with pytest.raises(ContractError):
        knn_predict(bank, np.ones(2), k=1, tau=0.0)
    with pytest.raises(ContractError):
        EmbeddingBank.build(np.ones((2, 2)), [0])


def test_knn_accuracy_separable(rng):
    ds = make_blobs(rng, 4, 20, 8, 0.1)
    bank = EmbeddingBank.build(ds.samples, ds.labels)
    assert len(bank) == 80
    assert knn_accuracy(bank, ds.samples, ds.labels, k=5) == 1.0
    assert knn_accuracy(bank, np.zeros((0, 8)), [], k=5) == 0.0


def _unit_directions(m: int) -> np.ndarray:
    angles = 2 * np.pi * np.arange(m) / m
    return np.stack([np.cos(angles), np.sin(angles)], axis=1)


def test_kmeans_separable():
    x = np.concatenate([np.tile([[1.0, 0.0]], (5, 1)), np.tile([[0.0, 1.0]], (5, 1))])
    x = x + 0.01 * make_rng(1).standard_normal(x.shape)
    res = kmeans(x, 2, rng=make_rng(2))
    assert len(set(res.assignments[:5].tolist())) == 1
    assert len(set(res.assignments[5:].tolist())) == 1
    assert res.assignments[0] != res.assignments[5]
    assert np.allclose(np.linalg.norm(res.centroids, axis=1), 1.0)


def test_kmeans_one_cluster_per_point():
    x = _unit_directions(6)
    res = kmeans(x, 6, redos=3, rng=make_rng(0))
    assert sorted(res.assignments.tolist()) == list(range(6))
    assert res.objective == pytest.approx(6.0)


def test_kmeans_recovers_blobs():
    ds = make_blobs(make_rng(5), 4, 30, 8, 0.2)
    res = kmeans(ds.samples, 4, rng=make_rng(6))
    assert cluster_metrics(res.assignments, ds.labels).ari >= 0.9
    assert np.array_equal(assign_to_centroids(ds.samples, res.centroids), res.assignments)


def test_kmeans_history_monotone():
    x = make_rng(3).standard_normal((60, 5))
    res = kmeans(x, 5, iters=50, redos=4, rng=make_rng(4))
    assert res.history
    assert all(b >= a - 1e-9 for a, b in zip(res.history, res.history[1:]))
    assert res.objective >= res.history[-1] - 1e-9


def test_kmeans_deterministic():
    x = make_rng(3).standard_normal((40, 3))
    a = kmeans(x, 3, redos=2, rng=make_rng(9))
    b = kmeans(x, 3, redos=2, rng=make_rng(9))
    assert np.array_equal(a.assignments, b.assignments)


def test_kmeans_contract():
    with pytest.raises(ContractError):
        kmeans(np.ones((2, 2)), 3)
    with pytest.raises(ContractError):
        kmeans(np.ones((2, 2)), 1, iters=0)


def _entropy(counts) -> float:
    total = sum(counts)
    return -sum(c / total * math.log(c / total) for c in counts if c)


def oracle_metrics(pred, truth):
    """NMI and AMI (arithmetic normalization) and ARI straight from the contingency table"""
    n = len(pred)
    table = Counter(zip(truth, pred))
    rows = Counter(truth)
    cols = Counter(pred)
    mi = sum(c / n * math.log(n * c / (rows[t] * cols[p])) for (t, p), c in table.items())
    hu, hv = _entropy(rows.values()), _entropy(cols.values())
    nmi = 1.0 if hu == hv == 0 else mi / ((hu + hv) / 2)

    def pairs(x):
        return x * (x - 1) / 2

    index = sum(pairs(c) for c in table.values())
    a = sum(pairs(c) for c in rows.values())
    b = sum(pairs(c) for c in cols.values())
    expected = a * b / pairs(n)
    ari = (index - expected) / ((a + b) / 2 - expected)
    emi = expected_mutual_info(list(rows.values()), list(cols.values()), n)
    ami = (mi - emi) / ((hu + hv) / 2 - emi)
    return nmi, ami, ari


def expected_mutual_info(rows, cols, n) -> float:
    """Mutual information expected under the hypergeometric model of random labelings"""
    lf = math.lgamma
    ret = 0.0
    for a in rows:
        for b in cols:
            for nij in range(max(1, a + b - n), min(a, b) + 1):
                logp = (
                    lf(a + 1) + lf(b + 1) + lf(n - a + 1) + lf(n - b + 1)
                    - lf(n + 1) - lf(nij + 1) - lf(a - nij + 1) - lf(b - nij + 1) - lf(n - a - b + nij + 1)
                )
                ret += nij / n * math.log(n * nij / (a * b)) * math.exp(logp)
    return ret


@pytest.mark.parametrize(
    "pred,truth",
    [
        ([0, 0, 1, 1, 2, 2], [0, 0, 1, 1, 1, 2]),
        ([1, 0, 1, 0, 2, 2, 2], [0, 0, 0, 1, 1, 2, 2]),
        ([0, 1, 2, 0, 1, 2, 0, 1], [0, 0, 0, 1, 1, 1, 2, 2]),
    ],
)
def test_cluster_metrics_oracle(pred, truth):
    m = cluster_metrics(pred, truth)
    nmi, ami, ari = oracle_metrics(pred, truth)
    assert m.nmi == pytest.approx(nmi, abs=1e-9)
    assert m.ami == pytest.approx(ami, abs=1e-9)
    assert m.ari == pytest.approx(ari, abs=1e-9)
    assert m.ami <= m.nmi + 1e-12


def test_cluster_metrics_known_values():
    m = cluster_metrics([0, 0, 1, 1], [0, 1, 0, 1])
    assert m.ari == pytest.approx(-0.5)
    assert m.nmi == pytest.approx(0.0, abs=1e-12)
    perfect = cluster_metrics([3, 3, 5, 5], [0, 0, 1, 1])
    assert perfect.nmi == pytest.approx(1.0)
    assert perfect.ami == pytest.approx(1.0)
    assert perfect.ari == pytest.approx(1.0)


def test_cluster_metrics_relabel_invariant(rng):
    truth = rng.integers(0, 4, size=50)
    pred = rng.integers(0, 5, size=50)
    relabel = np.array([4, 2, 0, 3, 1])[pred]
    a, b = cluster_metrics(pred, truth), cluster_metrics(relabel, truth)
    assert a.nmi == pytest.approx(b.nmi)
    assert a.ami == pytest.approx(b.ami)
    assert a.ari == pytest.approx(b.ari)


def test_cluster_metrics_contract():
    with pytest.raises(ContractError):
        cluster_metrics([0, 1], [0])
    with pytest.raises(ContractError):
        cluster_metrics([], [])


@pytest.mark.parametrize("seed", range(20))
def test_cluster_metrics_random_labelings(seed):
    rng = make_rng(seed)
    n = int(rng.integers(6, 31))
    truth = rng.integers(0, int(rng.integers(2, 6)), size=n)
    pred = rng.integers(0, int(rng.integers(2, 6)), size=n)
    # Single-cluster labelings are special-cased by the metric definitions.
    truth[:2] = [0, 1]
    pred[:2] = [1, 0]
    m = cluster_metrics(pred.tolist(), truth.tolist())
    nmi, ami, ari = oracle_metrics(pred.tolist(), truth.tolist())
    assert m.nmi == pytest.approx(nmi, abs=1e-9)
    assert m.ami == pytest.approx(ami, abs=1e-9)
    assert m.ari == pytest.approx(ari, abs=1e-9)
