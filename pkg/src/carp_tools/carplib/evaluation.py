"""
Frozen-feature evaluation: weighted k-NN classification and spherical
k-means scored with NMI, AMI and ARI.
"""

from __future__ import annotations

import dataclasses
import logging
from typing import List, Optional, Sequence, Tuple

import numpy as np
import sklearn.cluster
import sklearn.metrics

from .errors import require
from .numerics import Matrix, Rng, as_matrix, make_rng, normalize_rows

log = logging.getLogger(__name__)

DEFAULT_TAU = 0.07
DEFAULT_K = 20


@dataclasses.dataclass(frozen=True)
class EmbeddingBank:
    features: Matrix
    labels: np.ndarray
    num_classes: int

    @classmethod
    def build(cls, features: Matrix, labels: Sequence[int], num_classes: Optional[int] = None) -> EmbeddingBank:
        labels = np.asarray(labels, dtype=np.int64)
        features = normalize_rows(features)
        require(features.shape[0] == len(labels), "one label per bank row is required")
        require(len(labels) >= 1, "bank must not be empty")
        zero = int(np.sum(~features.any(axis=1)))
        if zero:
            # A dead-ReLU or collapsed network can emit zero rows; they stay
            # zero and are equally dissimilar to every query.
            log.warning(f"{zero} bank rows have zero norm")
        n = int(labels.max()) + 1 if num_classes is None else num_classes
        return cls(features, labels, n)

    def __len__(self) -> int:
        return self.features.shape[0]


def _knn_scores(bank: EmbeddingBank, queries: Matrix, k: int, tau: float) -> np.ndarray:
    require(1 <= k <= len(bank), f"k={k} must be in [1, {len(bank)}]")
    require(tau > 0, f"tau must be > 0, got {tau}")
    sims = queries @ bank.features.T
    # Stable sort keeps the lower bank index first among equal similarities.
    top = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    topsims = np.take_along_axis(sims, top, axis=1)
    scores = np.zeros((queries.shape[0], bank.num_classes))
    np.add.at(
        scores,
        (np.repeat(np.arange(queries.shape[0]), k), bank.labels[top].ravel()),
        np.exp(topsims / tau).ravel(),
    )
    return scores


def knn_predict(bank: EmbeddingBank, query: np.ndarray, k: int = DEFAULT_K, tau: float = DEFAULT_TAU) -> Tuple[int, np.ndarray]:
    """
    Weighted vote of the k most cosine-similar bank rows, each neighbour adding
    exp(similarity / tau) to its class. Returns (predicted class, class scores);
    ties go to the smallest class index.
    """
    scores = _knn_scores(bank, as_matrix(np.atleast_2d(query)), k, tau)[0]
    return int(np.argmax(scores)), scores


def knn_accuracy(bank: EmbeddingBank, queries: Matrix, labels: Sequence[int], k: int = DEFAULT_K, tau: float = DEFAULT_TAU) -> float:
    labels = np.asarray(labels)
    require(len(labels) == as_matrix(queries).shape[0], "one label per query is required")
    if len(labels) == 0:
        return 0.0
    scores = _knn_scores(bank, normalize_rows(queries), k, tau)
    return float(np.mean(np.argmax(scores, axis=1) == labels))


###############################################################################


@dataclasses.dataclass
class KMeansResult:
    assignments: np.ndarray
    centroids: Matrix
    objective: float
    """Sum of cosine similarities between points and their centroids"""
    history: List[float]
    """Objective after every Lloyd iteration of the selected redo"""


def _lloyd(x: Matrix, centroids: Matrix, iters: int) -> KMeansResult:
    history: List[float] = []
    assign = np.full(x.shape[0], -1)
    for _ in range(iters):
        sims = x @ centroids.T
        new = np.argmax(sims, axis=1)
        history.append(float(sims[np.arange(len(new)), new].sum()))
        if np.array_equal(new, assign):
            break
        assign = new
        best = sims[np.arange(len(assign)), assign]
        counts = np.bincount(assign, minlength=centroids.shape[0])
        sums = np.zeros_like(centroids)
        np.add.at(sums, assign, x)
        for c in np.flatnonzero(counts == 0):
            # Reseed an empty cluster on the point worst served by its centroid.
            far = int(np.argmin(best))
            best[far] = np.inf
            sums[c] = x[far]
        centroids = normalize_rows(sums)
    sims = x @ centroids.T
    assign = np.argmax(sims, axis=1)
    objective = float(sims[np.arange(len(assign)), assign].sum())
    return KMeansResult(assign, centroids, objective, history)


def kmeans(features: Matrix, k: int, iters: int = 100, redos: int = 20, rng: Optional[Rng] = None) -> KMeansResult:
    """
    Spherical k-means: rows and centroids live on the unit sphere and the
    objective is the total cosine similarity. Each redo is seeded with
    k-means++; the redo with the highest objective wins, lowest index on ties.
    """
    x = normalize_rows(features)
    require(1 <= k <= x.shape[0], f"k={k} must be in [1, {x.shape[0]}]")
    require(iters >= 1 and redos >= 1, f"iters and redos must be >= 1, got {iters} {redos}")
    rng = rng if rng is not None else make_rng(0)
    best: Optional[KMeansResult] = None
    for redo in range(redos):
        # On the unit sphere squared euclidean distance is 2 - 2 cos, so the
        # euclidean k-means++ seeding is the spherical one.
        seeds, _ = sklearn.cluster.kmeans_plusplus(x, k, random_state=int(rng.integers(2**31 - 1)))
        res = _lloyd(x, normalize_rows(seeds), iters)
        log.debug(f"kmeans redo {redo}: objective {res.objective}")
        if best is None or res.objective > best.objective:
            best = res
    assert best is not None
    return best


def assign_to_centroids(features: Matrix, centroids: Matrix) -> np.ndarray:
    return np.argmax(normalize_rows(features) @ centroids.T, axis=1)


@dataclasses.dataclass
class ClusterMetrics:
    nmi: float
    ami: float
    ari: float


def cluster_metrics(pred: Sequence[int], truth: Sequence[int]) -> ClusterMetrics:
    """NMI and AMI with arithmetic-mean normalization, pair-counting ARI"""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    require(
        len(pred) == len(truth) and len(pred) >= 1,
        f"label lengths differ or are empty: {len(pred)} vs {len(truth)}",
    )
    return ClusterMetrics(
        nmi=float(sklearn.metrics.normalized_mutual_info_score(truth, pred, average_method="arithmetic")),
        ami=float(sklearn.metrics.adjusted_mutual_info_score(truth, pred, average_method="arithmetic")),
        ari=float(sklearn.metrics.adjusted_rand_score(truth, pred)),
    )
