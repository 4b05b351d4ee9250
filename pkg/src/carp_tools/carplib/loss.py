"""
Consistency-over-partitions objective and its single-block entropy baseline.

Both objectives return the loss breakdown together with the exact gradient
with respect to the student logits of each view. Teacher probabilities are
constants: they enter the gradient only as values.
"""

import dataclasses
import functools
import logging
import operator
from typing import List, Sequence, Tuple

import numpy as np
import scipy.special

from .errors import require
from .numerics import Matrix
from .partition import Partition, scatter_block_grads

log = logging.getLogger(__name__)

EPS = 1e-12
"""Lower clamp of the inner product inside -log<a,b>"""

BlockProbs = np.ndarray
"""Probabilities of shape [N_P, N, N_B], rows sum to one"""


@dataclasses.dataclass
class LossBreakdown:
    consistency: float
    entropy_term: float
    total: float
    per_block_kl: List[float]


def consistency(a: np.ndarray, b: np.ndarray) -> float:
    return float(-np.log(max(float(np.dot(a, b)), EPS)))


def _row_sum(views: Sequence[BlockProbs]) -> np.ndarray:
    return functools.reduce(operator.add, (v.sum(axis=1) for v in views))


def batch_average(s: Sequence[BlockProbs], t: Sequence[BlockProbs]) -> np.ndarray:
    """Mean assignment per block over every student and teacher row -> [N_P, N_B]"""
    require(len(s) >= 1 and len(s) == len(t), "need the same number of student and teacher views")
    shape = s[0].shape
    require(
        all(x.shape == shape and x.ndim == 3 for x in (*s, *t)),
        f"block probability shapes differ: {[x.shape for x in (*s, *t)]}",
    )
    rows = (len(s) + len(t)) * shape[1]
    return (_row_sum(s) + _row_sum(t)) / rows


def kl_to_uniform(p: np.ndarray) -> float:
    """KL(p || uniform) = log(N_B) - H(p), with 0 log 0 = 0"""
    p = np.asarray(p, dtype=np.float64)
    return float(np.log(p.shape[-1]) + scipy.special.xlogy(p, p).sum())


def _softmax_backward(probs: np.ndarray, dprobs: np.ndarray) -> np.ndarray:
    return probs * (dprobs - (probs * dprobs).sum(axis=-1, keepdims=True))


@dataclasses.dataclass
class _Objective:
    consistency: float
    pbar: np.ndarray
    per_block_kl: np.ndarray
    ds1: np.ndarray
    ds2: np.ndarray


def _objective(
    s1: BlockProbs, s2: BlockProbs, t1: BlockProbs, t2: BlockProbs, entropy_weight: float
) -> _Objective:
    pbar = batch_average([s1, s2], [t1, t2])
    nblocks, n, nb = s1.shape
    grads = []
    cons = 0.0
    for s, t in ((s1, t2), (s2, t1)):
        inner = np.einsum("knc,knc->kn", s, t)
        clamped = np.maximum(inner, EPS)
        cons += float(-np.log(clamped).mean())
        # The clamp is flat below EPS, so it carries no gradient there.
        scale = np.where(inner > EPS, -1.0 / clamped, 0.0) / (nblocks * n)
        grads.append(scale[..., None] * t)
    per_block_kl = np.log(nb) + scipy.special.xlogy(pbar, pbar).sum(axis=-1)
    rows = 4 * n
    dpbar = entropy_weight / nblocks * (np.log(np.maximum(pbar, np.finfo(float).tiny)) + 1.0)
    for g in grads:
        g += dpbar[:, None, :] / rows
    return _Objective(cons, pbar, per_block_kl, grads[0], grads[1])


def carp_loss(
    s1: BlockProbs,
    s2: BlockProbs,
    t1: BlockProbs,
    t2: BlockProbs,
    partition: Partition,
    entropy_weight: float = 1.0,
) -> Tuple[LossBreakdown, Tuple[Matrix, Matrix]]:
    """
    Symmetric cross-view consistency averaged over blocks and samples, plus
    the mean over blocks of KL(p̄_j || uniform).
    Returns the breakdown and the gradients w.r.t. the student logits of
    view 1 and view 2, laid out [N, K].
    """
    require(
        s1.shape == s2.shape == t1.shape == t2.shape,
        f"shape mismatch: {s1.shape} {s2.shape} {t1.shape} {t2.shape}",
    )
    require(
        s1.shape[0] == partition.num_blocks and s1.shape[2] == partition.block_size,
        f"block probabilities {s1.shape} do not match partition {partition.blocks.shape}",
    )
    obj = _objective(s1, s2, t1, t2, entropy_weight)
    entropy_term = entropy_weight * float(obj.per_block_kl.mean())
    breakdown = LossBreakdown(
        consistency=obj.consistency,
        entropy_term=entropy_term,
        total=obj.consistency + entropy_term,
        per_block_kl=[float(x) for x in obj.per_block_kl],
    )
    g1 = scatter_block_grads(_softmax_backward(s1, obj.ds1), partition)
    g2 = scatter_block_grads(_softmax_backward(s2, obj.ds2), partition)
    return breakdown, (g1, g2)


def global_loss(
    s1: Matrix, s2: Matrix, t1: Matrix, t2: Matrix, lambda_e: float
) -> Tuple[LossBreakdown, Tuple[Matrix, Matrix]]:
    """
    Single-block objective: symmetric consistency minus lambda_e * H(p̄) over
    all K prototypes. Its gradient equals the one of carp_loss on a single
    block with entropy_weight=lambda_e; the totals differ by lambda_e*log(K).
    """
    require(lambda_e >= 0, f"lambda_e must be >= 0, got {lambda_e}")
    require(
        s1.shape == s2.shape == t1.shape == t2.shape and s1.ndim == 2,
        f"shape mismatch: {s1.shape} {s2.shape} {t1.shape} {t2.shape}",
    )
    blocks = [np.asarray(x, dtype=np.float64)[None] for x in (s1, s2, t1, t2)]
    obj = _objective(*blocks, entropy_weight=lambda_e)
    entropy_term = lambda_e * float(scipy.special.xlogy(obj.pbar, obj.pbar).sum())
    breakdown = LossBreakdown(
        consistency=obj.consistency,
        entropy_term=entropy_term,
        total=obj.consistency + entropy_term,
        per_block_kl=[float(x) for x in obj.per_block_kl],
    )
    g1 = _softmax_backward(blocks[0], obj.ds1)[0]
    g2 = _softmax_backward(blocks[1], obj.ds2)[0]
    return breakdown, (g1, g2)
