"""Partitions of the prototype set into disjoint equal-size blocks."""

import dataclasses
import enum
import logging

import numpy as np

from .errors import require
from .numerics import Matrix, Rng, as_matrix, sample_without_replacement, softmax_rows

log = logging.getLogger(__name__)


class PartitionStrategy(str, enum.Enum):
    RANDOM = "random"
    CONSTANT = "constant"


@dataclasses.dataclass(frozen=True)
class PartitionSpec:
    k: int
    block_size: int
    strategy: PartitionStrategy = PartitionStrategy.RANDOM

    def __post_init__(self):
        require(self.block_size >= 1, f"block_size must be >= 1, got {self.block_size}")
        require(
            self.k % self.block_size == 0,
            f"block_size={self.block_size} does not divide k={self.k}",
        )

    @property
    def num_blocks(self) -> int:
        return self.k // self.block_size


@dataclasses.dataclass(frozen=True)
class Partition:
    blocks: np.ndarray
    """Integer array [num_blocks, block_size] of prototype indices"""

    @property
    def num_blocks(self) -> int:
        return self.blocks.shape[0]

    @property
    def block_size(self) -> int:
        return self.blocks.shape[1]

    @property
    def k(self) -> int:
        return self.blocks.size


def _frozen(blocks: np.ndarray) -> Partition:
    blocks = np.array(blocks, dtype=np.int64)
    blocks.setflags(write=False)
    return Partition(blocks)


def make_partition(spec: PartitionSpec, rng: Rng) -> Partition:
    """
    Random strategy draws a fresh permutation of the prototypes and cuts it
    into consecutive chunks. Constant strategy always returns the sequential
    chunks and does not touch rng.
    """
    if spec.strategy == PartitionStrategy.CONSTANT:
        ids = np.arange(spec.k)
    else:
        ids = sample_without_replacement(rng, spec.k, spec.k)
    return _frozen(ids.reshape(spec.num_blocks, spec.block_size))


def gather_block_logits(logits: Matrix, p: Partition) -> np.ndarray:
    """Gather logits per block and softmax within each block -> [N_P, N, N_B]"""
    logits = as_matrix(logits)
    require(
        logits.shape[1] == p.k,
        f"partition covers {p.k} prototypes but logits have {logits.shape[1]} columns",
    )
    # [N, N_P, N_B] -> [N_P, N, N_B]
    gathered = logits[:, p.blocks].transpose(1, 0, 2)
    return softmax_rows(gathered)


def scatter_block_grads(grad: np.ndarray, p: Partition) -> Matrix:
    """Route a [N_P, N, N_B] gradient back to the [N, K] logit layout"""
    require(
        grad.shape[0] == p.num_blocks and grad.shape[2] == p.block_size,
        f"block gradient shape {grad.shape} does not match partition {p.blocks.shape}",
    )
    out = np.zeros((grad.shape[1], p.k))
    out[:, p.blocks] = grad.transpose(1, 0, 2)
    return out
