"""
Dense numerics shared by every other module.

Matrices are plain float64 numpy arrays. Randomness always flows through a
numpy Generator built on the SFC64 bit generator, never the numpy default,
so that partition draws and initializations reproduce across platforms.
"""

from typing import List

import numpy as np
import scipy.special

from .errors import require

Matrix = np.ndarray
Rng = np.random.Generator


def make_rng(seed: int, *key: int) -> Rng:
    """
    Return a Generator on the SFC64 bit generator. Extra key integers select
    an independent stream for the same seed.
    """
    entropy = [seed, *key] if key else seed
    return np.random.Generator(np.random.SFC64(np.random.SeedSequence(entropy)))


def spawn(rng: Rng, n: int) -> List[Rng]:
    """Derive n independent child streams, one per worker"""
    return rng.spawn(n)


def as_matrix(m) -> Matrix:
    ret = np.asarray(m, dtype=np.float64)
    require(ret.ndim == 2, f"expected a 2-D matrix, got shape {ret.shape}")
    return ret


def matmul(a: Matrix, b: Matrix) -> Matrix:
    a = as_matrix(a)
    b = as_matrix(b)
    require(
        a.shape[1] == b.shape[0],
        f"matmul dimension mismatch: {a.shape} x {b.shape}",
    )
    return a @ b


def softmax_rows(m: Matrix) -> Matrix:
    # scipy subtracts the row maximum before exponentiating.
    return scipy.special.softmax(np.asarray(m, dtype=np.float64), axis=-1)


def normalize_rows(m: Matrix) -> Matrix:
    """Scale rows to unit l2 norm. All-zero rows are returned unchanged."""
    m = as_matrix(m)
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    return m / np.where(norms > 0, norms, 1.0)


def sample_without_replacement(rng: Rng, n: int, k: int) -> np.ndarray:
    """k distinct indices from range(n), the prefix of a Fisher-Yates shuffle"""
    require(0 <= k <= n, f"cannot sample {k} distinct indices out of {n}")
    return rng.permutation(n)[:k]
