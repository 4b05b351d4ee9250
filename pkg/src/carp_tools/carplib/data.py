"""Toy datasets, the stochastic view function and the IDX reader."""

import dataclasses
import logging
from pathlib import Path
from typing import Tuple, Union

import numpy as np

from .errors import require
from .numerics import Matrix, Rng, as_matrix, normalize_rows

log = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclasses.dataclass(frozen=True)
class Dataset:
    samples: Matrix
    labels: np.ndarray
    """Integer class of each sample. Used by evaluation only."""

    def __post_init__(self):
        require(
            self.samples.ndim == 2 and self.samples.shape[0] == len(self.labels),
            f"{self.samples.shape[0]} samples but {len(self.labels)} labels",
        )
        require(bool(np.all(np.isfinite(self.samples))), "samples must be finite")
        require(bool(np.all(self.labels >= 0)), "labels must be non-negative")

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0


@dataclasses.dataclass(frozen=True)
class ViewConfig:
    noise_sigma: float = 0.1
    mask_fraction: float = 0.25

    def __post_init__(self):
        require(self.noise_sigma >= 0, f"noise_sigma must be >= 0, got {self.noise_sigma}")
        require(
            0 <= self.mask_fraction < 1,
            f"mask_fraction must be in [0, 1), got {self.mask_fraction}",
        )


def make_blobs(rng: Rng, num_classes: int, per_class: int, in_dim: int, spread: float) -> Dataset:
    """Gaussian blobs around class centers drawn on a radius-4 hypersphere"""
    require(
        min(num_classes, per_class, in_dim) >= 1,
        f"counts must be >= 1: {num_classes=} {per_class=} {in_dim=}",
    )
    centers = 4.0 * normalize_rows(rng.standard_normal((num_classes, in_dim)))
    labels = np.repeat(np.arange(num_classes), per_class)
    samples = centers[labels] + spread * rng.standard_normal((len(labels), in_dim))
    return Dataset(samples, labels)


def make_views(rng: Rng, x: Matrix, v: ViewConfig) -> Tuple[Matrix, Matrix]:
    """
    Two independent views of every row of x: additive Gaussian noise, then
    exactly round(mask_fraction * in_dim) coordinates set to zero.
    """
    x = as_matrix(x)
    require(bool(np.all(np.isfinite(x))), "views need finite input")

    def view() -> Matrix:
        out = x + v.noise_sigma * rng.standard_normal(x.shape) if v.noise_sigma > 0 else x.copy()
        nmask = int(round(v.mask_fraction * x.shape[1]))
        if nmask:
            cols = np.argsort(rng.random(x.shape), axis=1)[:, :nmask]
            np.put_along_axis(out, cols, 0.0, axis=1)
        return out

    return view(), view()


def split_dataset(ds: Dataset, fraction: float, rng: Rng) -> Tuple[Dataset, Dataset]:
    """Random (train, holdout) split, holdout gets round(fraction * M) samples"""
    require(0 <= fraction < 1, f"holdout fraction must be in [0, 1), got {fraction}")
    perm = rng.permutation(len(ds))
    nhold = int(round(fraction * len(ds)))
    hold, train = np.sort(perm[:nhold]), np.sort(perm[nhold:])
    return (
        Dataset(ds.samples[train], ds.labels[train]),
        Dataset(ds.samples[hold], ds.labels[hold]),
    )


###############################################################################


class IdxError(Exception):
    pass


class IdxBadMagic(IdxError):
    pass


class IdxTruncated(IdxError):
    pass


class IdxCountMismatch(IdxError):
    pass


def _read_idx(path: Path, magic: int, ndims: int) -> np.ndarray:
    data = path.read_bytes()
    header = 4 + 4 * ndims
    if len(data) < 4:
        raise IdxTruncated(f"{path}: file shorter than the magic number")
    got = int.from_bytes(data[:4], "big")
    if got != magic:
        raise IdxBadMagic(f"{path}: magic 0x{got:08x}, expected 0x{magic:08x}")
    if len(data) < header:
        raise IdxTruncated(f"{path}: file shorter than its {ndims} dimension sizes")
    dims = tuple(int(x) for x in np.frombuffer(data, dtype=">u4", count=ndims, offset=4))
    size = int(np.prod(dims))
    if len(data) - header < size:
        raise IdxTruncated(f"{path}: expected {size} payload bytes, found {len(data) - header}")
    return np.frombuffer(data, dtype=np.uint8, count=size, offset=header).reshape(dims)


def load_idx(images_path: Union[str, Path], labels_path: Union[str, Path]) -> Dataset:
    """Read an IDX image/label pair, pixels scaled to [0, 1], images flattened"""
    images = _read_idx(Path(images_path), IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(Path(labels_path), IDX_LABELS_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise IdxCountMismatch(
            f"{images_path} has {images.shape[0]} images but {labels_path} has {labels.shape[0]} labels"
        )
    log.debug(f"Loaded {images.shape} images from {images_path}")
    samples = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return Dataset(samples, labels.astype(np.int64))
