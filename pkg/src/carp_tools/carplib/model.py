"""
Student/teacher network: encoder MLP, projector MLP and the prototype matrix.

Layers compute y = x @ W + b with W of shape (fan_in, fan_out). ReLU follows
every layer except the last projector layer, whose output is the embedding z.
Logits are z @ C.T. The backward pass is written out by hand so that every
gradient can be checked against finite differences.
"""

from __future__ import annotations

import dataclasses
import enum
import logging
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .errors import require
from .numerics import Matrix, Rng, as_matrix, normalize_rows

log = logging.getLogger(__name__)


@dataclasses.dataclass
class Layer:
    weight: Matrix
    bias: np.ndarray


@dataclasses.dataclass
class ModelDims:
    in_dim: int
    encoder: Tuple[int, ...]
    """Output widths of the encoder layers"""
    projector: Tuple[int, ...]
    """Output widths of the projector layers, the last one is d"""
    k: int

    def __post_init__(self):
        require(self.in_dim >= 1, f"in_dim must be >= 1, got {self.in_dim}")
        require(len(self.encoder) >= 1, "encoder needs at least one layer")
        require(len(self.projector) >= 1, "projector needs at least one layer")
        require(
            all(x >= 1 for x in (*self.encoder, *self.projector)),
            f"layer widths must be >= 1: {self.encoder} {self.projector}",
        )
        require(self.k >= 1, f"k must be >= 1, got {self.k}")

    @property
    def embed_dim(self) -> int:
        return self.projector[-1]

    def chains(self) -> Tuple[List[Tuple[int, int]], List[Tuple[int, int]]]:
        enc = list(zip((self.in_dim, *self.encoder[:-1]), self.encoder))
        proj = list(zip((self.encoder[-1], *self.projector[:-1]), self.projector))
        return enc, proj


def model_dims(
    in_dim: int,
    encoder_hidden: Sequence[int],
    projector_hidden: Sequence[int],
    embed_dim: int,
    k: int,
) -> ModelDims:
    return ModelDims(
        in_dim=in_dim,
        encoder=tuple(encoder_hidden),
        projector=(*projector_hidden, embed_dim),
        k=k,
    )


@dataclasses.dataclass
class ModelParams:
    encoder: List[Layer]
    projector: List[Layer]
    prototypes: Matrix

    def leaves(self) -> Dict[str, np.ndarray]:
        """Every parameter array by a stable dotted name"""
        ret: Dict[str, np.ndarray] = {}
        for prefix, layers in (("encoder", self.encoder), ("projector", self.projector)):
            for i, layer in enumerate(layers):
                ret[f"{prefix}.{i}.weight"] = layer.weight
                ret[f"{prefix}.{i}.bias"] = layer.bias
        ret["prototypes"] = self.prototypes
        return ret

    @classmethod
    def from_leaves(cls, leaves: Dict[str, np.ndarray]):
        def stack(prefix: str) -> List[Layer]:
            out: List[Layer] = []
            while f"{prefix}.{len(out)}.weight" in leaves:
                i = len(out)
                out.append(
                    Layer(leaves[f"{prefix}.{i}.weight"], leaves[f"{prefix}.{i}.bias"])
                )
            return out

        ret = cls(stack("encoder"), stack("projector"), leaves["prototypes"])
        expected = set(ret.leaves())
        require(
            set(leaves) == expected,
            f"unexpected parameter names: {sorted(set(leaves) ^ expected)}",
        )
        ret.check()
        return ret

    def dims(self) -> ModelDims:
        return ModelDims(
            in_dim=self.encoder[0].weight.shape[0],
            encoder=tuple(x.weight.shape[1] for x in self.encoder),
            projector=tuple(x.weight.shape[1] for x in self.projector),
            k=self.prototypes.shape[0],
        )

    def check(self):
        """Assert that the layer dimensions chain correctly"""
        require(bool(self.encoder) and bool(self.projector), "empty layer stack")
        width = self.encoder[0].weight.shape[0]
        for i, layer in enumerate(self.layers()):
            require(
                layer.weight.ndim == 2 and layer.weight.shape[0] == width,
                f"layer {i} expects input width {layer.weight.shape[0]}, chain gives {width}",
            )
            require(
                layer.bias.shape == (layer.weight.shape[1],),
                f"bias shape {layer.bias.shape} does not match weight {layer.weight.shape}",
            )
            width = layer.weight.shape[1]
        require(
            self.prototypes.ndim == 2 and self.prototypes.shape[1] == width,
            f"prototypes {self.prototypes.shape} do not match embedding width {width}",
        )

    def layers(self) -> Iterator[Layer]:
        yield from self.encoder
        yield from self.projector

    def copy(self):
        return self.__class__.from_leaves({k: v.copy() for k, v in self.leaves().items()})

    def same_shapes(self, other: ModelParams) -> bool:
        a, b = self.leaves(), other.leaves()
        return a.keys() == b.keys() and all(a[k].shape == b[k].shape for k in a)


class Gradients(ModelParams):
    """Same tree as ModelParams, one gradient array per parameter"""

    @classmethod
    def zeros_like(cls, params: ModelParams) -> Gradients:
        return cls.from_leaves({k: np.zeros_like(v) for k, v in params.leaves().items()})

    def __add__(self, other: Gradients) -> Gradients:
        require(self.same_shapes(other), "cannot add gradients of different shapes")
        b = other.leaves()
        return Gradients.from_leaves({k: v + b[k] for k, v in self.leaves().items()})


@dataclasses.dataclass
class ForwardTrace:
    inputs: List[Matrix]
    """Input of every layer, in layer order"""
    pre: List[Matrix]
    """Pre-activation of every layer, in layer order"""
    features: Matrix
    """Encoder output h"""
    z: Matrix
    logits: Matrix


def init(rng: Rng, dims: ModelDims) -> ModelParams:
    """Glorot-uniform weights, zero biases, unit-norm Gaussian prototypes"""
    enc, proj = dims.chains()

    def layer(fan_in: int, fan_out: int) -> Layer:
        a = np.sqrt(6.0 / (fan_in + fan_out))
        return Layer(rng.uniform(-a, a, size=(fan_in, fan_out)), np.zeros(fan_out))

    encoder = [layer(*x) for x in enc]
    projector = [layer(*x) for x in proj]
    prototypes = normalize_rows(rng.standard_normal((dims.k, dims.embed_dim)))
    return ModelParams(encoder, projector, prototypes)


def _relu(x: Matrix) -> Matrix:
    return np.maximum(x, 0.0)


def forward(params: ModelParams, batch: Matrix) -> ForwardTrace:
    batch = as_matrix(batch)
    in_dim = params.encoder[0].weight.shape[0]
    require(
        batch.shape[1] == in_dim,
        f"batch width {batch.shape[1]} does not match encoder input width {in_dim}",
    )
    inputs: List[Matrix] = []
    pre: List[Matrix] = []
    x = batch
    layers = list(params.layers())
    features = x
    for i, layer in enumerate(layers):
        inputs.append(x)
        y = x @ layer.weight + layer.bias
        pre.append(y)
        x = y if i == len(layers) - 1 else _relu(y)
        if i == len(params.encoder) - 1:
            features = x
    z = x
    return ForwardTrace(inputs, pre, features, z, z @ params.prototypes.T)


def backward(params: ModelParams, trace: ForwardTrace, dloss_dlogits: Matrix) -> Gradients:
    dlogits = as_matrix(dloss_dlogits)
    layers = list(params.layers())
    require(
        len(trace.pre) == len(layers) and dlogits.shape == trace.logits.shape,
        f"trace does not belong to these parameters: {len(trace.pre)} layers, logits {trace.logits.shape}",
    )
    dprototypes = dlogits.T @ trace.z
    delta = dlogits @ params.prototypes
    grads: List[Layer] = []
    for i in reversed(range(len(layers))):
        if i != len(layers) - 1:
            delta = delta * (trace.pre[i] > 0)
        grads.append(Layer(trace.inputs[i].T @ delta, delta.sum(axis=0)))
        delta = delta @ layers[i].weight.T
    grads.reverse()
    nenc = len(params.encoder)
    return Gradients(grads[:nenc], grads[nenc:], dprototypes)


class Features(str, enum.Enum):
    ENCODER = "encoder"
    EMBEDDING = "embedding"
    ASSIGNMENT = "assignment"
    """One-hot prototype choice within each block of consecutive prototypes"""


def assignment_codes(logits: Matrix, block_size: int) -> Matrix:
    """
    Cut the K logit columns into consecutive blocks of block_size and mark the
    argmax of every block with 1. Rows hold K // block_size ones.
    """
    logits = as_matrix(logits)
    n, k = logits.shape
    require(
        block_size >= 1 and k % block_size == 0,
        f"block_size={block_size} does not divide {k} prototypes",
    )
    blocks = logits.reshape(n, k // block_size, block_size)
    codes = np.zeros_like(blocks)
    np.put_along_axis(codes, np.argmax(blocks, axis=2)[..., None], 1.0, axis=2)
    return codes.reshape(n, k)


def embed(
    params: ModelParams,
    batch: Matrix,
    features: Features = Features.EMBEDDING,
    block_size: Optional[int] = None,
) -> Matrix:
    """Evaluation features. Assignment codes use one block of all K prototypes unless block_size is given."""
    trace = forward(params, batch)
    if features == Features.ENCODER:
        return trace.features
    if features == Features.ASSIGNMENT:
        return assignment_codes(trace.logits, block_size or params.prototypes.shape[0])
    return trace.z
