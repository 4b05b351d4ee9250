"""
Run configuration as a typed flat dictionary.

ConfigDict is a mix between a dataclass and a dictionary: class annotations
declare the keys, class attributes their defaults, and construction from a
dictionary of strings converts every value using the annotation. Unknown keys
are rejected. The flat text form is one key=value pair per line with '#'
comments, so a resolved configuration can be fed back as is.
"""

from __future__ import annotations

import copy
import enum
import logging
from pathlib import Path
from typing import Any, ChainMap, Dict, Iterable, Tuple, Type, Union, get_type_hints

from typing_extensions import get_args, get_origin

from .data import Dataset, ViewConfig, load_idx, make_blobs
from .model import Features, ModelDims, model_dims
from .numerics import Rng
from .partition import PartitionStrategy

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    def __init__(self, msg: str, key: str = ""):
        super().__init__(msg)
        self.key = key


def all_annotations(cls) -> ChainMap[str, Type]:
    """Annotations of cls and of all its superclasses, resolved at runtime"""
    return ChainMap(*(get_type_hints(c) for c in cls.__mro__ if c is not object))


_TRUE = "1 true yes on".split()
_FALSE = "0 false no off".split()


def _coerce(key: str, typ: Any, value: Any) -> Any:
    if not isinstance(value, str):
        return value
    txt = value.strip()
    try:
        if get_origin(typ) is tuple:
            (elem, *_) = get_args(typ)
            return tuple(elem(x.strip()) for x in txt.split(",") if x.strip())
        if typ is bool:
            if txt.lower() in _TRUE:
                return True
            if txt.lower() in _FALSE:
                return False
            raise ValueError(f"not a boolean: {txt!r}")
        if isinstance(typ, type) and issubclass(typ, enum.Enum):
            return typ(txt.lower())
        if typ in (int, float, str):
            return typ(txt)
    except ValueError as e:
        raise ConfigError(f"Invalid value for config key {key}: {value!r}: {e}", key) from e
    raise ConfigError(f"Unsupported type {typ!r} of config key {key}", key)


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, enum.Enum):
        return str(value.value)
    if isinstance(value, tuple):
        return ",".join(str(x) for x in value)
    if isinstance(value, float):
        # repr round-trips floats exactly.
        return repr(value)
    return str(value)


def parse_lines(lines: Iterable[str], source: str = "<config>") -> Dict[str, str]:
    """Parse key=value lines. Blank lines and '#' comments are skipped."""
    ret: Dict[str, str] = {}
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, val = (x.strip() for x in line.split("=", 1))
        ret[key] = val
    return ret


class ConfigDict:
    def __init__(self, *args, **kwargs):
        data = dict(*args, **kwargs)
        annotations = all_annotations(self.__class__)
        for akey in annotations:
            self.__dict__[akey] = copy.deepcopy(getattr(self.__class__, akey))
        for key, val in data.items():
            if key not in annotations:
                raise ConfigError(f"Unknown config key: {key}", key)
            self.__dict__[key] = _coerce(key, annotations[key], val)
        self.__post_init__()

    def __post_init__(self):
        pass

    def __getitem__(self, k):
        return self.__dict__[k]

    def __contains__(self, k):
        return k in self.__dict__

    def keys(self):
        return self.__dict__.keys()

    def items(self):
        return self.__dict__.items()

    def asdict(self) -> Dict[str, Any]:
        return dict(self.__dict__)

    def replace(self, **kwargs):
        return self.__class__({**self.__dict__, **kwargs})

    def to_text(self) -> str:
        return "".join(f"{k}={_format(v)}\n" for k, v in self.__dict__.items())

    @classmethod
    def from_text(cls, text: str, source: str = "<config>"):
        return cls(parse_lines(text.splitlines(), source))

    @classmethod
    def from_file(cls, path: Union[str, Path]):
        return cls.from_text(Path(path).read_text(), str(path))

    def __repr__(self):
        data = " ".join(f"{k}={self.__dict__[k]!r}" for k in sorted(self.__dict__))
        return f"{self.__class__.__name__}({data})"

    def __eq__(self, o):
        return self.__class__ == o.__class__ and self.__dict__ == o.__dict__


###############################################################################


class Objective(str, enum.Enum):
    PARTITIONED = "partitioned"
    GLOBAL = "global"


class DatasetKind(str, enum.Enum):
    BLOBS = "blobs"
    IDX = "idx"


class Dtype(str, enum.Enum):
    F32 = "f32"
    F64 = "f64"


class RunConfig(ConfigDict):
    seed: int = 0
    epochs: int = 300
    batch_size: int = 128
    prototypes: int = 64
    block_size: int = 8
    partition_strategy: PartitionStrategy = PartitionStrategy.RANDOM
    objective: Objective = Objective.PARTITIONED
    lambda_e: float = 0.01
    """Entropy weight of the global objective"""
    lr_start: float = 0.06
    """Pilot runs at 0.6 saturate the block softmaxes and collapse every block"""
    lr_end: float = 0.006
    momentum: float = 0.9
    weight_decay: float = 1e-6
    use_teacher: bool = True
    eta_start: float = 0.99
    eta_end: float = 1.0
    encoder_hidden: Tuple[int, ...] = (64, 64)
    projector_hidden: Tuple[int, ...] = (32,)
    embed_dim: int = 16
    dataset: DatasetKind = DatasetKind.BLOBS
    num_classes: int = 8
    per_class: int = 128
    in_dim: int = 16
    spread: float = 0.5
    idx_images: str = ""
    idx_labels: str = ""
    holdout_fraction: float = 0.2
    noise_sigma: float = 0.1
    mask_fraction: float = 0.25
    eval_every: int = 0
    """Evaluate every that many epochs; the last epoch is always evaluated"""
    eval_features: Features = Features.EMBEDDING
    knn_k: int = 20
    knn_tau: float = 0.07
    checkpoint_every: int = 0
    checkpoint_dtype: Dtype = Dtype.F64
    shards: int = 1
    """Micro-batches per step; the gradient reduction order follows them"""
    workers: int = 1
    """Threads computing the micro-batches; never changes results"""

    def __post_init__(self):
        def check(cond: bool, key: str, msg: str):
            if not cond:
                raise ConfigError(f"Invalid config key {key}: {msg}", key)

        check(self.batch_size >= 1, "batch_size", "must be >= 1")
        check(self.prototypes >= 2, "prototypes", "must be >= 2")
        check(self.epochs >= 1, "epochs", "must be >= 1")
        check(self.block_size >= 1, "block_size", "must be >= 1")
        check(
            self.objective != Objective.PARTITIONED or self.prototypes % self.block_size == 0,
            "block_size",
            f"{self.block_size} does not divide prototypes={self.prototypes}",
        )
        check(self.lambda_e >= 0, "lambda_e", "must be >= 0")
        check(0 <= self.eta_start <= self.eta_end <= 1, "eta_start", "need 0 <= eta_start <= eta_end <= 1")
        check(len(self.encoder_hidden) >= 1, "encoder_hidden", "needs at least one layer")
        check(self.embed_dim >= 1, "embed_dim", "must be >= 1")
        check(0 <= self.holdout_fraction < 1, "holdout_fraction", "must be in [0, 1)")
        check(self.noise_sigma >= 0, "noise_sigma", "must be >= 0")
        check(0 <= self.mask_fraction < 1, "mask_fraction", "must be in [0, 1)")
        check(self.knn_k >= 1, "knn_k", "must be >= 1")
        check(self.knn_tau > 0, "knn_tau", "must be > 0")
        check(self.shards >= 1, "shards", "must be >= 1")
        check(self.workers >= 1, "workers", "must be >= 1")
        check(
            self.dataset != DatasetKind.IDX or bool(self.idx_images and self.idx_labels),
            "dataset",
            "idx needs idx_images and idx_labels",
        )

    def view_config(self) -> ViewConfig:
        return ViewConfig(self.noise_sigma, self.mask_fraction)

    def model_dims(self, in_dim: int) -> ModelDims:
        return model_dims(in_dim, self.encoder_hidden, self.projector_hidden, self.embed_dim, self.prototypes)

    def assignment_block(self) -> int:
        """Block width of the assignment features: block_size, or all prototypes for the global objective"""
        return self.block_size if self.objective == Objective.PARTITIONED else self.prototypes


def dataset_from_config(cfg: RunConfig, rng: Rng) -> Dataset:
    if cfg.dataset == DatasetKind.IDX:
        return load_idx(cfg.idx_images, cfg.idx_labels)
    return make_blobs(rng, cfg.num_classes, cfg.per_class, cfg.in_dim, cfg.spread)
