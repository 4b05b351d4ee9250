"""
Binary tensor container.

Layout, all integers little-endian:
    magic      4 bytes  b"CARP"
    version    u16
    count      u32
    count times:
        name_len   u16, then name_len bytes of UTF-8
        rank       u8, then rank times u64 dimension sizes
        dtype      u8 (0 = float32, 1 = float64)
        payload    prod(dims) little-endian values
"""

import io
import logging
import struct
from pathlib import Path
from typing import BinaryIO, Dict, Union

import numpy as np

from .model import ModelParams

log = logging.getLogger(__name__)

MAGIC = b"CARP"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
DTYPE_CODES = {"f32": 0, "f64": 1}


class CheckpointError(Exception):
    def __init__(self, msg: str, field: str):
        super().__init__(f"Corrupt checkpoint field {field}: {msg}")
        self.field = field


def _read(f: BinaryIO, size: int, field: str) -> bytes:
    buf = f.read(size)
    if len(buf) != size:
        raise CheckpointError(f"expected {size} bytes, got {len(buf)}", field)
    return buf


def _unpack(f: BinaryIO, fmt: str, field: str):
    return struct.unpack(fmt, _read(f, struct.calcsize(fmt), field))


def dump(tensors: Dict[str, np.ndarray], f: BinaryIO, dtype: str = "f64"):
    code = DTYPE_CODES[dtype]
    f.write(MAGIC)
    f.write(struct.pack("<HI", VERSION, len(tensors)))
    for name, arr in tensors.items():
        encoded = name.encode()
        f.write(struct.pack("<H", len(encoded)))
        f.write(encoded)
        f.write(struct.pack(f"<B{arr.ndim}Q", arr.ndim, *arr.shape))
        f.write(struct.pack("<B", code))
        f.write(np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes())


def load(f: BinaryIO) -> Dict[str, np.ndarray]:
    """Read all tensors, converted to float64"""
    if _read(f, 4, "magic") != MAGIC:
        raise CheckpointError("not a CARP checkpoint", "magic")
    (version,) = _unpack(f, "<H", "version")
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}", "version")
    (count,) = _unpack(f, "<I", "count")
    ret: Dict[str, np.ndarray] = {}
    for i in range(count):
        (namelen,) = _unpack(f, "<H", f"tensor[{i}].name")
        try:
            name = _read(f, namelen, f"tensor[{i}].name").decode()
        except UnicodeDecodeError as e:
            raise CheckpointError(str(e), f"tensor[{i}].name") from e
        (rank,) = _unpack(f, "<B", f"{name}.rank")
        dims = _unpack(f, f"<{rank}Q", f"{name}.dims")
        (code,) = _unpack(f, "<B", f"{name}.dtype")
        if code not in DTYPES:
            raise CheckpointError(f"unknown dtype code {code}", f"{name}.dtype")
        dtype = DTYPES[code]
        size = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        arr = np.frombuffer(_read(f, size, f"{name}.payload"), dtype=dtype).reshape(dims)
        ret[name] = arr.astype(np.float64)
    if f.read(1):
        raise CheckpointError("trailing bytes after the last tensor", "count")
    return ret


def dumps(tensors: Dict[str, np.ndarray], dtype: str = "f64") -> bytes:
    buf = io.BytesIO()
    dump(tensors, buf, dtype)
    return buf.getvalue()


def loads(data: bytes) -> Dict[str, np.ndarray]:
    return load(io.BytesIO(data))


def save_params(params: ModelParams, path: Union[str, Path], dtype: str = "f64"):
    with Path(path).open("wb") as f:
        dump(params.leaves(), f, dtype)
    log.debug(f"Saved checkpoint {path}")


def load_params(path: Union[str, Path]) -> ModelParams:
    with Path(path).open("rb") as f:
        leaves = load(f)
    try:
        return ModelParams.from_leaves(leaves)
    except (KeyError, ValueError) as e:
        raise CheckpointError(str(e), "tensors") from e
