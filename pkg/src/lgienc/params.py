"""Named, ordered store of learnable tensors with matching gradient slots.

Every parameter is kept as a 4-D f32 array so checkpoints reuse the tensor
record format. Modules hold reshaped views of the same memory, so optimizer
updates through the store are visible everywhere.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import FormatError, ShapeError
from .tensor import TENSOR_HEADER, Tensor, parse_tensor_record, tensor_bytes

STORE_MAGIC = b"LGIP"
STORE_VERSION = 1
_STORE_HEADER = struct.Struct("<4sII")
_NAME_LEN = struct.Struct("<H")


def as_param(value: np.ndarray) -> np.ndarray:
    """Coerce a parameter array to 4-D f32, C-contiguous."""
    arr = np.ascontiguousarray(value, dtype=np.float32)
    if arr.ndim > 4:
        raise ShapeError(f"parameters must be at most 4-D, got {arr.shape}")
    while arr.ndim < 4:
        arr = arr[..., None]
    return arr


class ParamStore:
    """Ordered mapping name -> (value, grad), both 4-D f32 arrays."""

    def __init__(self):
        self._values: dict[str, np.ndarray] = {}
        self._grads: dict[str, np.ndarray] = {}

    def add(self, name: str, value: np.ndarray) -> np.ndarray:
        """Register a parameter; returns the stored (shared-memory) array."""
        if name in self._values:
            raise ShapeError(f"duplicate parameter name {name!r}")
        arr = as_param(value)
        self._values[name] = arr
        self._grads[name] = np.zeros_like(arr)
        return arr

    def names(self) -> list[str]:
        return list(self._values)

    def __contains__(self, name: str) -> bool:
        return name in self._values

    def __len__(self) -> int:
        return len(self._values)

    def value(self, name: str) -> np.ndarray:
        return self._values[name]

    def grad(self, name: str) -> np.ndarray:
        return self._grads[name]

    def items(self):
        return self._values.items()

    def zero_grads(self) -> None:
        for g in self._grads.values():
            g[...] = 0.0

    def accumulate(self, grads: dict[str, np.ndarray]) -> None:
        """Add a gradient contribution into the matching slots."""
        for name, g in grads.items():
            slot = self._grads[name]
            slot += np.asarray(g, dtype=np.float32).reshape(slot.shape)

    def count(self, prefix: str = "") -> int:
        """Total element count over parameters whose name starts with prefix."""
        return sum(v.size for n, v in self._values.items() if n.startswith(prefix))

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(_STORE_HEADER.pack(STORE_MAGIC, STORE_VERSION, len(self._values)))
            for name, value in self._values.items():
                raw = name.encode("utf-8")
                f.write(_NAME_LEN.pack(len(raw)))
                f.write(raw)
                f.write(tensor_bytes(Tensor._wrap(value.copy())))

    @classmethod
    def load(cls, path) -> "ParamStore":
        with open(path, "rb") as f:
            buf = f.read()
        if len(buf) < _STORE_HEADER.size:
            raise FormatError("truncated parameter store header")
        magic, version, count = _STORE_HEADER.unpack_from(buf, 0)
        if magic != STORE_MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {STORE_MAGIC!r}")
        if version != STORE_VERSION:
            raise FormatError(f"unsupported store version {version}")
        store = cls()
        offset = _STORE_HEADER.size
        for _ in range(count):
            if len(buf) - offset < _NAME_LEN.size:
                raise FormatError("truncated parameter name length")
            (name_len,) = _NAME_LEN.unpack_from(buf, offset)
            offset += _NAME_LEN.size
            if len(buf) - offset < name_len:
                raise FormatError("truncated parameter name")
            name = buf[offset:offset + name_len].decode("utf-8")
            offset += name_len
            t, offset = parse_tensor_record(buf, offset)
            if t.dtype != "f32":
                raise FormatError(f"parameter {name!r} must be f32")
            store.add(name, t.data)
        if offset != len(buf):
            raise FormatError(f"{len(buf) - offset} trailing bytes after last entry")
        return store


def store_file_size(shapes: list[tuple[str, tuple[int, int, int, int]]],
                    dtype_bytes: int = 4) -> int:
    """Exact byte length of a store holding f32 entries with the given shapes."""
    total = _STORE_HEADER.size
    for name, shape in shapes:
        total += _NAME_LEN.size + len(name.encode("utf-8"))
        total += TENSOR_HEADER.size + dtype_bytes * int(np.prod(shape))
    return total
