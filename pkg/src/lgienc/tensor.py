"""Dense 4-D NCHW tensor type, deterministic RNG, elementwise math, and file IO.

Layout is row-major (w fastest) everywhere. f32 is the compute dtype; f64
exists for gradient checking. There is no broadcasting beyond scalars: all
shape coercions are explicit.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import FormatError, ShapeError

DTYPE_NAMES = {"f32": np.float32, "f64": np.float64}
_DTYPE_CODES = {"f32": 0, "f64": 1}
_CODE_DTYPES = {0: "f32", 1: "f64"}

TENSOR_MAGIC = b"LGIT"
TENSOR_VERSION = 1
# magic(4) + version(4) + dtype(1) + reserved(3) + ndim(4) + dims(4*8)
TENSOR_HEADER = struct.Struct("<4sIB3xI4Q")


class Tensor:
    """Immutable dense (n, c, h, w) array of f32 or f64 values.

    The backing numpy array is C-contiguous (row-major, w fastest) and marked
    read-only; operations return new tensors. The public constructor copies
    its input so later mutation of the source cannot alias into the tensor.
    """

    __slots__ = ("data",)

    def __init__(self, data, dtype: str | None = None):
        np_dtype = DTYPE_NAMES[dtype] if dtype is not None else None
        arr = np.array(data, dtype=np_dtype, order="C")
        if dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if arr.ndim != 4:
            raise ShapeError(f"tensor must be 4-D (n, c, h, w), got shape {arr.shape}")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        """Adopt a freshly computed array without copying. Internal use only."""
        arr = np.ascontiguousarray(arr)
        if arr.ndim != 4:
            raise ShapeError(f"tensor must be 4-D (n, c, h, w), got shape {arr.shape}")
        arr.flags.writeable = False
        t = object.__new__(cls)
        object.__setattr__(t, "data", arr)
        return t

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def dtype(self) -> str:
        return "f32" if self.data.dtype == np.float32 else "f64"

    @property
    def size(self) -> int:
        return self.data.size

    def astype(self, dtype: str) -> "Tensor":
        if dtype == self.dtype:
            return self
        return Tensor._wrap(self.data.astype(DTYPE_NAMES[dtype]))

    def tolist(self):
        return self.data.tolist()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"

    @staticmethod
    def zeros(shape, dtype: str = "f32") -> "Tensor":
        return Tensor._wrap(np.zeros(shape, dtype=DTYPE_NAMES[dtype]))

    @staticmethod
    def full(shape, value: float, dtype: str = "f32") -> "Tensor":
        return Tensor._wrap(np.full(shape, value, dtype=DTYPE_NAMES[dtype]))


def zeros_like(x: Tensor) -> Tensor:
    return Tensor.zeros(x.shape, x.dtype)


# -- deterministic RNG -------------------------------------------------------
#
# SplitMix64 (Steele, Lea & Flood 2014): state advances by a fixed odd gamma
# and each output is a finalizing xor-shift-multiply hash of the state. The
# k-th state is seed + k * gamma, so arbitrarily long draws vectorize as one
# numpy expression, and the stream is bit-identical on every platform.

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


class Rng:
    """Deterministic SplitMix64 stream seeded by a 64-bit integer."""

    def __init__(self, seed: int):
        self._seed = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
        self._counter = 0

    def _raw(self, count: int) -> np.ndarray:
        with np.errstate(over="ignore"):
            idx = (np.arange(self._counter, self._counter + count, dtype=np.uint64)
                   + np.uint64(1))
            states = self._seed + idx * _GAMMA
            out = _mix64(states)
        self._counter += count
        return out

    def _unit(self, count: int) -> np.ndarray:
        """Uniform f64 in [0, 1) from the top 53 bits of each word."""
        return (self._raw(count) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)

    def uniform(self, shape, low: float = 0.0, high: float = 1.0,
                dtype: str = "f32") -> np.ndarray:
        shape = tuple(int(s) for s in shape)
        n = int(np.prod(shape)) if shape else 1
        vals = low + (high - low) * self._unit(n)
        return vals.reshape(shape).astype(DTYPE_NAMES[dtype])

    def normal(self, shape, mean: float = 0.0, std: float = 1.0,
               dtype: str = "f32") -> np.ndarray:
        """Gaussian samples via Box-Muller on two uniform draws per value."""
        shape = tuple(int(s) for s in shape)
        n = int(np.prod(shape)) if shape else 1
        u1 = self._unit(n)
        u2 = self._unit(n)
        r = np.sqrt(-2.0 * np.log(1.0 - u1))
        z = r * np.cos(2.0 * np.pi * u2)
        return (mean + std * z).reshape(shape).astype(DTYPE_NAMES[dtype])

    def integers(self, low: int, high: int, count: int = 1) -> np.ndarray:
        """Integers in [low, high); modulo bias is < 2**-57 for small ranges."""
        span = np.uint64(high - low)
        return low + (self._raw(count) % span).astype(np.int64)

    def tensor(self, shape, low: float = -1.0, high: float = 1.0,
               dtype: str = "f32") -> Tensor:
        return Tensor._wrap(self.uniform(shape, low, high, dtype))

    def fork(self, stream: int) -> "Rng":
        """Independent child stream; deterministic in (seed, stream)."""
        with np.errstate(over="ignore"):
            child = _mix64(np.array(
                [self._seed + np.uint64(stream + 1) * _MIX2], dtype=np.uint64))[0]
        return Rng(int(child))


# -- elementwise operations --------------------------------------------------


def _require_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "add")
    return Tensor._wrap(a.data + b.data)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "sub")
    return Tensor._wrap(a.data - b.data)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "mul")
    return Tensor._wrap(a.data * b.data)


def scalar_mul(a: Tensor, s: float) -> Tensor:
    return Tensor._wrap(a.data * a.data.dtype.type(s))


def sigmoid_array(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic, clamped into the open interval (0, 1)."""
    out = np.empty_like(x)
    pos = x >= 0
    np.exp(-x, where=pos, out=out)
    out[pos] = 1.0 / (1.0 + out[pos])
    neg = ~pos
    ex = np.exp(x[neg])
    out[neg] = ex / (1.0 + ex)
    one = x.dtype.type(1)
    return np.clip(out, np.finfo(x.dtype).tiny, np.nextafter(one, x.dtype.type(0)))


def sigmoid(a: Tensor) -> Tensor:
    return Tensor._wrap(sigmoid_array(a.data))


def relu(a: Tensor) -> Tensor:
    return Tensor._wrap(np.maximum(a.data, 0))


# -- channel split / concat --------------------------------------------------


def channel_split(x: Tensor, k: int) -> tuple[Tensor, Tensor]:
    """Split along channels at k; concatenating the parts restores x."""
    c = x.shape[1]
    if not 0 < k < c:
        raise ShapeError(f"channel_split: k={k} out of range for {c} channels")
    return Tensor._wrap(x.data[:, :k].copy()), Tensor._wrap(x.data[:, k:].copy())


def channel_concat(parts: list[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("channel_concat: need at least one part")
    n, _, h, w = parts[0].shape
    for p in parts[1:]:
        pn, _, ph, pw = p.shape
        if (pn, ph, pw) != (n, h, w):
            raise ShapeError(
                f"channel_concat: batch/spatial mismatch {parts[0].shape} vs {p.shape}")
    if len(parts) == 1:
        return parts[0]
    return Tensor._wrap(np.concatenate([p.data for p in parts], axis=1))


# -- binary tensor file format ----------------------------------------------


def tensor_bytes(t: Tensor) -> bytes:
    header = TENSOR_HEADER.pack(TENSOR_MAGIC, TENSOR_VERSION,
                                _DTYPE_CODES[t.dtype], 4, *t.shape)
    payload = t.data.astype(t.data.dtype.newbyteorder("<"), copy=False).tobytes()
    return header + payload


def write_tensor(path, t: Tensor) -> None:
    with open(path, "wb") as f:
        f.write(tensor_bytes(t))


def read_tensor(path) -> Tensor:
    with open(path, "rb") as f:
        return tensor_from_bytes(f.read())


def tensor_from_bytes(buf: bytes, offset: int = 0) -> Tensor:
    t, _ = parse_tensor_record(buf, offset)
    return t


def parse_tensor_record(buf: bytes, offset: int = 0) -> tuple[Tensor, int]:
    """Decode one tensor record; returns (tensor, offset past the record)."""
    if len(buf) - offset < TENSOR_HEADER.size:
        raise FormatError("truncated tensor header")
    magic, version, dtype_code, ndim, n, c, h, w = TENSOR_HEADER.unpack_from(buf, offset)
    if magic != TENSOR_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {TENSOR_MAGIC!r}")
    if version != TENSOR_VERSION:
        raise FormatError(f"unsupported tensor version {version}")
    if dtype_code not in _CODE_DTYPES:
        raise FormatError(f"unknown dtype code {dtype_code}")
    if ndim != 4:
        raise FormatError(f"expected 4 dims, file declares {ndim}")
    dtype = _CODE_DTYPES[dtype_code]
    count = n * c * h * w
    nbytes = count * (4 if dtype == "f32" else 8)
    start = offset + TENSOR_HEADER.size
    if len(buf) - start < nbytes:
        raise FormatError(
            f"truncated payload: need {nbytes} bytes, have {len(buf) - start}")
    flat = np.frombuffer(buf, dtype=np.dtype(DTYPE_NAMES[dtype]).newbyteorder("<"),
                         count=count, offset=start)
    arr = flat.astype(DTYPE_NAMES[dtype]).reshape(n, c, h, w)
    return Tensor._wrap(arr), start + nbytes
