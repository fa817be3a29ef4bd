"""Dense array helpers, seeded random streams and the SPQT tensor format.

Tensors are plain numpy arrays. The training path works in float64, the
index/search path stores float32.
"""

from __future__ import annotations

import io
import struct
from typing import BinaryIO

import numpy as np

from .errors import DegenerateInputError, DimensionError, FormatError, ParameterError

TRAIN_DTYPE = np.float64
INDEX_DTYPE = np.float32

_MASK64 = (1 << 64) - 1


def as_tensor(data, dtype=TRAIN_DTYPE, checked: bool = True) -> np.ndarray:
    """Convert ``data`` to a contiguous array, rejecting NaN/Inf when checked."""
    arr = np.ascontiguousarray(data, dtype=dtype)
    if checked and not np.all(np.isfinite(arr)):
        raise DegenerateInputError("tensor contains non-finite values")
    return arr


def squared_euclidean(a, b) -> float:
    a = np.asarray(a, dtype=TRAIN_DTYPE)
    b = np.asarray(b, dtype=TRAIN_DTYPE)
    if a.ndim != 1 or a.shape != b.shape:
        raise DimensionError(f"expected equal 1-D shapes, got {a.shape} and {b.shape}")
    d = a - b
    return float(d @ d)


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between two nonzero vectors.

    Zero-norm inputs raise instead of returning 0: a zero descriptor means
    something upstream is broken.
    """
    a = np.asarray(a, dtype=TRAIN_DTYPE)
    b = np.asarray(b, dtype=TRAIN_DTYPE)
    if a.ndim != 1 or a.shape != b.shape:
        raise DimensionError(f"expected equal 1-D shapes, got {a.shape} and {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("cosine similarity of a zero-norm vector")
    return float(np.clip((a @ b) / (na * nb), -1.0, 1.0))


def softmax(v, temperature: float = 1.0, axis: int = -1) -> np.ndarray:
    if not temperature > 0:
        raise ParameterError(f"temperature must be > 0, got {temperature}")
    v = np.asarray(v, dtype=TRAIN_DTYPE) / temperature
    v = v - np.max(v, axis=axis, keepdims=True)
    e = np.exp(v)
    return e / np.sum(e, axis=axis, keepdims=True)


def logsumexp(v: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(v, axis=axis, keepdims=True)
    out = np.log(np.sum(np.exp(v - m), axis=axis, keepdims=True)) + m
    return np.squeeze(out, axis=axis)


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def stream_id(*parts: int) -> int:
    """Fold integer labels (epoch, item, view, ...) into one 64-bit stream id."""
    h = 0
    for p in parts:
        h = _splitmix64(h ^ (int(p) & _MASK64))
    return h


class Rng:
    """Counter-based random stream keyed by ``(seed, stream)``.

    Backed by Philox, whose raw bit stream is specified and therefore
    identical across platforms. Each (epoch, item) draw gets its own stream
    via :meth:`child`, so results do not depend on iteration order.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream = int(stream) & _MASK64
        key = (self.seed << 64) | self.stream
        self.generator = np.random.Generator(np.random.Philox(key=key))

    def child(self, *parts: int) -> "Rng":
        return Rng(self.seed, stream_id(self.stream, *parts))

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        """Integers in ``[low, high)``."""
        return self.generator.integers(low, high, size)

    def random(self, size=None):
        return self.generator.random(size)

    def permutation(self, n):
        return self.generator.permutation(n)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, stream={self.stream:#x})"


# --- SPQT flat tensor format -------------------------------------------------

SPQT_MAGIC = b"SPQT"
SPQT_VERSION = 1
_DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODE_OF = {np.dtype("float32"): 1, np.dtype("float64"): 2}


def write_tensor(fh: BinaryIO, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    code = _CODE_OF.get(arr.dtype)
    if code is None:
        raise FormatError(f"SPQT supports float32/float64 only, got {arr.dtype}")
    if arr.ndim > 255:
        raise FormatError("rank exceeds 255")
    fh.write(SPQT_MAGIC)
    fh.write(struct.pack("<BBBB", SPQT_VERSION, code, arr.ndim, 0))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype=_DTYPE_CODES[code]).tobytes())


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated stream: wanted {n} bytes, got {len(buf)}")
    return buf


def read_tensor(fh: BinaryIO) -> np.ndarray:
    if _read_exact(fh, 4) != SPQT_MAGIC:
        raise FormatError("bad SPQT magic")
    version, code, rank, reserved = struct.unpack("<BBBB", _read_exact(fh, 4))
    if version != SPQT_VERSION:
        raise FormatError(f"unsupported SPQT version {version}")
    if code not in _DTYPE_CODES:
        raise FormatError(f"unknown SPQT dtype code {code}")
    if reserved != 0:
        raise FormatError("SPQT reserved byte must be 0")
    shape = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank))
    dtype = _DTYPE_CODES[code]
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    payload = _read_exact(fh, count * dtype.itemsize)
    arr = np.frombuffer(payload, dtype=dtype).reshape(shape)
    return arr.astype(dtype.newbyteorder("="), copy=True)


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, arr)
    return buf.getvalue()


def tensor_from_bytes(data: bytes) -> np.ndarray:
    return read_tensor(io.BytesIO(data))


def save_tensor(path, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, arr)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        arr = read_tensor(fh)
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after SPQT tensor")
    return arr
