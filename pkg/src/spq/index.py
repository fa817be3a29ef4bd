"""Packed PQ codes, lookup-table ADC search and the SPQI index file.

Bit layout: a code is ``B = M * log2(K)`` bits. Sub-code ``m`` occupies bits
``[m*b, (m+1)*b)`` counted from the most significant end of the byte
stream, MSB-first. Each item is byte-aligned; any padding bits sit at the
end of the item's last byte and are zero.
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import BinaryIO

import numpy as np

from .errors import ConfigurationError, DataCorruptionError, DimensionError, FormatError, UsageError
from .numerics import INDEX_DTYPE, read_tensor, write_tensor
from .pq_head import CodebookSet, hard_assign, is_power_of_two

SPQI_MAGIC = b"SPQI"
SPQI_VERSION = 1


def code_bits(K: int) -> int:
    if not is_power_of_two(K) or K < 2:
        raise ConfigurationError(f"K must be a power of two >= 2, got {K}")
    return K.bit_length() - 1


def bytes_per_code(M: int, K: int) -> int:
    return (M * code_bits(K) + 7) // 8


def pack_codes(indices: np.ndarray, K: int) -> np.ndarray:
    """Pack ``(N, M)`` codeword indices into ``(N, ceil(B/8))`` uint8."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 2:
        raise DimensionError(f"indices must be (N, M), got {idx.shape}")
    b = code_bits(K)
    if idx.size and (idx.min() < 0 or idx.max() >= K):
        raise DataCorruptionError(f"index outside [0, {K})")
    shifts = np.arange(b - 1, -1, -1)
    bits = ((idx[:, :, None] >> shifts) & 1).astype(np.uint8)  # (N, M, b), MSB first
    return np.packbits(bits.reshape(idx.shape[0], -1), axis=1)


def unpack_codes(packed: np.ndarray, M: int, K: int) -> np.ndarray:
    """Inverse of :func:`pack_codes`."""
    b = code_bits(K)
    packed = np.asarray(packed, dtype=np.uint8)
    if packed.ndim != 2 or packed.shape[1] != bytes_per_code(M, K):
        raise DimensionError(f"packed codes must be (N, {bytes_per_code(M, K)}), got {packed.shape}")
    bits = np.unpackbits(packed, axis=1)[:, : M * b].reshape(-1, M, b).astype(np.int64)
    weights = 1 << np.arange(b - 1, -1, -1)
    return bits @ weights


@dataclass
class IndexFile:
    """A built retrieval database: f32 codebooks, packed codes, optional labels."""

    codebooks: CodebookSet
    codes: np.ndarray  # (N_g, bytes_per_code) uint8
    labels: np.ndarray | None = None  # (N_g,) uint64 label bitmasks
    label_count: int = 0

    def __post_init__(self):
        self.codebooks = self.codebooks.astype(INDEX_DTYPE)
        self.codes = np.ascontiguousarray(self.codes, dtype=np.uint8)
        nb = bytes_per_code(self.M, self.K)
        if self.codes.ndim != 2 or self.codes.shape[1] != nb:
            raise DataCorruptionError(f"codes must be (N_g, {nb}) bytes, got {self.codes.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.uint64)
            if self.labels.shape != (self.size,):
                raise DataCorruptionError("label block length does not match N_g")
        self._indices: np.ndarray | None = None

    @property
    def M(self) -> int:
        return self.codebooks.M

    @property
    def K(self) -> int:
        return self.codebooks.K

    @property
    def D(self) -> int:
        return self.codebooks.D

    @property
    def size(self) -> int:
        return self.codes.shape[0]

    def indices(self) -> np.ndarray:
        """Unpacked ``(N_g, M)`` codeword indices (cached)."""
        if self._indices is None:
            self._indices = unpack_codes(self.codes, self.M, self.K)
        return self._indices

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            write_index(fh, self)

    @classmethod
    def load(cls, path) -> "IndexFile":
        with open(path, "rb") as fh:
            return read_index(fh)


def labels_to_bitmasks(labels) -> np.ndarray:
    """Single-label ints become ``1 << label``; 2-D 0/1 arrays become row bitmasks."""
    arr = np.asarray(labels)
    if arr.ndim == 1:
        if arr.size and (arr.min() < 0 or arr.max() >= 64):
            raise ConfigurationError("single labels must lie in [0, 64)")
        return np.left_shift(np.uint64(1), arr.astype(np.uint64))
    if arr.ndim == 2:
        if arr.shape[1] > 64:
            raise ConfigurationError("at most 64 labels fit in a bitmask")
        weights = np.left_shift(np.uint64(1), np.arange(arr.shape[1], dtype=np.uint64))
        return (arr.astype(bool).astype(np.uint64) * weights).sum(axis=1, dtype=np.uint64)
    raise DimensionError(f"labels must be 1-D ints or 2-D multi-hot, got {arr.shape}")


def build_index(cb: CodebookSet, gallery: np.ndarray, labels=None) -> IndexFile:
    g = np.asarray(gallery)
    if g.ndim != 2 or g.shape[1] != cb.D:
        raise ConfigurationError(f"gallery must be (N_g, {cb.D}), got {g.shape}")
    codes = pack_codes(hard_assign(cb, g), cb.K)
    masks = label_count = None
    if labels is not None:
        masks = labels_to_bitmasks(labels)
        arr = np.asarray(labels)
        label_count = int(arr.max()) + 1 if arr.ndim == 1 else arr.shape[1]
    return IndexFile(cb, codes, masks, label_count or 0)


def write_index(fh: BinaryIO, index: IndexFile) -> None:
    fh.write(SPQI_MAGIC)
    fh.write(struct.pack("<HIIIQ", SPQI_VERSION, index.M, index.K, index.D, index.size))
    write_tensor(fh, index.codebooks.codewords.astype(INDEX_DTYPE))
    fh.write(index.codes.tobytes())
    if index.labels is not None:
        fh.write(struct.pack("<I", index.label_count))
        fh.write(index.labels.astype("<u8").tobytes())


def read_index(fh: BinaryIO) -> IndexFile:
    if fh.read(4) != SPQI_MAGIC:
        raise FormatError("bad SPQI magic")
    header = fh.read(struct.calcsize("<HIIIQ"))
    if len(header) != struct.calcsize("<HIIIQ"):
        raise FormatError("truncated SPQI header")
    version, M, K, D, n = struct.unpack("<HIIIQ", header)
    if version != SPQI_VERSION:
        raise FormatError(f"unsupported SPQI version {version}")
    cw = read_tensor(fh)
    if cw.dtype != np.float32 or cw.shape[0] != M or cw.shape[1] != K or cw.shape[0] * cw.shape[2] != D:
        raise DataCorruptionError(f"codebook blob {cw.shape} inconsistent with header M={M} K={K} D={D}")
    nb = bytes_per_code(M, K)
    raw = fh.read(n * nb)
    if len(raw) != n * nb:
        raise FormatError("truncated SPQI code block")
    codes = np.frombuffer(raw, dtype=np.uint8).reshape(n, nb).copy()
    labels = None
    label_count = 0
    rest = fh.read(4)
    if rest:
        if len(rest) != 4:
            raise FormatError("truncated SPQI label block")
        (label_count,) = struct.unpack("<I", rest)
        lab = fh.read(8 * n)
        if len(lab) != 8 * n or fh.read(1):
            raise FormatError("SPQI label block size mismatch")
        labels = np.frombuffer(lab, dtype="<u8").astype(np.uint64)
    index = IndexFile(CodebookSet(cw), codes, labels, label_count)
    bits = index.M * code_bits(K)
    if bits % 8:
        pad_mask = (1 << (8 - bits % 8)) - 1
        if np.any(codes[:, -1] & pad_mask):
            raise DataCorruptionError("non-zero padding bits in packed codes")
    return index


def make_lut(cb: CodebookSet, query: np.ndarray) -> np.ndarray:
    """``(M, K)`` float32 table of squared query-subvector-to-codeword distances."""
    q = np.asarray(query, dtype=INDEX_DTYPE)
    if q.shape != (cb.D,):
        raise DimensionError(f"query must have shape ({cb.D},), got {q.shape}")
    cw = cb.codewords.astype(INDEX_DTYPE, copy=False)
    diff = q.reshape(cb.M, 1, cb.subdim) - cw
    return np.einsum("mkd,mkd->mk", diff, diff)


def adc_distances(index: IndexFile, query: np.ndarray) -> np.ndarray:
    """ADC distance from ``query`` to every item, float32."""
    lut = make_lut(index.codebooks, query)
    idx = index.indices()
    out = np.zeros(index.size, dtype=INDEX_DTYPE)
    for m in range(index.M):
        out += lut[m, idx[:, m]]
    return out


def rank(distances: np.ndarray, top_k: int | None = None) -> np.ndarray:
    """Item ids sorted by distance; ties in ascending id order."""
    order = np.argsort(distances, kind="stable")
    return order if top_k is None else order[:top_k]


def adc_search(index: IndexFile, query: np.ndarray, top_k: int) -> list[tuple[int, float]]:
    """Top-``top_k`` ``(item_id, distance)`` pairs, nearest first."""
    if index.size == 0:
        raise UsageError("search on an empty index")
    if not 0 < top_k <= index.size:
        raise UsageError(f"top_k must be in [1, {index.size}], got {top_k}")
    d = adc_distances(index, query)
    ids = rank(d, top_k)
    return [(int(i), float(d[i])) for i in ids]


def search_many(
    index: IndexFile, queries: np.ndarray, top_k: int, threads: int = 1
) -> list[list[tuple[int, float]]]:
    """:func:`adc_search` over a batch of queries, optionally on a thread pool.

    Results come back in query order regardless of ``threads``.
    """
    index.indices()  # populate cache before fan-out
    qs = np.asarray(queries)
    if threads <= 1 or len(qs) < 2:
        return [adc_search(index, q, top_k) for q in qs]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda q: adc_search(index, q, top_k), qs))
