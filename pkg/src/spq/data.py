"""Dataset containers, CIFAR-10 binary ingestion and synthetic cluster data."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, ParameterError
from .numerics import TRAIN_DTYPE, Rng, load_tensor, save_tensor

CIFAR_RECORD = 3073
CIFAR_SIDE = 32

KINDS = ("cifar10-binary", "raw-tensor-images", "descriptor-views", "synthetic")


@dataclass
class Dataset:
    """Training/evaluation data.

    ``images`` is ``(N, H, W, 3)`` in [0, 1] and is augmented on the fly in
    joint mode. ``views`` holds precomputed descriptor view pairs ``(N, 2, D)``
    for passthrough mode, with ``items`` the matching clean descriptors.
    """

    kind: str = "synthetic"
    images: np.ndarray | None = None
    items: np.ndarray | None = None
    views: np.ndarray | None = None
    labels: np.ndarray | None = None

    def __post_init__(self):
        if self.views is not None and self.items is not None and len(self.views) != len(self.items):
            raise FormatError("descriptor views and items have different counts")

    def __len__(self) -> int:
        for arr in (self.images, self.views, self.items):
            if arr is not None:
                return len(arr)
        return 0

    def subset(self, ids) -> "Dataset":
        ids = np.asarray(ids)
        pick = lambda a: None if a is None else a[ids]  # noqa: E731
        return Dataset(self.kind, pick(self.images), pick(self.items), pick(self.views), pick(self.labels))

    def inputs(self) -> np.ndarray:
        """What the encoder consumes when indexing: images or clean descriptors."""
        if self.images is not None:
            return self.images
        if self.items is not None:
            return self.items
        raise FormatError("dataset has neither images nor descriptors")


def parse_cifar10_bytes(raw: bytes) -> tuple[np.ndarray, np.ndarray]:
    if len(raw) % CIFAR_RECORD:
        raise FormatError(f"CIFAR-10 binary size {len(raw)} is not a multiple of {CIFAR_RECORD}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        raise FormatError("CIFAR-10 label byte outside 0..9")
    # channel-major R, G, B planes of 32x32 -> HWC
    pix = rec[:, 1:].reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE).transpose(0, 2, 3, 1)
    return pix.astype(TRAIN_DTYPE) / 255.0, labels


def ingest_cifar10_binary(path) -> Dataset:
    """Load one CIFAR-10 ``.bin`` file, or every ``*.bin`` in a directory (sorted)."""
    p = Path(path)
    files = sorted(p.glob("*.bin")) if p.is_dir() else [p]
    if not files:
        raise FormatError(f"no .bin files under {p}")
    images, labels = zip(*(parse_cifar10_bytes(f.read_bytes()) for f in files))
    return Dataset("cifar10-binary", images=np.concatenate(images), labels=np.concatenate(labels))


def gen_synthetic(
    clusters: int, dim: int, per_cluster: int, noise: float, seed: int
) -> Dataset:
    """Gaussian blobs around well-separated centers, with two noisy views per item.

    Centers are uniform in [-1, 1]^dim, redrawn until every pair is at least
    ``4 * noise`` apart.
    """
    if clusters < 2:
        raise ParameterError("need at least 2 clusters")
    if not noise > 0:
        raise ParameterError("noise sigma must be > 0")
    rng = Rng(seed, 0x5359)
    crng = rng.child(0)
    centers = np.empty((clusters, dim))
    attempts = 0
    for c in range(clusters):
        while True:
            attempts += 1
            if attempts > 10_000:
                raise ParameterError(f"could not place {clusters} centers {4 * noise:g} apart; sigma too large")
            cand = crng.uniform(-1.0, 1.0, size=dim)
            if c == 0 or np.min(np.sum((centers[:c] - cand) ** 2, axis=1)) >= (4 * noise) ** 2:
                centers[c] = cand
                break
    labels = np.repeat(np.arange(clusters), per_cluster)
    items = centers[labels] + rng.child(1).normal(0.0, noise, size=(len(labels), dim))
    views = items[:, None, :] + rng.child(2).normal(0.0, noise, size=(len(labels), 2, dim))
    return Dataset("synthetic", items=items, views=views, labels=labels)


def split(data: Dataset, sizes: list[int], seed: int) -> list[Dataset]:
    """Random disjoint subsets of the requested sizes."""
    if sum(sizes) > len(data):
        raise ParameterError(f"requested {sum(sizes)} items from a dataset of {len(data)}")
    order = Rng(seed, 0x5350).permutation(len(data))
    out, start = [], 0
    for s in sizes:
        out.append(data.subset(order[start : start + s]))
        start += s
    return out


# SPQT dataset directories: items.spqt / views.spqt / images.spqt / labels.spqt

def save_dataset(directory, data: Dataset) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for name in ("images", "items", "views"):
        arr = getattr(data, name)
        if arr is not None:
            save_tensor(d / f"{name}.spqt", np.asarray(arr, dtype=TRAIN_DTYPE))
    if data.labels is not None:
        save_tensor(d / "labels.spqt", np.asarray(data.labels, dtype=TRAIN_DTYPE))


def load_dataset(path, kind: str | None = None) -> Dataset:
    """Load a dataset from a CIFAR-10 file/dir, an SPQT directory or a single SPQT file."""
    p = Path(path)
    if kind == "cifar10-binary" or (kind is None and (p.suffix == ".bin" or (p.is_dir() and any(p.glob("*.bin"))))):
        return ingest_cifar10_binary(p)
    if p.is_dir():
        arrays = {f.stem: load_tensor(f) for f in sorted(p.glob("*.spqt"))}
        labels = arrays.get("labels")
        if labels is not None:
            labels = _labels_from_tensor(labels)
        images = arrays.get("images")
        if kind is None:
            kind = "raw-tensor-images" if images is not None else "descriptor-views"
        return Dataset(kind, images=images, items=arrays.get("items"), views=arrays.get("views"), labels=labels)
    if not os.path.exists(p):
        raise FormatError(f"{p}: no such file or directory")
    arr = load_tensor(p)
    if arr.ndim == 4:
        return Dataset("raw-tensor-images", images=arr)
    if arr.ndim == 3:
        return Dataset("descriptor-views", views=arr, items=arr[:, 0, :])
    if arr.ndim == 2:
        return Dataset(kind or "descriptor-views", items=arr)
    raise FormatError(f"{p}: cannot interpret SPQT tensor of shape {arr.shape} as a dataset")


def _labels_from_tensor(arr: np.ndarray) -> np.ndarray:
    if np.any(arr != np.round(arr)):
        raise FormatError("labels must be integral")
    return arr.astype(np.int64)


def load_labels(path) -> np.ndarray:
    return _labels_from_tensor(load_tensor(path))
