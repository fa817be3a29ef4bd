"""Retrieval metrics and the classical k-means product-quantization baseline."""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DimensionError, UsageError
from .index import IndexFile, adc_distances, labels_to_bitmasks, rank
from .numerics import TRAIN_DTYPE, Rng
from .pq_head import CodebookSet

AP_NORMALIZERS = ("min_relevant_r", "relevant_retrieved", "total_relevant")


def average_precision(flags, R: int, total_relevant: int, normalizer: str = "min_relevant_r") -> float:
    """AP over the top ``R`` of a ranked list of relevance flags.

    ``normalizer`` picks the denominator: ``min(total_relevant, R)`` (default),
    the number of relevant items retrieved in the top ``R``, or
    ``total_relevant``. Returns 0 when there is nothing relevant.
    """
    rel = np.asarray(flags, dtype=bool)[:R]
    if total_relevant <= 0 or not rel.any():
        return 0.0
    hits = np.cumsum(rel)
    ranks = np.arange(1, rel.size + 1)
    num = float(np.sum((hits / ranks)[rel]))
    if normalizer == "min_relevant_r":
        denom = min(total_relevant, R)
    elif normalizer == "relevant_retrieved":
        denom = int(hits[-1])
    elif normalizer == "total_relevant":
        denom = total_relevant
    else:
        raise ConfigurationError(f"unknown AP normalizer {normalizer!r}")
    return num / denom


@dataclass
class RelevanceOracle:
    """Label bitmasks for queries and gallery; relevant iff the masks intersect."""

    query_labels: np.ndarray
    gallery_labels: np.ndarray

    def __post_init__(self):
        self.query_labels = np.asarray(self.query_labels, dtype=np.uint64)
        self.gallery_labels = np.asarray(self.gallery_labels, dtype=np.uint64)
        if np.any(self.query_labels == 0) or np.any(self.gallery_labels == 0):
            raise ConfigurationError("every item needs at least one label")

    @classmethod
    def from_labels(cls, query_labels, gallery_labels) -> "RelevanceOracle":
        return cls(labels_to_bitmasks(query_labels), labels_to_bitmasks(gallery_labels))

    def relevant(self, q: int) -> np.ndarray:
        return (self.gallery_labels & self.query_labels[q]) != 0


def _mean(values) -> float:
    """Mean as ``v0 + sum(v - v0) / n``: exact when all values are equal."""
    v = [float(x) for x in values]
    return v[0] + math.fsum(x - v[0] for x in v) / len(v)


def pr_cutoffs(n: int) -> list[int]:
    """Log-spaced rank cutoffs 1, 2, 5, 10, 20, 50, ... ending at ``n``."""
    out = []
    base = 1
    while base <= n:
        for m in (1, 2, 5):
            if m * base <= n:
                out.append(m * base)
        base *= 10
    if not out or out[-1] != n:
        out.append(n)
    return out


@dataclass
class MetricReport:
    map_at_r: float
    R: int
    precision_at_k: list[tuple[int, float]]
    pr_curve: list[tuple[int, float, float]]  # (cutoff, recall, precision)
    n_queries: int
    n_gallery: int
    config: dict = field(default_factory=dict)
    per_query_ap: list[float] = field(default_factory=list, repr=False)

    def to_text(self) -> str:
        lines = [
            f"queries: {self.n_queries}  gallery: {self.n_gallery}",
            f"mAP@{self.R}: {self.map_at_r:.6f}",
        ]
        lines += [f"P@{k}: {p:.6f}" for k, p in self.precision_at_k]
        lines.append("PR curve (cutoff recall precision):")
        lines += [f"  {c:>8d} {r:.6f} {p:.6f}" for c, r, p in self.pr_curve]
        if self.config:
            lines.append("config: " + " ".join(f"{k}={v}" for k, v in sorted(self.config.items())))
        return "\n".join(lines) + "\n"

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "k_or_r", "value"])
            w.writerow(["map", self.R, repr(self.map_at_r)])
            for k, p in self.precision_at_k:
                w.writerow(["precision", k, repr(p)])

    def write_pr_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["cutoff", "recall", "precision"])
            for c, r, p in self.pr_curve:
                w.writerow([c, repr(r), repr(p)])


def evaluate(
    index: IndexFile,
    queries: np.ndarray,
    oracle: RelevanceOracle,
    R: int,
    k_list=(1000,),
    normalizer: str = "min_relevant_r",
    threads: int = 1,
) -> MetricReport:
    """mAP@R, P@k and a PR curve from exact ADC rankings of the whole gallery.

    Per-query work may run on ``threads`` workers; results are reduced in
    query order, so the report does not depend on the thread count.
    """
    qs = np.asarray(queries)
    if qs.ndim != 2 or len(qs) == 0:
        raise UsageError("evaluate needs a non-empty (Q, D) query set")
    if qs.shape[1] != index.D:
        raise DimensionError(f"queries have dim {qs.shape[1]}, index expects {index.D}")
    if len(oracle.query_labels) != len(qs) or len(oracle.gallery_labels) != index.size:
        raise DimensionError("label counts do not match queries/gallery")
    n = index.size
    cutoffs = pr_cutoffs(n)
    ks = [min(int(k), n) for k in k_list]
    aps = []
    prec_k = np.zeros(len(ks))
    recall_c = np.zeros(len(cutoffs))
    prec_c = np.zeros(len(cutoffs))
    index.indices()

    def ranked_flags(qi: int) -> np.ndarray:
        return oracle.relevant(qi)[rank(adc_distances(index, qs[qi]))]

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            flags = list(pool.map(ranked_flags, range(len(qs))))
    else:
        flags = [ranked_flags(qi) for qi in range(len(qs))]
    for rel in flags:
        total = int(rel.sum())
        aps.append(average_precision(rel, R, total, normalizer))
        hits = np.cumsum(rel)
        prec_k += [hits[k - 1] / k for k in ks]
        hc = hits[np.asarray(cutoffs) - 1]
        prec_c += hc / np.asarray(cutoffs)
        if total:
            recall_c += hc / total
    nq = len(qs)
    return MetricReport(
        map_at_r=_mean(aps),
        R=R,
        precision_at_k=[(int(k), float(p / nq)) for k, p in zip(k_list, prec_k)],
        pr_curve=[(c, float(r / nq), float(p / nq)) for c, r, p in zip(cutoffs, recall_c, prec_c)],
        n_queries=nq,
        n_gallery=n,
        config={"R": R, "M": index.M, "K": index.K, "ap_normalizer": normalizer},
        per_query_ap=[float(a) for a in aps],
    )


# --- classical PQ baseline ----------------------------------------------------


def _sqdist(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - c[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def kmeans_pp_init(x: np.ndarray, K: int, rng: Rng) -> np.ndarray:
    n = len(x)
    centers = [x[int(rng.integers(0, n))]]
    d2 = _sqdist(x, centers[0][None])[:, 0]
    for _ in range(1, K):
        total = d2.sum()
        if total <= 0:
            i = int(rng.integers(0, n))
        else:
            i = int(np.searchsorted(np.cumsum(d2), rng.uniform(0.0, total), side="right"))
            i = min(i, n - 1)
        centers.append(x[i])
        d2 = np.minimum(d2, _sqdist(x, x[i][None])[:, 0])
    return np.array(centers, dtype=TRAIN_DTYPE)


def kmeans(x: np.ndarray, K: int, iters: int, rng: Rng) -> tuple[np.ndarray, list[float]]:
    """Lloyd's algorithm from a k-means++ start.

    An empty cluster is re-seeded with the point farthest from its current
    centroid. Returns the centroids and the objective after each iteration.
    """
    x = np.asarray(x, dtype=TRAIN_DTYPE)
    c = kmeans_pp_init(x, K, rng)
    trace = []
    for _ in range(iters):
        assign = np.argmin(_sqdist(x, c), axis=1)
        new = c.copy()
        taken = np.zeros(len(x), dtype=bool)
        for k in range(K):
            members = assign == k
            if members.any():
                new[k] = x[members].mean(axis=0)
        point_d = np.sum((x - new[assign]) ** 2, axis=1)
        for k in range(K):
            if not np.any(assign == k):
                far = int(np.argmax(np.where(taken, -1.0, point_d)))
                taken[far] = True
                new[k] = x[far]
                point_d[far] = 0.0
        c = new
        trace.append(float(np.min(_sqdist(x, c), axis=1).sum()))
    return c, trace


def kmeans_pq_baseline(
    gallery: np.ndarray, M: int, K: int, iters: int, seed: int, return_trace: bool = False
):
    """Per-subspace k-means codebooks (classical PQ)."""
    g = np.asarray(gallery, dtype=TRAIN_DTYPE)
    if g.ndim != 2 or g.shape[1] % M:
        raise ConfigurationError(f"gallery dim must be divisible by M={M}")
    if len(g) < K:
        raise ConfigurationError(f"need at least K={K} points, got {len(g)}")
    sub = g.shape[1] // M
    rng = Rng(seed, 0x4B4D)
    books = []
    traces = []
    for m in range(M):
        c, t = kmeans(g[:, m * sub : (m + 1) * sub], K, iters, rng.child(m))
        books.append(c)
        traces.append(t)
    cb = CodebookSet(np.stack(books))
    return (cb, traces) if return_trace else cb
