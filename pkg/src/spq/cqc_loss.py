"""Cross quantized contrastive loss.

Views are stored in pairs: rows ``2n`` and ``2n + 1`` of a ``(2 * N_B, D)``
stack are the two views of batch item ``n`` (0-based, so row ``2n`` is the
first view and row ``2n + 1`` the second).

Each deep descriptor is compared against the quantized descriptors of the
*opposite* view parity only. Two ``N_B x N_B`` matrices hold everything the
loss needs::

    s_first[i, j]  = cos(anchor[2i],     target[2j + 1])
    s_second[i, j] = cos(anchor[2i + 1], target[2j])

so the positive of anchor row ``i`` sits on the diagonal of either matrix.
By default the positive is left out of the softmax denominator, which
then runs over the ``N_B - 1`` other same-parity targets; set
``include_positive_in_denominator`` for the usual InfoNCE form.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, DimensionError, ParameterError
from .numerics import TRAIN_DTYPE, logsumexp


@dataclass(frozen=True)
class CqcConfig:
    tau_cqc: float = 0.5
    include_positive_in_denominator: bool = False

    def __post_init__(self):
        if not self.tau_cqc > 0:
            raise ParameterError(f"tau_cqc must be > 0, got {self.tau_cqc}")


@dataclass(frozen=True)
class CrossSimMatrix:
    s_first: np.ndarray  # first-view anchors vs second-view targets
    s_second: np.ndarray  # second-view anchors vs first-view targets

    @property
    def n_batch(self) -> int:
        return self.s_first.shape[0]

    def __getitem__(self, ij: tuple[int, int]) -> float:
        """Similarity S(i, j) between anchor view ``i`` and target view ``j``."""
        i, j = ij
        if i % 2 == j % 2:
            raise IndexError("only opposite-parity similarities are defined")
        mat = self.s_first if i % 2 == 0 else self.s_second
        return float(mat[i // 2, j // 2])


def _unit_rows(x: np.ndarray, what: str) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms == 0.0):
        raise DegenerateInputError(f"zero-norm row in {what}")
    return x / norms[:, None], norms


def _check_stacks(anchors: np.ndarray, targets: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(anchors, dtype=TRAIN_DTYPE)
    t = np.asarray(targets, dtype=TRAIN_DTYPE)
    if a.ndim != 2 or a.shape != t.shape or a.shape[0] % 2:
        raise DimensionError(
            f"anchors/targets must be equal (2*N_B, D) stacks, got {a.shape} and {t.shape}"
        )
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(t))):
        raise DegenerateInputError("non-finite descriptors in loss input")
    return a, t


def cross_similarities(anchors: np.ndarray, targets: np.ndarray) -> CrossSimMatrix:
    """Build the two cross-view cosine-similarity matrices.

    ``anchors`` are the deep descriptors and ``targets`` the quantized ones
    (the contrastive-only ablation passes quantized descriptors for both).
    """
    a, t = _check_stacks(anchors, targets)
    au, _ = _unit_rows(a, "anchors")
    tu, _ = _unit_rows(t, "targets")
    s_first = np.clip(au[0::2] @ tu[1::2].T, -1.0, 1.0)
    s_second = np.clip(au[1::2] @ tu[0::2].T, -1.0, 1.0)
    return CrossSimMatrix(s_first, s_second)


def _row_losses(sim: np.ndarray, cfg: CqcConfig) -> np.ndarray:
    """Per-anchor loss for one similarity matrix (positive on the diagonal)."""
    logits = sim / cfg.tau_cqc
    pos = np.diagonal(logits)
    if cfg.include_positive_in_denominator:
        denom = logsumexp(logits, axis=1)
    else:
        n = logits.shape[0]
        masked = np.where(np.eye(n, dtype=bool), -np.inf, logits)
        denom = logsumexp(masked, axis=1)
    return denom - pos


def pair_loss(sims: CrossSimMatrix, i: int, j: int, cfg: CqcConfig, n_batch: int | None = None) -> float:
    """Loss of the correlated view pair ``(i, j)`` (0-based view indices)."""
    nb = sims.n_batch if n_batch is None else n_batch
    if nb != sims.n_batch:
        raise DimensionError(f"N_B={nb} does not match similarity matrices of size {sims.n_batch}")
    if i % 2 == j % 2:
        raise ValueError(f"views {i} and {j} have equal parity; correlated pairs are opposite-parity")
    if i // 2 != j // 2:
        raise ValueError(f"views {i} and {j} are not views of the same item")
    if not 0 <= i < 2 * nb:
        raise IndexError(f"view index {i} out of range")
    mat = sims.s_first if i % 2 == 0 else sims.s_second
    if nb < 2 and not cfg.include_positive_in_denominator:
        raise ValueError("the positive-excluded loss needs N_B >= 2")
    row = i // 2
    logits = mat[row] / cfg.tau_cqc
    if not cfg.include_positive_in_denominator:
        logits = np.delete(logits, row)
    return float(logsumexp(logits) - mat[row, row] / cfg.tau_cqc)


def batch_loss(sims: CrossSimMatrix, cfg: CqcConfig) -> float:
    """Mean of the ``2 * N_B`` directed pair losses."""
    nb = sims.n_batch
    if sims.s_second.shape != (nb, nb) or sims.s_first.shape != (nb, nb):
        raise DimensionError("similarity matrices must be square and of equal size")
    if nb < 2 and not cfg.include_positive_in_denominator:
        raise ValueError("the positive-excluded loss needs N_B >= 2")
    total = _row_losses(sims.s_first, cfg).sum() + _row_losses(sims.s_second, cfg).sum()
    return float(total / (2 * nb))


def grad_wrt_similarities(sims: CrossSimMatrix, cfg: CqcConfig) -> tuple[np.ndarray, np.ndarray]:
    """``dL/dS`` for both matrices.

    Every row sums to zero. With the positive excluded, the diagonal entry
    is exactly ``-1 / (2 N_B tau)`` regardless of the similarities.
    """
    nb = sims.n_batch
    scale = 1.0 / (2 * nb * cfg.tau_cqc)
    out = []
    for sim in (sims.s_first, sims.s_second):
        logits = sim / cfg.tau_cqc
        eye = np.eye(nb, dtype=bool)
        if not cfg.include_positive_in_denominator:
            logits = np.where(eye, -np.inf, logits)
        logits = logits - logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        out.append(scale * (p - eye))
    return out[0], out[1]


def loss_and_grads(
    anchors: np.ndarray, targets: np.ndarray, cfg: CqcConfig
) -> tuple[float, np.ndarray, np.ndarray]:
    """Batch loss with its gradients w.r.t. ``anchors`` and ``targets``."""
    a, t = _check_stacks(anchors, targets)
    au, an = _unit_rows(a, "anchors")
    tu, tn = _unit_rows(t, "targets")
    sims = CrossSimMatrix(au[0::2] @ tu[1::2].T, au[1::2] @ tu[0::2].T)
    loss = batch_loss(sims, cfg)
    g_first, g_second = grad_wrt_similarities(sims, cfg)

    # gradients w.r.t. the unit vectors
    gau = np.empty_like(a)
    gtu = np.empty_like(t)
    gau[0::2] = g_first @ tu[1::2]
    gau[1::2] = g_second @ tu[0::2]
    gtu[1::2] = g_first.T @ au[0::2]
    gtu[0::2] = g_second.T @ au[1::2]

    # through normalization: d(u)/dx = (I - u u^T) / ||x||
    grad_a = (gau - np.sum(gau * au, axis=1, keepdims=True) * au) / an[:, None]
    grad_t = (gtu - np.sum(gtu * tu, axis=1, keepdims=True) * tu) / tn[:, None]
    return loss, grad_a, grad_t


def loss_backward(anchors: np.ndarray, targets: np.ndarray, cfg: CqcConfig) -> tuple[np.ndarray, np.ndarray]:
    _, grad_a, grad_t = loss_and_grads(anchors, targets, cfg)
    return grad_a, grad_t
