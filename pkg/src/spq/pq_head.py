"""Product-quantization head: M codebooks of K codewords each.

Soft quantization replaces every subvector by a softmax-weighted convex
combination of its codebook (differentiable, used while training); hard
assignment picks the nearest codeword (used for encoding).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConfigurationError,
    DataCorruptionError,
    DegenerateInputError,
    DimensionError,
    ParameterError,
    UsageError,
)
from .numerics import TRAIN_DTYPE, Rng


def is_power_of_two(k: int) -> bool:
    return k >= 1 and (k & (k - 1)) == 0


@dataclass
class CodebookSet:
    """Codewords of shape ``(M, K, subdim)``."""

    codewords: np.ndarray

    def __post_init__(self):
        cw = np.asarray(self.codewords)
        if cw.ndim != 3:
            raise ConfigurationError(f"codewords must be (M, K, subdim), got {cw.shape}")
        if not is_power_of_two(cw.shape[1]):
            raise ConfigurationError(f"K must be a power of two, got {cw.shape[1]}")
        if not np.all(np.isfinite(cw)):
            raise DegenerateInputError("codewords contain non-finite values")
        self.codewords = cw

    @property
    def M(self) -> int:
        return self.codewords.shape[0]

    @property
    def K(self) -> int:
        return self.codewords.shape[1]

    @property
    def subdim(self) -> int:
        return self.codewords.shape[2]

    @property
    def D(self) -> int:
        return self.M * self.subdim

    @property
    def bits(self) -> int:
        """Code length B = M * log2(K)."""
        return self.M * (self.K.bit_length() - 1)

    @classmethod
    def random(cls, M: int, K: int, subdim: int, rng: Rng) -> "CodebookSet":
        """I.i.d. N(0, 1/subdim) codewords."""
        cw = rng.normal(0.0, 1.0 / np.sqrt(subdim), size=(M, K, subdim))
        return cls(cw.astype(TRAIN_DTYPE))

    def astype(self, dtype) -> "CodebookSet":
        return CodebookSet(self.codewords.astype(dtype))


def _split(cb: CodebookSet, descriptors: np.ndarray) -> np.ndarray:
    x = np.asarray(descriptors)
    if x.ndim != 2 or x.shape[1] != cb.D:
        raise DimensionError(f"descriptors must be (B, {cb.D}), got {x.shape}")
    return x.reshape(x.shape[0], cb.M, cb.subdim)


def subspace_sqdist(cb: CodebookSet, descriptors: np.ndarray) -> np.ndarray:
    """Squared distances ``(B, M, K)`` between subvectors and codewords.

    Computed from explicit differences (no dot-product expansion) so the
    values are exact enough for gradient checks.
    """
    sub = _split(cb, descriptors)
    diff = sub[:, :, None, :] - cb.codewords[None, :, :, :]
    return np.einsum("bmkd,bmkd->bmk", diff, diff)


@dataclass
class SoftAssignTape:
    weights: np.ndarray  # (B, M, K), rows sum to 1
    diff: np.ndarray  # (B, M, K, subdim): x_m - c_mk
    tau_q: float
    used: bool = field(default=False, repr=False)


def soft_quantize(
    cb: CodebookSet, descriptors: np.ndarray, tau_q: float
) -> tuple[np.ndarray, SoftAssignTape]:
    """Softmax(-||x_m - c_mk||^2 / tau_q)-weighted sum of codewords per subspace.

    Sub-results are concatenated as-is (no per-block normalization).

    Returns:
        ``(quantized, tape)`` where ``quantized`` has the shape of ``descriptors``.
    """
    if not tau_q > 0:
        raise ParameterError(f"tau_q must be > 0, got {tau_q}")
    x = np.asarray(descriptors, dtype=TRAIN_DTYPE)
    if np.isnan(x).any():
        raise DegenerateInputError("NaN in descriptors")
    sub = _split(cb, x)
    diff = sub[:, :, None, :] - cb.codewords[None, :, :, :]
    logits = -np.einsum("bmkd,bmkd->bmk", diff, diff) / tau_q
    logits -= logits.max(axis=2, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=2, keepdims=True)
    z = np.einsum("bmk,mkd->bmd", w, cb.codewords)
    return z.reshape(x.shape), SoftAssignTape(w, diff, float(tau_q))


def soft_quantize_backward(
    tape: SoftAssignTape, cb: CodebookSet, grad_quantized: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of a scalar loss w.r.t. codewords and input descriptors.

    With ``w = softmax(a)``, ``a_k = -||x - c_k||^2 / tau`` and
    ``z = sum_k w_k c_k``, the logit gradient is ``r_k = w_k (g.c_k - g.z)``.
    """
    if tape.used:
        raise UsageError("soft-assign tape already consumed by a backward pass")
    tape.used = True
    w = tape.weights
    B = w.shape[0]
    g = np.asarray(grad_quantized, dtype=TRAIN_DTYPE).reshape(B, cb.M, cb.subdim)
    gc = np.einsum("bmd,mkd->bmk", g, cb.codewords)
    gz = np.einsum("bmk,bmk->bm", w, gc)
    r = w * (gc - gz[:, :, None])
    scale = 2.0 / tape.tau_q
    # d a_k / d x = -scale * diff_k ; d a_k / d c_k = +scale * diff_k
    grad_x = -scale * np.einsum("bmk,bmkd->bmd", r, tape.diff)
    grad_c = np.einsum("bmk,bmd->mkd", w, g) + scale * np.einsum("bmk,bmkd->mkd", r, tape.diff)
    return grad_c, grad_x.reshape(B, cb.D)


def hard_assign(cb: CodebookSet, descriptors: np.ndarray) -> np.ndarray:
    """Index of the nearest codeword per subspace, ``(B, M)``; ties go to the lowest index."""
    return np.argmin(subspace_sqdist(cb, descriptors), axis=2).astype(np.int64)


def reconstruct(cb: CodebookSet, indices: np.ndarray) -> np.ndarray:
    idx = np.asarray(indices)
    if idx.ndim != 2 or idx.shape[1] != cb.M:
        raise DimensionError(f"indices must be (B, {cb.M}), got {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= cb.K):
        raise DataCorruptionError(f"code index outside [0, {cb.K})")
    out = cb.codewords[np.arange(cb.M)[None, :], idx]  # (B, M, subdim)
    return out.reshape(idx.shape[0], cb.D)


def hard_quantize(cb: CodebookSet, descriptors: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-codeword reconstruction and the indices it came from."""
    idx = hard_assign(cb, descriptors)
    return reconstruct(cb, idx), idx


def hard_quantize_backward(
    cb: CodebookSet, indices: np.ndarray, grad_quantized: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Straight-through backward for hard quantization.

    The incoming gradient is copied to the subvectors unchanged and
    accumulated onto each assigned codeword.
    """
    B = indices.shape[0]
    g = np.asarray(grad_quantized, dtype=TRAIN_DTYPE).reshape(B, cb.M, cb.subdim)
    grad_c = np.zeros_like(cb.codewords, dtype=TRAIN_DTYPE)
    for m in range(cb.M):
        np.add.at(grad_c[m], indices[:, m], g[:, m, :])
    return grad_c, g.reshape(B, cb.D).copy()
