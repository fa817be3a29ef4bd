import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import central_diff, max_rel_error
from spq.errors import ConfigurationError, DataCorruptionError, DegenerateInputError, ParameterError, UsageError
from spq.numerics import Rng
from spq.pq_head import (
    CodebookSet,
    hard_assign,
    hard_quantize_backward,
    reconstruct,
    soft_quantize,
    soft_quantize_backward,
)


def random_cb(M, K, sub, seed):
    return CodebookSet.random(M, K, sub, Rng(seed))


def test_codebook_invariants():
    with pytest.raises(ConfigurationError):
        CodebookSet(np.zeros((2, 3, 4)))  # K not a power of two
    with pytest.raises(ConfigurationError):
        CodebookSet(np.zeros((2, 4)))
    with pytest.raises(DegenerateInputError):
        CodebookSet(np.full((1, 2, 2), np.inf))
    cb = random_cb(4, 16, 16, 0)
    assert (cb.M, cb.K, cb.subdim, cb.D, cb.bits) == (4, 16, 16, 64, 16)


def test_codeword_init_scale():
    cb = random_cb(8, 256, 16, 1)
    assert np.var(cb.codewords) == pytest.approx(1 / 16, rel=0.05)


def test_soft_quantize_constant_codebook():
    c = np.array([0.5, -1.0, 2.0])
    cb = CodebookSet(np.tile(c, (2, 4, 1)))
    x = Rng(3).normal(size=(5, 6))
    for tau in (1e-3, 0.2, 50.0):
        z, _ = soft_quantize(cb, x, tau)
        np.testing.assert_allclose(z, np.tile(c, (5, 2)), atol=1e-15)


def test_soft_quantize_hard_limit_at_codeword():
    cb = random_cb(2, 8, 3, 4)
    x = np.concatenate([cb.codewords[0, 5], cb.codewords[1, 2]])[None]
    z, _ = soft_quantize(cb, x, 1e-6)
    np.testing.assert_allclose(z[0], x[0], atol=1e-6)


def test_soft_quantize_hand_example():
    cb = CodebookSet(np.array([[[0.0], [1.0]]]))
    z, tape = soft_quantize(cb, np.array([[0.25]]), 0.2)
    # logits -0.0625/0.2 = -0.3125 and -0.5625/0.2 = -2.8125
    w0 = 1.0 / (1.0 + np.exp(-2.5))
    np.testing.assert_allclose(tape.weights[0, 0], [w0, 1 - w0], atol=1e-15)
    np.testing.assert_allclose(tape.weights[0, 0], [0.9241, 0.0759], atol=5e-5)
    assert z[0, 0] == pytest.approx(0.0759, abs=5e-5)


def test_soft_quantize_errors():
    cb = random_cb(2, 4, 2, 0)
    with pytest.raises(ParameterError):
        soft_quantize(cb, np.zeros((1, 4)), 0.0)
    with pytest.raises(DegenerateInputError):
        soft_quantize(cb, np.array([[np.nan, 0, 0, 0]]), 0.2)


@settings(deadline=None, max_examples=30)
@given(st.integers(0, 10_000), st.floats(0.05, 5.0))
def test_soft_quantize_is_convex_combination(seed, tau):
    cb = random_cb(3, 8, 4, seed)
    x = Rng(seed, 1).normal(size=(6, 12))
    z, tape = soft_quantize(cb, x, tau)
    assert np.all(tape.weights >= 0)
    np.testing.assert_allclose(tape.weights.sum(axis=2), 1.0, atol=1e-12)
    np.testing.assert_allclose(
        z.reshape(6, 3, 4), np.einsum("bmk,mkd->bmd", tape.weights, cb.codewords), atol=1e-12
    )


def test_backward_zero_grad_and_single_codeword():
    cb = random_cb(2, 4, 3, 5)
    x = Rng(6).normal(size=(4, 6))
    _, tape = soft_quantize(cb, x, 0.2)
    gc, gx = soft_quantize_backward(tape, cb, np.zeros((4, 6)))
    assert not gc.any() and not gx.any()

    cb1 = CodebookSet(Rng(7).normal(size=(2, 1, 3)))
    g = Rng(8).normal(size=(4, 6))
    _, tape = soft_quantize(cb1, x, 0.2)
    gc, gx = soft_quantize_backward(tape, cb1, g)
    np.testing.assert_allclose(gc[:, 0, :], g.reshape(4, 2, 3).sum(axis=0), atol=1e-14)
    np.testing.assert_allclose(gx, 0.0, atol=1e-14)


def test_backward_tape_single_use():
    cb = random_cb(1, 2, 2, 0)
    _, tape = soft_quantize(cb, np.ones((1, 2)), 0.2)
    soft_quantize_backward(tape, cb, np.ones((1, 2)))
    with pytest.raises(UsageError):
        soft_quantize_backward(tape, cb, np.ones((1, 2)))


def soft_quantize_grad_error(seed):
    """Analytic vs central-difference gradient of a random linear functional of z."""
    rng = Rng(seed, 99)
    M = int(rng.integers(1, 4))
    K = int(2 ** rng.integers(0, 4))
    sub = int(rng.integers(1, 5))
    B = int(rng.integers(1, 5))
    tau = float(rng.uniform(0.1, 2.0))
    cb = CodebookSet(rng.normal(size=(M, K, sub)) * 0.7)
    x = rng.normal(size=(B, M * sub)) * 0.7
    g = rng.normal(size=(B, M * sub))

    def f():
        z, _ = soft_quantize(cb, x, tau)
        return float(np.sum(g * z))

    _, tape = soft_quantize(cb, x, tau)
    gc, gx = soft_quantize_backward(tape, cb, g)
    nc, nx = central_diff(f, [cb.codewords, x])
    return max_rel_error([gc, gx], [nc, nx])


@pytest.mark.parametrize("seed", range(20))
def test_soft_quantize_gradient_matches_finite_differences(seed):
    assert soft_quantize_grad_error(seed) <= 1e-6


def test_hard_assign_examples():
    cb = random_cb(2, 8, 3, 11)
    x = np.concatenate([cb.codewords[0, 5], cb.codewords[1, 0]])[None]
    np.testing.assert_array_equal(hard_assign(cb, x), [[5, 0]])

    cw = np.zeros((1, 8, 1))
    cw[0, :, 0] = [9, 9, -1, 9, 9, 9, 9, 1]
    np.testing.assert_array_equal(hard_assign(CodebookSet(cw), np.array([[0.0]])), [[2]])


def test_hard_assign_matches_exhaustive_scan():
    cb = random_cb(4, 16, 5, 12)
    x = Rng(13).normal(size=(50, 20))
    got = hard_assign(cb, x)
    for n in range(50):
        for m in range(4):
            sub = x[n, m * 5 : (m + 1) * 5]
            best, best_d = 0, np.inf
            for k in range(16):
                d = sum((sub[i] - cb.codewords[m, k, i]) ** 2 for i in range(5))
                if d < best_d:
                    best, best_d = k, d
            assert got[n, m] == best


def test_flat_vq_matches_exhaustive_vq():
    cb = random_cb(1, 32, 8, 14)
    x = Rng(15).normal(size=(40, 8))
    expected = [int(np.argmin([np.sum((row - c) ** 2) for c in cb.codewords[0]])) for row in x]
    np.testing.assert_array_equal(hard_assign(cb, x)[:, 0], expected)


def test_reconstruct_examples():
    cw = np.array([
        [[0.0, 0.0], [1.0, 2.0], [3.0, 4.0], [5.0, 6.0]],
        [[-1.0, -2.0], [7.0, 8.0], [9.0, 9.5], [0.5, 0.25]],
    ])
    cb = CodebookSet(cw)
    np.testing.assert_array_equal(reconstruct(cb, np.array([[3, 0]])), [[5.0, 6.0, -1.0, -2.0]])
    x = Rng(1).normal(size=(7, 4)) * 3
    idx = hard_assign(cb, x)
    rec = reconstruct(cb, idx).reshape(7, 2, 2)
    for n in range(7):
        for m in range(2):
            np.testing.assert_array_equal(rec[n, m], cw[m, idx[n, m]])
    flat = CodebookSet(cw[:1])
    np.testing.assert_array_equal(reconstruct(flat, np.array([[2]])), [[3.0, 4.0]])
    with pytest.raises(DataCorruptionError):
        reconstruct(cb, np.array([[4, 0]]))


def test_permutation_equivariance():
    cb = random_cb(3, 8, 4, 21)
    x = Rng(22).normal(size=(10, 12))
    perm = Rng(23).permutation(8)
    cbp = CodebookSet(cb.codewords[:, perm, :])
    inv = np.argsort(perm)
    np.testing.assert_array_equal(hard_assign(cbp, x), inv[hard_assign(cb, x)])
    np.testing.assert_allclose(soft_quantize(cbp, x, 0.2)[0], soft_quantize(cb, x, 0.2)[0], atol=1e-12)


def test_straight_through_backward():
    cb = random_cb(2, 4, 2, 31)
    idx = np.array([[1, 3], [1, 0], [2, 3]])
    g = Rng(32).normal(size=(3, 4))
    gc, gx = hard_quantize_backward(cb, idx, g)
    np.testing.assert_array_equal(gx, g)
    np.testing.assert_allclose(gc[0, 1], g[0, :2] + g[1, :2])
    np.testing.assert_allclose(gc[1, 3], g[0, 2:] + g[2, 2:])
    assert not gc[0, 0].any() and not gc[0, 3].any()
