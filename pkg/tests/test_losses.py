import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fastclip import losses
from fastclip.engine import finite_diff_grad
from fastclip.errors import DegenerateBatchError, DomainError
from conftest import unit_rows


def gcl_double_loop(E1, E2, tau, eps):
    """Independent oracle: literal transcription with explicit loops."""
    n = len(E1)
    total = 0.0
    for i in range(n):
        a = b = 0.0
        for j in range(n):
            if j == i:
                continue
            sii = sum(E1[i][k] * E2[i][k] for k in range(len(E1[i])))
            sij = sum(E1[i][k] * E2[j][k] for k in range(len(E1[i])))
            sji = sum(E1[j][k] * E2[i][k] for k in range(len(E1[i])))
            a += math.exp((sij - sii) / tau)
            b += math.exp((sji - sii) / tau)
        total += math.log(eps + a / (n - 1)) + math.log(eps + b / (n - 1))
    return tau * total / n


def test_similarity_examples():
    I = np.eye(2)
    np.testing.assert_array_equal(losses.pairwise_similarity(I, I), I)
    S = losses.pairwise_similarity(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]]))
    assert S[0, 0] == 0.0
    S = losses.pairwise_similarity(np.array([[0.6, 0.8]]), np.array([[0.8, 0.6]]))
    assert S[0, 0] == pytest.approx(0.96, abs=1e-15)


def test_similarity_shape_error():
    with pytest.raises(ValueError):
        losses.pairwise_similarity(np.ones((2, 3)), np.ones((2, 4)))


def test_ell_examples():
    S = np.array([[1.0, 0.0], [0.3, 0.5]])
    assert losses.ell1(S, 0, 1, 0.5) == pytest.approx(math.exp(-2.0), rel=1e-15)
    assert losses.ell1(np.ones((2, 2)), 0, 1, 0.1) == 1.0
    assert losses.ell1(S, 0, 1, 1e9) == pytest.approx(1.0, abs=1e-8)
    # ell2 reads s_ji: s_10 - s_00 = 0.3 - 1
    assert losses.ell2(S, 0, 1, 0.5) == pytest.approx(math.exp(-1.4), rel=1e-15)
    with pytest.raises(DomainError):
        losses.ell1(S, 0, 1, 0.0)


def test_dell_dtau_examples():
    S = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert losses.dell1_dtau(S, 0, 1, 0.5) == pytest.approx(4 * math.exp(-2), rel=1e-14)
    assert losses.dell1_dtau(np.ones((2, 2)), 0, 1, 0.3) == 0.0
    with pytest.raises(DomainError):
        losses.dell2_dtau(S, 0, 1, -1.0)


def test_dell_de_hand_case():
    E1 = np.array([[1.0, 0.0], [0.0, 1.0]])
    E2 = np.array([[1.0, 0.0], [0.0, 1.0]])
    d1, d2i, d2j = losses.dell1_de(E1, E2, 0, 1, 1.0)
    np.testing.assert_allclose(d1, math.exp(-1) * np.array([-1.0, 1.0]), rtol=1e-15)
    np.testing.assert_allclose(d2i, -math.exp(-1) * E1[0], rtol=1e-15)
    np.testing.assert_allclose(d2j, math.exp(-1) * E1[0], rtol=1e-15)


def test_dell_de_zero_when_texts_identical(rng):
    E1 = unit_rows(rng, 3, 4)
    E2 = np.tile(unit_rows(rng, 1, 4), (3, 1))
    d1, _, _ = losses.dell1_de(E1, E2, 0, 2, 0.4)
    np.testing.assert_array_equal(d1, 0.0)


def _fd_rel(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300)


@pytest.mark.parametrize("seed", range(100))
def test_derivatives_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    d = 3
    E1 = unit_rows(rng, 2, d)
    E2 = unit_rows(rng, 2, d)
    tau = rng.uniform(0.2, 1.0)
    S = E1 @ E2.T
    h = 1e-6

    fd = (losses.ell1(S, 0, 1, tau + h) - losses.ell1(S, 0, 1, tau - h)) / (2 * h)
    assert losses.dell1_dtau(S, 0, 1, tau) == pytest.approx(fd, rel=1e-5)
    fd = (losses.ell2(S, 0, 1, tau + h) - losses.ell2(S, 0, 1, tau - h)) / (2 * h)
    assert losses.dell2_dtau(S, 0, 1, tau) == pytest.approx(fd, rel=1e-5)

    # ell1 as a function of (e1_0, e2_0, e2_1) with raw (unnormalized) coordinates
    def f1(v):
        a, b, c = v[:d], v[d:2 * d], v[2 * d:]
        return math.exp((a @ c - a @ b) / tau)

    point = np.concatenate([E1[0], E2[0], E2[1]])
    ref = finite_diff_grad(f1, point, h)
    got = np.concatenate(losses.dell1_de(E1, E2, 0, 1, tau))
    assert _fd_rel(got, ref) < 1e-5

    def f2(v):
        a, b, c = v[:d], v[d:2 * d], v[2 * d:]  # e2_0, e1_0, e1_1
        return math.exp((c @ a - b @ a) / tau)

    point = np.concatenate([E2[0], E1[0], E1[1]])
    ref = finite_diff_grad(f2, point, h)
    got = np.concatenate(losses.dell2_de(E1, E2, 0, 1, tau))
    assert _fd_rel(got, ref) < 1e-5


def test_g_batch_examples():
    assert losses.g1_batch(np.ones((3, 3)), 0, [1, 2], 0.2) == 1.0
    S = np.array([[1.0, 1.0, 0.0], [0, 1, 0], [0, 0, 1]])
    assert losses.g1_batch(S, 0, [1, 2], 0.5) == pytest.approx((1 + math.exp(-2)) / 2, rel=1e-15)
    with pytest.raises(DegenerateBatchError):
        losses.g1_batch(S, 0, [], 0.5)
    with pytest.raises(DegenerateBatchError):
        losses.g2_batch(S, 0, [0, 1], 0.5)


def test_g_batch_full_set_matches_inner_means(rng):
    E1, E2 = unit_rows(rng, 5, 3), unit_rows(rng, 5, 3)
    S = E1 @ E2.T
    g1, g2 = losses.inner_means(S, 0.3)
    for i in range(5):
        others = [j for j in range(5) if j != i]
        assert g1[i] == pytest.approx(losses.g1_batch(S, i, others, 0.3), rel=1e-14)
        assert g2[i] == pytest.approx(losses.g2_batch(S, i, others, 0.3), rel=1e-14)


def test_gcl_identical_embeddings():
    E = np.tile([[0.6, 0.8]], (4, 1))
    tau, eps = 0.1, 1e-10
    assert losses.eval_gcl(E, E, tau, eps) == pytest.approx(2 * tau * math.log(1 + eps), abs=1e-20)
    assert losses.eval_rgclg(E, E, tau, eps, 6.5) == pytest.approx(2 * tau * math.log(1 + eps) + 2 * 6.5 * tau, rel=1e-14)


def test_gcl_matches_double_loop(rng):
    E1, E2 = unit_rows(rng, 3, 4), unit_rows(rng, 3, 4)
    got = losses.eval_gcl(E1, E2, 0.25, 1e-6)
    assert got == pytest.approx(gcl_double_loop(E1.tolist(), E2.tolist(), 0.25, 1e-6), rel=1e-13)


def test_rgcl_collapses_to_rgclg(rng):
    E1, E2 = unit_rows(rng, 6, 3), unit_rows(rng, 6, 3)
    tau = 0.2
    a = losses.eval_rgcl(E1, E2, np.full(6, tau), np.full(6, tau), 1e-8, 3.0)
    assert a == pytest.approx(losses.eval_rgclg(E1, E2, tau, 1e-8, 3.0), rel=1e-13)


def test_rgclg_is_gcl_plus_margin(rng):
    E1, E2 = unit_rows(rng, 5, 3), unit_rows(rng, 5, 3)
    assert losses.eval_rgclg(E1, E2, 0.3, 1e-8, 2.0) == losses.eval_gcl(E1, E2, 0.3, 1e-8) + 2 * 2.0 * 0.3


def test_mbcl_is_clip_cross_entropy(rng):
    # with the 1/(B-1) constant the loss is the usual symmetric softmax loss
    E1, E2 = unit_rows(rng, 4, 3), unit_rows(rng, 4, 3)
    tau = 0.3
    S = E1 @ E2.T / tau
    ce_i = -np.mean(np.diag(S) - np.log(np.exp(S).sum(axis=1)))
    ce_t = -np.mean(np.diag(S) - np.log(np.exp(S).sum(axis=0)))
    expected = ce_i + ce_t - 2 * math.log(3)
    assert losses.eval_mbcl(E1, E2, tau) == pytest.approx(expected, rel=1e-12)


def test_degenerate_sizes():
    E = np.array([[1.0, 0.0]])
    with pytest.raises(DegenerateBatchError):
        losses.eval_gcl(E, E, 0.1, 0.0)
    with pytest.raises(DegenerateBatchError):
        losses.eval_mbcl(E, E, 0.1)


def test_exp_clamp_counts():
    losses.clamp_warnings.reset()
    S = np.array([[-1.0, 1.0], [1.0, -1.0]])
    v = losses.ell1(S, 0, 1, 0.01)  # argument 200 -> clamped
    assert v == math.exp(losses.EXP_CLAMP)
    assert losses.clamp_warnings.count == 1


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_gcl_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    E1, E2 = unit_rows(rng, 5, 3), unit_rows(rng, 5, 3)
    p = rng.permutation(5)
    a = losses.eval_gcl(E1, E2, 0.3, 1e-8)
    b = losses.eval_gcl(E1[p], E2[p], 0.3, 1e-8)
    assert a == pytest.approx(b, rel=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(1e-3, 0.5))
def test_gcl_monotone_in_off_diagonal_similarity(seed, bump):
    # gcl through S directly: raising one off-diagonal s_ij raises the loss
    rng = np.random.default_rng(seed)
    E1, E2 = unit_rows(rng, 4, 3), unit_rows(rng, 4, 3)
    S = E1 @ E2.T
    i, j = rng.choice(4, size=2, replace=False)

    def gcl_of(S):
        g1, g2 = losses.inner_means(S, 0.3)
        return 0.3 * np.mean(np.log(1e-8 + g1) + np.log(1e-8 + g2))

    S2 = S.copy()
    S2[i, j] += bump
    assert gcl_of(S2) > gcl_of(S)
