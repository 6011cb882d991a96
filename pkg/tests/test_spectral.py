from itertools import combinations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import chi2_pvalue, random_kernel
from ndpp_mcmc import (
    NumericalError,
    build_kernel,
    condition_inner,
    elementary_symmetric,
    nonzero_eigvals,
    pseudo_inv_sqrt,
    sample_elementary_subset,
    sample_size,
    symmetrize_proposal,
    youla_decompose,
)
from ndpp_mcmc.spectral import (
    abs_skew,
    elementary_symmetric_batch,
    psd_sqrt,
    size_distribution,
    symmetrize_proposal_batch,
)


def random_skew(d, rng):
    M = rng.normal(size=(d, d))
    return 0.5 * (M - M.T)


# -- Youla -----------------------------------------------------------------------


def test_youla_zero_matrix():
    f = youla_decompose(np.zeros((4, 4)))
    assert f.sigmas.size == 0 and f.Y.shape == (4, 0)


def test_youla_canonical_block():
    f = youla_decompose(np.array([[0.0, 2.0], [-2.0, 0.0]]))
    assert f.sigmas == pytest.approx([2.0])
    # orientation: y^T S z = +sigma
    assert f.Y[:, 0] @ np.array([[0.0, 2.0], [-2.0, 0.0]]) @ f.Z[:, 0] == pytest.approx(2.0)
    assert abs(f.Y[0, 0]) == pytest.approx(1.0) and abs(f.Z[1, 0]) == pytest.approx(1.0)


def test_youla_rejects_non_skew():
    with pytest.raises(ValueError):
        youla_decompose(np.eye(3))


@pytest.mark.parametrize("d", [2, 3, 4, 5, 6, 8, 10, 12])
def test_youla_reconstruction_and_orthonormality(d):
    rng = np.random.default_rng(d)
    for _ in range(100 // 8 + 1):
        S = random_skew(d, rng)
        f = youla_decompose(S)
        assert np.linalg.norm(f.reconstruct() - S) <= 1e-10 * np.linalg.norm(S)
        YZ = np.hstack([f.Y, f.Z])
        assert np.abs(YZ.T @ YZ - np.eye(YZ.shape[1])).max() <= 1e-9
        assert np.all(np.diff(f.sigmas) <= 0)
        assert f.sigmas.size == d // 2


def test_youla_drops_null_pairs():
    rng = np.random.default_rng(0)
    Q, _ = np.linalg.qr(rng.normal(size=(6, 6)))
    S = 3.0 * (np.outer(Q[:, 0], Q[:, 1]) - np.outer(Q[:, 1], Q[:, 0]))
    f = youla_decompose(S)
    assert f.sigmas == pytest.approx([3.0])


# -- symmetrization --------------------------------------------------------------


def test_symmetric_input_is_fixed_point():
    rng = np.random.default_rng(1)
    G = rng.normal(size=(4, 4))
    W = G @ G.T
    assert np.array_equal(symmetrize_proposal(W), 0.5 * (W + W.T))


def test_two_by_two_proposal():
    W = np.array([[1.0, 2.0], [-2.0, 1.0]])
    What = symmetrize_proposal(W)
    assert np.abs(What - 3.0 * np.eye(2)).max() <= 1e-14
    assert np.linalg.det(What) == pytest.approx(9.0)
    assert np.linalg.det(W) == pytest.approx(5.0)


def test_indefinite_symmetric_part_rejected():
    with pytest.raises(NumericalError):
        symmetrize_proposal(np.diag([1.0, -1.0]))


def test_batch_matches_youla_route():
    rng = np.random.default_rng(2)
    for d in (2, 4, 7, 10):
        WA = np.stack([np.diag(rng.random(d)) + random_skew(d, rng) for _ in range(5)])
        batch = symmetrize_proposal_batch(WA)
        for i in range(5):
            assert np.abs(batch[i] - symmetrize_proposal(WA[i])).max() <= 1e-10


def test_abs_skew_squares_to_minus_k_squared():
    rng = np.random.default_rng(3)
    K = random_skew(6, rng)
    P = abs_skew(K)
    assert np.abs(P @ P + K @ K).max() <= 1e-12
    assert np.linalg.eigvalsh(P).min() >= -1e-12


def dominance_gap(kernel, A):
    """Largest violation of det(L-hat_S) >= det(L^A_S) over all S, and the
    largest |difference| over |S| >= d."""
    WA = condition_inner(kernel, None, A).WA
    What = symmetrize_proposal(WA)
    worst, worst_eq = -np.inf, 0.0
    for m in range(1, kernel.n + 1):
        S = np.array(list(combinations(range(kernel.n), m)))
        XS = kernel.X[S]
        XSt = np.swapaxes(XS, -1, -2)
        gap = np.linalg.det(XS @ WA @ XSt) - np.linalg.det(XS @ What @ XSt)
        worst = max(worst, gap.max())
        if m >= kernel.d:
            worst_eq = max(worst_eq, np.abs(gap).max())
    return worst, worst_eq


def test_dominance_exhaustive_small():
    k = random_kernel(8, 4, seed=4)
    for A in ([], [3], [1, 6]):
        worst, worst_eq = dominance_gap(k, A)
        assert worst <= 1e-9
        assert worst_eq <= 1e-9


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31), n=st.integers(4, 8), half=st.integers(1, 2), m=st.integers(0, 2))
def test_dominance_property(seed, n, half, m):
    d = 2 * half
    k = random_kernel(n, d, seed)
    m = min(m, d - 2)
    A = list(np.random.default_rng(seed).choice(n, size=m, replace=False))
    try:
        worst, worst_eq = dominance_gap(k, A)
    except NumericalError:
        return  # singular conditioning set: nothing to check
    assert worst <= 1e-9
    assert worst_eq <= 1e-9


# -- eigenvalues -----------------------------------------------------------------


def test_identity_kernel_eigenvalues():
    k = build_kernel(np.eye(6)[:, :4], np.zeros((6, 0)), np.zeros((0, 0)))
    assert np.allclose(nonzero_eigvals(k), 1.0, atol=1e-14)


def test_eigenvalues_match_dense():
    k = random_kernel(8, 4, seed=5)
    lam = nonzero_eigvals(k)
    dense = np.linalg.eigvals(k.dense())
    dense = dense[np.argsort(-np.abs(dense))][:4]
    for x in lam:
        assert np.min(np.abs(dense - x)) <= 1e-8 * max(1.0, abs(x))


def test_eigenvalue_trace_identity():
    k = random_kernel(9, 6, seed=6)
    lam = nonzero_eigvals(k)
    tr = np.trace(k.W @ k.X.T @ k.X)
    assert abs(lam.sum() - tr) <= 1e-10 * abs(tr)


def test_complex_spectrum_still_gives_real_polynomials():
    # a real kernel whose nonzero spectrum contains a conjugate pair
    k = build_kernel(np.eye(2), np.eye(2), np.array([[0.0, 1.0], [0.0, 0.0]]))
    lam = nonzero_eigvals(k)
    assert np.iscomplexobj(lam)
    assert np.allclose(sorted(lam[np.abs(lam) > 0.5], key=lambda z: z.imag), [1 - 1j, 1 + 1j])
    e = elementary_symmetric(lam).e
    L = k.dense()
    assert e[1] == pytest.approx(np.trace(L))
    assert e[2] == pytest.approx(np.linalg.det(L))


# -- elementary symmetric polynomials --------------------------------------------


def brute_e(lam, k):
    return sum(np.prod([lam[i] for i in S]) for S in combinations(range(len(lam)), k))


def test_e0_and_small_case():
    t = elementary_symmetric([2.0, 3.0])
    assert list(t.e) == [1.0, 5.0, 6.0]
    assert np.all(t.E[:, 0] == 1.0)


@pytest.mark.parametrize("d", [1, 3, 6, 8])
def test_table_matches_brute_force(d):
    lam = np.random.default_rng(d).random(d) * 3
    t = elementary_symmetric(lam)
    for k in range(d + 1):
        assert t.e[k] == pytest.approx(brute_e(lam, k), rel=1e-12)
    for j in range(1, d + 1):
        for k in range(1, d + 1):
            assert t.E[j, k] == t.E[j - 1, k] + lam[j - 1] * t.E[j - 1, k - 1]
    assert np.all(np.triu(t.E, 1) == 0)
    assert np.all(t.E >= 0)


def test_negative_eigenvalue_rejected():
    with pytest.raises(NumericalError):
        elementary_symmetric([1.0, -0.5])


def test_batch_table_matches_scalar():
    lam = np.random.default_rng(7).random((4, 5))
    E = elementary_symmetric_batch(lam, 3)
    for i in range(4):
        assert np.allclose(E[i], elementary_symmetric(lam[i]).E[:, :4], rtol=1e-14)


# -- categorical samplers --------------------------------------------------------


def test_single_support_point():
    t = elementary_symmetric([1.0, 0.0, 0.0])
    rng = np.random.default_rng(0)
    draws = sample_elementary_subset(t, 1, rng, size=1000)
    assert np.all(draws == 0)


def test_symmetric_pair():
    t = elementary_symmetric([1.0, 1.0])
    draws = sample_elementary_subset(t, 1, np.random.default_rng(1), size=100_000)
    assert abs(np.mean(draws == 0) - 0.5) <= 0.01


def test_three_two_one():
    t = elementary_symmetric([3.0, 2.0, 1.0])
    draws = sample_elementary_subset(t, 2, np.random.default_rng(2), size=100_000)
    keys = [(0, 1), (0, 2), (1, 2)]
    freq = np.array([np.mean((draws[:, 0] == a) & (draws[:, 1] == b)) for a, b in keys])
    expect = np.array([6, 3, 2]) / 11
    assert np.abs(freq - expect).max() <= 0.01
    assert chi2_pvalue(freq * 100_000, expect) > 1e-3


@pytest.mark.parametrize("d, k", [(4, 2), (5, 3), (6, 4), (6, 1)])
def test_elementary_subset_chi_square(d, k):
    lam = np.random.default_rng(10 + d).random(d) + 0.1
    t = elementary_symmetric(lam)
    draws = sample_elementary_subset(t, k, np.random.default_rng(d * k), size=100_000)
    keys = list(combinations(range(d), k))
    index = {S: i for i, S in enumerate(keys)}
    counts = np.bincount([index[tuple(r)] for r in draws], minlength=len(keys))
    probs = np.array([np.prod(lam[list(S)]) for S in keys])
    assert chi2_pvalue(counts, probs) > 1e-3


def test_elementary_subset_errors():
    t = elementary_symmetric([1.0, 0.0])
    with pytest.raises(NumericalError):
        sample_elementary_subset(t, 2, np.random.default_rng(0))
    with pytest.raises(ValueError):
        sample_elementary_subset(t, 3, np.random.default_rng(0))


def test_size_binomial():
    t = elementary_symmetric([1.0, 1.0])
    assert np.allclose(size_distribution(t), [0.25, 0.5, 0.25])
    draws = sample_size(t, np.random.default_rng(3), size=100_000)
    emp = np.bincount(draws, minlength=3) / draws.size
    assert np.abs(emp - [0.25, 0.5, 0.25]).max() <= 0.01


def test_size_all_zero():
    t = elementary_symmetric([0.0, 0.0, 0.0])
    assert np.all(sample_size(t, np.random.default_rng(4), size=100) == 0)


@pytest.mark.parametrize("d", [2, 4, 6])
def test_size_chi_square(d):
    t = elementary_symmetric(np.random.default_rng(d).random(d) * 2)
    draws = sample_size(t, np.random.default_rng(5), size=100_000)
    assert chi2_pvalue(np.bincount(draws, minlength=d + 1), t.e) > 1e-3


def test_size_histogram_matches_enumeration():
    k = random_kernel(8, 4, seed=8)
    t = elementary_symmetric(nonzero_eigvals(k))
    L = k.dense()
    mass = np.zeros(5)
    for m in range(5):
        for S in combinations(range(8), m):
            mass[m] += np.linalg.det(L[np.ix_(S, S)]) if m else 1.0
    mass /= mass.sum()
    draws = sample_size(t, np.random.default_rng(6), size=100_000)
    emp = np.bincount(draws, minlength=5) / draws.size
    assert np.abs(emp - mass).max() <= 0.02


# -- matrix roots ----------------------------------------------------------------


def test_pinv_sqrt_scaled_identity():
    assert np.allclose(pseudo_inv_sqrt(4 * np.eye(3)), np.eye(3) / 2, atol=1e-15)


def test_pinv_sqrt_rank_deficient():
    U = pseudo_inv_sqrt(np.diag([1.0, 0.0]))
    assert np.allclose(U, np.diag([1.0, 0.0]), atol=1e-15)
    assert np.allclose(U @ np.diag([1.0, 0.0]) @ U, np.diag([1.0, 0.0]), atol=1e-15)


def test_pinv_sqrt_projection():
    rng = np.random.default_rng(9)
    G = rng.normal(size=(4, 3))
    M = G @ G.T
    U = pseudo_inv_sqrt(M)
    P = G @ np.linalg.pinv(G)
    assert np.linalg.norm(U @ M @ U - P) <= 1e-9


def test_pinv_sqrt_errors():
    with pytest.raises(NumericalError):
        pseudo_inv_sqrt(np.zeros((3, 3)))
    with pytest.raises(NumericalError):
        pseudo_inv_sqrt(np.diag([1.0, -1.0]))
    with pytest.raises(ValueError):
        pseudo_inv_sqrt(np.array([[1.0, 1.0], [0.0, 1.0]]))


def test_psd_sqrt_is_root():
    rng = np.random.default_rng(10)
    G = rng.normal(size=(3, 5, 2))
    M = G @ np.swapaxes(G, -1, -2)
    R = psd_sqrt(M)
    assert np.abs(R @ R - M).max() <= 1e-10
