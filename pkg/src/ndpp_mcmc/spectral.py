"""Eigenstructure utilities.

Youla decomposition of skew-symmetric matrices, the spectral symmetrization
used to build rejection proposals, kernel eigenvalues, elementary symmetric
polynomials and the two categorical samplers built on them.

Functions whose names end in ``_batch`` (or that document a leading stack
axis) operate on stacks of small matrices and are what the samplers use in
their inner loops.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import NumericalError

EPS_EIG = 1e-8
EPS_LIN = 1e-9
EPS_SIG = 1e-12
PINV_TOL = 1e-10


@dataclass(frozen=True)
class YoulaFactors:
    """``skew = sum_i sigma_i (y_i z_i^T - z_i y_i^T)``, sigmas descending."""

    sigmas: np.ndarray
    Y: np.ndarray
    Z: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.Y * self.sigmas) @ self.Z.T - (self.Z * self.sigmas) @ self.Y.T


def _max_abs(M):
    return float(np.max(np.abs(M))) if np.size(M) else 0.0


def youla_decompose(skew) -> YoulaFactors:
    """Youla decomposition read off the real Schur form of ``skew``.

    Each 2x2 Schur block is oriented so that its (y, z) entry is ``+sigma``.
    Pairs with ``sigma <= EPS_SIG * sigma_max`` are dropped.
    """
    skew = np.asarray(skew, dtype=np.float64)
    d = skew.shape[0]
    if skew.shape != (d, d):
        raise ValueError("input must be square")
    if _max_abs(skew + skew.T) > EPS_LIN * max(1.0, _max_abs(skew)):
        raise ValueError("input is not skew-symmetric")
    empty = YoulaFactors(np.zeros(0), np.zeros((d, 0)), np.zeros((d, 0)))
    if d < 2 or not np.any(skew):
        return empty

    T, Q = scipy.linalg.schur(skew, output="real")
    sigmas, ys, zs = [], [], []
    i = 0
    while i < d - 1:
        if T[i + 1, i] != 0.0:
            upper = T[i, i + 1]
            sigma = 0.5 * (abs(upper) + abs(T[i + 1, i]))
            if upper >= 0:
                y, z = Q[:, i], Q[:, i + 1]
            else:
                y, z = Q[:, i + 1], Q[:, i]
            sigmas.append(sigma)
            ys.append(y)
            zs.append(z)
            i += 2
        else:
            i += 1
    if not sigmas:
        return empty
    sigmas = np.array(sigmas)
    keep = sigmas > EPS_SIG * sigmas.max()
    order = np.argsort(-sigmas[keep], kind="stable")
    Y = np.array(ys).T[:, keep][:, order]
    Z = np.array(zs).T[:, keep][:, order]
    return YoulaFactors(sigmas[keep][order], Y, Z)


def symmetrize_proposal(WA) -> np.ndarray:
    """Symmetric PSD proposal inner matrix for a conditional inner matrix.

    Returns ``(WA + WA^T)/2 + sum_i sigma_i (y_i y_i^T + z_i z_i^T)`` with the
    Youla factors of ``(WA - WA^T)/2``.
    """
    WA = np.asarray(WA, dtype=np.float64)
    sym = 0.5 * (WA + WA.T)
    scale = max(1.0, _max_abs(sym))
    if np.linalg.eigvalsh(sym).min() < -EPS_EIG * scale:
        raise NumericalError("symmetric part of the inner matrix is indefinite")
    f = youla_decompose(0.5 * (WA - WA.T))
    if f.sigmas.size == 0:
        return sym
    return sym + (f.Y * f.sigmas) @ f.Y.T + (f.Z * f.sigmas) @ f.Z.T


def abs_skew(K) -> np.ndarray:
    """``(K^T K)^{1/2}`` for a stack of skew-symmetric matrices.

    For skew ``K`` with Youla factors this equals
    ``sum_i sigma_i (y_i y_i^T + z_i z_i^T)``.  It is computed as the
    absolute value of the Hermitian matrix ``iK`` (eigenvalues ``+-sigma_i``),
    which vectorizes over the stack and avoids squaring the singular values.
    """
    K = np.asarray(K, dtype=np.float64)
    mu, vecs = np.linalg.eigh(1j * K)
    out = (vecs * np.abs(mu)[..., None, :]) @ np.conj(np.swapaxes(vecs, -1, -2))
    return out.real


def symmetrize_proposal_batch(WA) -> np.ndarray:
    """Stacked :func:`symmetrize_proposal` without the PSD precondition check."""
    WA = np.asarray(WA, dtype=np.float64)
    WAt = np.swapaxes(WA, -1, -2)
    return 0.5 * (WA + WAt) + abs_skew(0.5 * (WA - WAt))


def _root(M, power, tol):
    M = np.asarray(M, dtype=np.float64)
    mu, vecs = np.linalg.eigh(0.5 * (M + np.swapaxes(M, -1, -2)))
    top = mu.max(axis=-1, keepdims=True)
    keep = (mu > tol * top) & (top > 0)
    scaled = np.where(keep, np.where(keep, mu, 1.0) ** power, 0.0)
    return (vecs * scaled[..., None, :]) @ np.swapaxes(vecs, -1, -2), keep


def _check_psd_symmetric(M):
    scale = max(1.0, _max_abs(M))
    if _max_abs(M - np.swapaxes(M, -1, -2)) > EPS_LIN * scale:
        raise ValueError("matrix is not symmetric")
    if np.linalg.eigvalsh(M).min() < -EPS_EIG * scale:
        raise NumericalError("matrix is not positive semidefinite")


def pseudo_inv_sqrt(M, tol=PINV_TOL) -> np.ndarray:
    """Inverse square root of a symmetric PSD matrix on its retained eigenspace.

    Eigenvalues at or below ``tol * mu_max`` are treated as zero, so
    ``U M U`` is the orthogonal projection onto the retained eigenspace.
    """
    M = np.asarray(M, dtype=np.float64)
    _check_psd_symmetric(M)
    U, keep = _root(M, -0.5, tol)
    if not keep.any():
        raise NumericalError("all eigenvalues are below the pseudo-inverse tolerance")
    return U


def psd_sqrt(M, tol=PINV_TOL) -> np.ndarray:
    """Symmetric square root of a (stack of) symmetric PSD matrices.

    Eigenvalues at or below ``tol * mu_max`` are zeroed.  No precondition
    checks; negative roundoff eigenvalues fall below the tolerance.
    """
    return _root(M, 0.5, tol)[0]


def nonzero_eigvals(kernel) -> np.ndarray:
    """The d eigenvalues of ``W X^T X`` (the nonzero spectrum of ``L``).

    The spectrum of a nonsymmetric PSD kernel can contain complex-conjugate
    pairs.  Imaginary parts below ``EPS_EIG * scale`` are dropped; if any
    larger ones remain a complex array is returned.  Real parts must be
    nonnegative up to ``EPS_EIG * scale`` and are clamped at zero.
    """
    M = kernel.W @ (kernel.X.T @ kernel.X)
    lam = np.linalg.eigvals(M)
    scale = max(float(np.max(np.abs(lam))), 1e-300)
    if np.any(lam.real < -EPS_EIG * scale):
        raise NumericalError("kernel has an eigenvalue with negative real part")
    re = np.clip(lam.real, 0.0, None)
    im = np.where(np.abs(lam.imag) <= EPS_EIG * scale, 0.0, lam.imag)
    order = np.lexsort((im, -re))
    re, im = re[order], im[order]
    if np.any(im):
        return re + 1j * im
    return re


@dataclass(frozen=True)
class ElemSymTable:
    """``E[j, k] = e_k(lambda_1..lambda_j)`` for 0 <= j, k <= d.

    For complex-conjugate input the intermediate rows are complex; ``e`` is
    the real last row either way.
    """

    lambdas: np.ndarray
    E: np.ndarray

    @property
    def d(self) -> int:
        return self.lambdas.shape[0]

    @property
    def e(self) -> np.ndarray:
        last = self.E[-1]
        if np.iscomplexobj(last):
            scale = max(float(np.max(np.abs(last))), 1e-300)
            if np.max(np.abs(last.imag)) > EPS_EIG * scale:
                raise NumericalError("elementary symmetric polynomials are not real")
            last = last.real
        return np.clip(last, 0.0, None)


def elementary_symmetric(lambdas, d=None) -> ElemSymTable:
    lam = np.asarray(lambdas)
    if d is not None and lam.shape[0] != d:
        raise ValueError(f"expected {d} eigenvalues, got {lam.shape[0]}")
    if np.iscomplexobj(lam):
        lam = lam.astype(np.complex128)
        re = lam.real
    else:
        lam = lam.astype(np.float64)
        re = lam
    scale = max(float(np.max(np.abs(lam))) if lam.size else 0.0, 1e-300)
    if np.any(re < -EPS_EIG * scale):
        raise NumericalError("negative eigenvalue beyond tolerance")
    if np.iscomplexobj(lam):
        lam = np.clip(lam.real, 0.0, None) + 1j * lam.imag
    else:
        lam = np.clip(lam, 0.0, None)
    m = lam.shape[0]
    E = np.zeros((m + 1, m + 1), dtype=lam.dtype)
    E[:, 0] = 1.0
    for j in range(1, m + 1):
        E[j, 1:j + 1] = E[j - 1, 1:j + 1] + lam[j - 1] * E[j - 1, 0:j]
    lam.setflags(write=False)
    E.setflags(write=False)
    return ElemSymTable(lam, E)


def elementary_symmetric_batch(lambdas, kmax) -> np.ndarray:
    """Stacked tables, truncated at ``kmax``: shape (N, d + 1, kmax + 1)."""
    lam = np.clip(np.asarray(lambdas, dtype=np.float64), 0.0, None)
    N, m = lam.shape
    E = np.zeros((N, m + 1, kmax + 1))
    E[:, :, 0] = 1.0
    for j in range(1, m + 1):
        E[:, j, 1:] = E[:, j - 1, 1:] + lam[:, j - 1, None] * E[:, j - 1, :-1]
    return E


def sample_elementary_batch(lambdas, E, k, rng) -> np.ndarray:
    """Draw one size-``k`` index set per row with Pr(E) proportional to
    the product of its lambdas.  Backward scan over the table.

    Returns an (N, k) array of indices into the lambda axis.
    """
    lam = np.clip(np.asarray(lambdas, dtype=np.float64), 0.0, None)
    N, m = lam.shape
    out = np.empty((N, k), dtype=np.intp)
    if k == 0:
        return out
    rows = np.arange(N)
    r = np.full(N, k)
    u = rng.random((N, m))
    for j in range(m, 0, -1):
        active = r > 0
        if not active.any():
            break
        ra = np.where(active, r, 1)
        num = lam[:, j - 1] * E[rows, j - 1, ra - 1]
        den = E[rows, j, ra]
        with np.errstate(divide="ignore", invalid="ignore"):
            p = np.where(den > 0, num / den, 0.0)
        take = active & (u[:, j - 1] < p)
        out[rows[take], r[take] - 1] = j - 1
        r = r - take
    if np.any(r > 0):
        raise NumericalError("elementary symmetric polynomial e_k has no support")
    return out


def sample_elementary_subset(table: ElemSymTable, k: int, rng, size=None) -> np.ndarray:
    """Size-``k`` subset E of [d] with Pr(E) = prod(lambda_E) / e_k.

    Returns a sorted index array, or an (size, k) array when ``size`` is set.
    """
    if np.iscomplexobj(table.E):
        raise ValueError("subset sampling needs real eigenvalues")
    if not 0 <= k <= table.d:
        raise ValueError(f"k = {k} outside [0, {table.d}]")
    if table.E[-1, k] <= 0:
        raise NumericalError(f"e_{k} = 0: no size-{k} subset has positive mass")
    N = 1 if size is None else size
    lam = np.broadcast_to(table.lambdas, (N, table.d))
    E = np.broadcast_to(table.E[:, :k + 1], (N, table.d + 1, k + 1))
    out = sample_elementary_batch(lam, E, k, rng)
    return out[0] if size is None else out


def size_distribution(table: ElemSymTable) -> np.ndarray:
    e = table.e
    total = e.sum()
    if total <= 0:
        raise NumericalError("all elementary symmetric polynomials vanish")
    return e / total


def sample_size(table: ElemSymTable, rng, size=None):
    """Draw k in {0..d} with probability proportional to e_k."""
    p = size_distribution(table)
    return rng.choice(p.shape[0], size=size, p=p)
