"""Low-rank nonsymmetric DPP kernels ``L = X W X^T``.

The kernel is stored through its factors ``V`` (n x d1), ``B`` (n x d2) and
``D`` (d2 x d2) with ``L = V V^T + B (D - D^T) B^T``.  The derived matrices
``X = [V | B]`` and ``W = Diag(I, D - D^T)`` are materialized once.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import KernelFormatError, NumericalError, SingularConditioningError

EPS_DET = 1e-10
EPS_INV = 1e-12

MAGIC = b"NDPPKRN1"
_HEADER = struct.Struct("<8sQQQ")
TEXT_SUFFIX = ".ndpp.txt"


def _readonly(a):
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class LowRankKernel:
    """Immutable low-rank NDPP kernel; build it with :func:`build_kernel`."""

    V: np.ndarray
    B: np.ndarray
    D: np.ndarray
    X: np.ndarray = field(repr=False)
    W: np.ndarray = field(repr=False)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def d1(self) -> int:
        return self.V.shape[1]

    @property
    def d2(self) -> int:
        return self.B.shape[1]

    def dense(self) -> np.ndarray:
        """The full n x n kernel. Only meant for small n."""
        return self.X @ self.W @ self.X.T

    def scaled(self, c: float) -> "LowRankKernel":
        """Kernel with features ``c * X`` (``L`` scales by ``c**2``)."""
        return build_kernel(c * self.V, c * self.B, self.D)

    def __repr__(self):
        return f"LowRankKernel(n={self.n}, d1={self.d1}, d2={self.d2})"


def build_kernel(V, B, D) -> LowRankKernel:
    V = np.asarray(V, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    D = np.asarray(D, dtype=np.float64)
    if V.ndim != 2 or B.ndim != 2 or D.ndim != 2:
        raise ValueError("V, B and D must be 2-d arrays")
    n = max(V.shape[0], B.shape[0])
    # an empty factor may come in as shape (0, 0)
    if V.shape[1] == 0 and V.shape[0] != n:
        V = np.zeros((n, 0))
    if B.shape[1] == 0 and B.shape[0] != n:
        B = np.zeros((n, 0))
    if V.shape[0] != B.shape[0]:
        raise ValueError(f"V has {V.shape[0]} rows but B has {B.shape[0]}")
    d2 = B.shape[1]
    if D.size == 0 and d2 == 0:
        D = np.zeros((0, 0))
    if D.shape != (d2, d2):
        raise ValueError(f"D must be {d2}x{d2}, got {D.shape[0]}x{D.shape[1]}")
    if n < 1:
        raise ValueError("kernel needs at least one item")
    d1 = V.shape[1]
    if d1 + d2 < 2:
        raise ValueError("kernel rank d = d1 + d2 must be at least 2")
    for name, a in (("V", V), ("B", B), ("D", D)):
        if not np.all(np.isfinite(a)):
            raise ValueError(f"{name} has non-finite entries")

    X = np.hstack([V, B])
    W = np.zeros((d1 + d2, d1 + d2))
    W[:d1, :d1] = np.eye(d1)
    W[d1:, d1:] = D - D.T
    return LowRankKernel(_readonly(V), _readonly(B), _readonly(D), _readonly(X), _readonly(W))


def _det_tolerance(M):
    # Hadamard's bound on |det|, so the clamp scales with the matrix
    scale = np.prod(np.linalg.norm(M, axis=-1), axis=-1)
    return EPS_DET * (1.0 + scale)


def clamp_dets(dets, M):
    """Clamp roundoff negatives of principal minors to zero.

    ``M`` is the (stack of) matrices the determinants were taken of.  Values
    below ``-EPS_DET * (1 + hadamard_bound)`` raise :class:`NumericalError`.
    """
    tol = _det_tolerance(M)
    dets = np.asarray(dets, dtype=np.float64)
    bad = dets < -tol
    if np.any(bad):
        worst = float(np.min(dets[bad] if dets.ndim else dets))
        raise NumericalError(f"principal minor {worst:.3e} is negative beyond roundoff")
    return np.where(dets < 0, 0.0, dets)


def det_subset(kernel: LowRankKernel, S, W=None) -> float:
    """``det(L_S)`` computed as ``det(X_S W X_S^T)``; 1 for the empty set."""
    S = np.asarray(S, dtype=np.intp).ravel()
    if S.size == 0:
        return 1.0
    if S.min() < 0 or S.max() >= kernel.n:
        raise IndexError("subset index out of range")
    W = kernel.W if W is None else W
    XS = kernel.X[S]
    M = XS @ W @ XS.T
    return float(clamp_dets(np.linalg.det(M), M))


def det_subsets(kernel: LowRankKernel, subsets, W=None) -> np.ndarray:
    """Vectorized :func:`det_subset` for an (N, m) array of equal-size subsets.

    ``W`` may be a single d x d matrix or an (N, d, d) stack.
    """
    subsets = np.asarray(subsets, dtype=np.intp)
    if subsets.ndim != 2:
        raise ValueError("subsets must be an (N, m) array")
    if subsets.shape[1] == 0:
        return np.ones(subsets.shape[0])
    W = kernel.W if W is None else W
    XS = kernel.X[subsets]
    M = XS @ W @ np.swapaxes(XS, -1, -2)
    return clamp_dets(np.linalg.det(M), M)


@dataclass(frozen=True)
class ConditionalInner:
    """Inner matrix ``W^A`` of the kernel conditioned on ``A``."""

    A: tuple
    WA: np.ndarray


def conditional_inner(X, W_in, A):
    """Vectorized conditioning.

    ``A`` is an (N, m) index array, ``W_in`` a d x d matrix or (N, d, d) stack.
    Returns ``(WA, ok)`` where ``ok[i]`` is False when the conditioning matrix
    of chain ``i`` is numerically singular (its ``WA`` row is then garbage).
    """
    A = np.asarray(A, dtype=np.intp)
    N, m = A.shape
    d = X.shape[1]
    W_in = np.broadcast_to(W_in, (N, d, d))
    if m == 0:
        return W_in.copy(), np.ones(N, dtype=bool)
    XA = X[A]
    left = W_in @ np.swapaxes(XA, -1, -2)  # W X_A^T, (N, d, m)
    right = XA @ W_in  # X_A W, (N, m, d)
    G = XA @ left
    ok = np.isfinite(G).all(axis=(1, 2))
    rcond = np.zeros(N)
    if ok.any():
        sv = np.linalg.svd(G[ok], compute_uv=False)
        # small relative to the scale of X_A and W counts as singular too,
        # otherwise a 1 x 1 roundoff residue looks perfectly conditioned
        scale = np.sum(XA[ok] ** 2, axis=(1, 2)) * np.linalg.norm(W_in[ok], 2, axis=(1, 2))
        with np.errstate(divide="ignore", invalid="ignore"):
            rcond[ok] = np.minimum(sv[:, -1] / sv[:, 0], sv[:, -1] / scale)
    ok &= rcond > EPS_INV
    G[~ok] = np.eye(m)
    WA = W_in - left @ np.linalg.solve(G, right)
    return WA, ok


def condition_inner(kernel: LowRankKernel, W_in, A) -> ConditionalInner:
    """``W^A = W_in - W_in X_A^T (X_A W_in X_A^T)^{-1} X_A W_in``.

    Raises :class:`SingularConditioningError` when the reciprocal condition
    number of ``G = X_A W_in X_A^T`` is below ``EPS_INV``, or when its
    smallest singular value is below ``EPS_INV * |X_A|_F^2 |W_in|_2``.
    """
    A = tuple(int(a) for a in np.asarray(A, dtype=np.intp).ravel())
    if len(A) > kernel.d - 2:
        raise ValueError(f"|A| = {len(A)} exceeds d - 2 = {kernel.d - 2}")
    W_in = kernel.W if W_in is None else np.asarray(W_in, dtype=np.float64)
    WA, ok = conditional_inner(kernel.X, W_in, np.array([A], dtype=np.intp).reshape(1, len(A)))
    if not ok[0]:
        raise SingularConditioningError(f"conditioning on {A} is singular")
    return ConditionalInner(A, WA[0])


def synth_kernel(n: int, d: int, seed=None) -> LowRankKernel:
    """Random kernel: V, B ~ N(0, sqrt(2/d)) entrywise (n x d/2), D ~ N(0, 1)."""
    if d % 2:
        raise ValueError(f"d must be even, got {d}")
    if d < 2 or d > n:
        raise ValueError(f"need 2 <= d <= n, got d={d}, n={n}")
    rng = np.random.default_rng(seed)
    h = d // 2
    std = np.sqrt(2.0 / d)
    V = rng.normal(0.0, std, size=(n, h))
    B = rng.normal(0.0, std, size=(n, h))
    D = rng.normal(0.0, 1.0, size=(h, h))
    return build_kernel(V, B, D)


# -- file IO ---------------------------------------------------------------


def save_kernel(kernel: LowRankKernel, path) -> None:
    """Write the kernel factors; ``*.ndpp.txt`` selects the text variant."""
    path = Path(path)
    if path.name.endswith(TEXT_SUFFIX):
        with open(path, "w") as fh:
            fh.write(f"NDPP {kernel.n} {kernel.d1} {kernel.d2}\n")
            for block in (kernel.V, kernel.B, kernel.D):
                for row in block:
                    if row.size:
                        fh.write(" ".join(repr(float(x)) for x in row) + "\n")
        return
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, kernel.n, kernel.d1, kernel.d2))
        for block in (kernel.V, kernel.B, kernel.D):
            fh.write(np.ascontiguousarray(block, dtype="<f8").tobytes())


def _check_dims(n, d1, d2):
    if n == 0:
        raise KernelFormatError("header declares n = 0")
    if d1 + d2 < 2:
        raise KernelFormatError(f"header declares rank d1 + d2 = {d1 + d2} < 2")
    if d1 + d2 > 1 << 20 or n > 1 << 40:
        raise KernelFormatError("header dimensions are implausibly large")


def _assemble(n, d1, d2, V, B, D):
    for name, a in (("V", V), ("B", B), ("D", D)):
        if not np.all(np.isfinite(a)):
            raise KernelFormatError(f"section {name} has non-finite values")
    return build_kernel(V.reshape(n, d1), B.reshape(n, d2), D.reshape(d2, d2))


def load_kernel(path) -> LowRankKernel:
    path = Path(path)
    if path.name.endswith(TEXT_SUFFIX):
        return _load_text(path)
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise KernelFormatError("file too short for the header")
    magic, n, d1, d2 = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise KernelFormatError(f"bad magic {magic!r}")
    _check_dims(n, d1, d2)
    payload = memoryview(data)[_HEADER.size:]
    blocks = []
    offset = 0
    for name, count in (("V", n * d1), ("B", n * d2), ("D", d2 * d2)):
        nbytes = 8 * count
        if offset + nbytes > len(payload):
            raise KernelFormatError(f"truncated payload: section {name} is incomplete")
        blocks.append(np.frombuffer(payload[offset:offset + nbytes], dtype="<f8").astype(np.float64))
        offset += nbytes
    if offset != len(payload):
        raise KernelFormatError(f"{len(payload) - offset} trailing bytes after section D")
    return _assemble(n, d1, d2, *blocks)


def _load_text(path):
    with open(path) as fh:
        header = fh.readline().split()
        if len(header) != 4 or header[0] != "NDPP":
            raise KernelFormatError("text header must read 'NDPP n d1 d2'")
        try:
            n, d1, d2 = (int(h) for h in header[1:])
        except ValueError:
            raise KernelFormatError("non-integer dimension in header") from None
        if min(n, d1, d2) < 0:
            raise KernelFormatError("negative dimension in header")
        _check_dims(n, d1, d2)
        try:
            values = np.array(fh.read().split(), dtype=np.float64)
        except ValueError as exc:
            raise KernelFormatError(f"unparsable number: {exc}") from None
    blocks = []
    offset = 0
    for name, count in (("V", n * d1), ("B", n * d2), ("D", d2 * d2)):
        if offset + count > values.size:
            raise KernelFormatError(f"truncated payload: section {name} is incomplete")
        blocks.append(values[offset:offset + count])
        offset += count
    if offset != values.size:
        raise KernelFormatError(f"{values.size - offset} trailing values after section D")
    return _assemble(n, d1, d2, *blocks)
