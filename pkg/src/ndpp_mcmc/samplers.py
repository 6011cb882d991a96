"""MCMC samplers for low-rank (k-)NDPPs.

Everything here runs many independent chains in lockstep: chain state is an
(N, k) index array and the per-chain d x d matrices live in (N, d, d) stacks,
so one numpy call advances every chain.  The scalar entry points
(:func:`tree_kdpp_sample`, :func:`up_operator`, :func:`mcmc_kndpp`,
:func:`mcmc_ndpp`) are batches of size one.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from math import comb

import numpy as np

from .errors import NumericalError, RejectionLimitError, SingularConditioningError
from .kernel import EPS_DET, LowRankKernel, clamp_dets, conditional_inner
from .spectral import (
    PINV_TOL,
    ElemSymTable,
    elementary_symmetric_batch,
    psd_sqrt,
    sample_elementary_batch,
    sample_size,
    symmetrize_proposal_batch,
)
from .tree import SampleTree, traverse_batch, traverse_sample

DEFAULT_MAX_REJECTS = 10**6
INIT_RETRIES = 100
KDPP_RETRIES = 10


def default_t_iter(k: int) -> int:
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    return k * k


@dataclass
class ChainConfig:
    """Settings for one k-NDPP chain.

    ``init`` is ``"uniform"`` (uniform random start, redrawn while its
    determinant vanishes, greedy MAP as last resort), ``"greedy"`` or an
    explicit size-k subset.
    """

    k: int
    t_iter: int | None = None
    max_rejects: int = DEFAULT_MAX_REJECTS
    init: object = "uniform"
    seed: int | None = None

    def __post_init__(self):
        if self.k < 2:
            raise ValueError(f"k must be >= 2, got {self.k}")
        if self.t_iter is None:
            self.t_iter = default_t_iter(self.k)
        if self.t_iter < 1:
            raise ValueError("t_iter must be >= 1")
        if self.max_rejects < 1:
            raise ValueError("max_rejects must be >= 1")
        if isinstance(self.init, str):
            if self.init not in ("uniform", "greedy"):
                raise ValueError(f"unknown init policy {self.init!r}")
        elif len(tuple(self.init)) != self.k:
            raise ValueError("explicit initial subset must have k items")


@dataclass
class SampleReport:
    subset: tuple
    rejections: int
    rejections_per_iter: np.ndarray
    wall_time: float


@dataclass
class ChainBatch:
    """Final states and statistics of N chains run together."""

    subsets: np.ndarray  # (N, k), rows sorted
    rejections: np.ndarray  # (N,)
    rejections_per_iter: np.ndarray  # (N, t_iter)
    wall_time: float
    trace: np.ndarray | None = None  # (N, t_iter + 1) log det(L_S), if requested

    def as_tuples(self):
        return [tuple(int(a) for a in row) for row in self.subsets]


# -- tree-based k-DPP sampling ----------------------------------------------


@dataclass
class Proposal:
    """Per-chain spectral data of a symmetric DPP with kernel ``X What X^T``.

    ``F[:, :, i] = What^{1/2} v_i / sqrt(lam_i)`` where ``(lam_i, v_i)`` are
    the eigenpairs of ``What^{1/2} C What^{1/2}``, so the elementary DPP for
    index set E has marginal kernel ``X F_E F_E^T X^T``.
    """

    lam: np.ndarray  # (N, d)
    F: np.ndarray  # (N, d, d)
    E: np.ndarray  # (N, d + 1, k + 1)

    def take(self, rows):
        return Proposal(self.lam[rows], self.F[rows], self.E[rows])

    @property
    def ek(self):
        return self.E[:, -1, -1]


def build_proposal(C, What, k) -> Proposal:
    What = np.asarray(What, dtype=np.float64)
    R = psd_sqrt(What)
    lam, vecs = np.linalg.eigh(R @ C @ R)
    top = lam.max(axis=-1, keepdims=True)
    keep = (lam > PINV_TOL * top) & (top > 0)
    lam = np.where(keep, lam, 0.0)
    inv_root = np.where(keep, 1.0 / np.sqrt(np.where(keep, lam, 1.0)), 0.0)
    F = (R @ vecs) * inv_root[..., None, :]
    return Proposal(lam, F, elementary_symmetric_batch(lam, k))


def _sample_from_proposal(tree: SampleTree, prop: Proposal, k, rng) -> np.ndarray:
    N = prop.lam.shape[0]
    rows = np.arange(N)
    out = np.empty((N, k), dtype=np.intp)
    todo = rows
    for _ in range(KDPP_RETRIES):
        sub = prop.take(todo)
        Esel = sample_elementary_batch(sub.lam, sub.E, k, rng)
        Fe = sub.F[np.arange(todo.size)[:, None], :, Esel]  # (M, k, d)
        Q = np.swapaxes(Fe, -1, -2) @ Fe
        Y = np.empty((todo.size, k), dtype=np.intp)
        good = np.ones(todo.size, dtype=bool)
        for j in range(k):
            a = traverse_batch(tree, Q, rng)
            Y[:, j] = a
            xa = tree.X[a]
            q = np.einsum("nij,nj->ni", Q, xa)
            mass = np.einsum("ni,ni->n", xa, q)
            ok = mass > 0
            good &= ok
            mass = np.where(ok, mass, 1.0)
            Q = Q - q[:, :, None] * q[:, None, :] / mass[:, None, None]
            Q = 0.5 * (Q + np.swapaxes(Q, -1, -2))
        out[todo[good]] = Y[good]
        todo = todo[~good]
        if todo.size == 0:
            return out
    raise NumericalError("elementary DPP conditioning kept failing")


def tree_kdpp_batch(tree: SampleTree, What, k, rng, size=None, C=None) -> np.ndarray:
    """Draw subsets from the k-DPP with kernel ``X What X^T``.

    ``What`` is one symmetric PSD d x d matrix (``size`` draws) or an
    (N, d, d) stack (one draw each).  Returns an (N, k) index array.
    """
    C = tree.root if C is None else C
    What = np.asarray(What, dtype=np.float64)
    if What.ndim == 2:
        prop = build_proposal(C, What[None], k)
        N = 1 if size is None else size
        prop = Proposal(*(np.broadcast_to(a, (N,) + a.shape[1:]) for a in (prop.lam, prop.F, prop.E)))
    else:
        prop = build_proposal(C, What, k)
    if np.any(prop.ek <= 0):
        raise NumericalError(f"proposal kernel has rank below k = {k}")
    return _sample_from_proposal(tree, prop, k, rng)


def tree_kdpp_sample(tree: SampleTree, What, k, rng, C=None) -> np.ndarray:
    """One size-k subset with Pr(Y) = det([X What X^T]_Y) / e_k."""
    return np.sort(tree_kdpp_batch(tree, What, k, rng, C=C)[0])


# -- rejection-based up operator ----------------------------------------------


def _pair_dets(X, pairs, inner):
    XY = X[pairs]  # (N, 2, d)
    M = XY @ inner @ np.swapaxes(XY, -1, -2)
    return clamp_dets(np.linalg.det(M), M)


def up_operator_batch(kernel: LowRankKernel, tree: SampleTree, A, rng,
                      max_rejects=DEFAULT_MAX_REJECTS, ratios=None):
    """Draw a pair {a, b} per row of ``A`` with Pr proportional to
    ``det(L_{A + {a, b}})``, by rejection from the symmetric proposal.

    Returns ``(pairs, rejections, ok)``.  Rows whose conditioning set is
    numerically singular have ``ok`` False and pair ``(-1, -1)``.  When
    ``ratios`` is a list, every acceptance ratio drawn is appended to it.
    """
    A = np.asarray(A, dtype=np.intp)
    N, m = A.shape
    X, C = kernel.X, tree.root
    pairs = np.full((N, 2), -1, dtype=np.intp)
    rejections = np.zeros(N, dtype=np.int64)

    if m == 0:
        uniq = np.zeros((1, 0), dtype=np.intp)
        which = np.zeros(N, dtype=np.intp)
    else:
        # chains that share a conditioning set share its proposal
        uniq, which = np.unique(np.sort(A, axis=1), axis=0, return_inverse=True)
        which = which.ravel()
    WAu, oku = conditional_inner(X, kernel.W, uniq)
    Whu = symmetrize_proposal_batch(WAu)
    propu = build_proposal(C, Whu, 2)
    oku &= propu.ek > 0
    ok = oku[which]
    live = np.flatnonzero(ok)

    pending = live
    while pending.size:
        at = which[pending]
        Y = _sample_from_proposal(tree, propu.take(at), 2, rng)
        target = _pair_dets(X, Y, WAu[at])
        proposal = _pair_dets(X, Y, Whu[at])
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(proposal > 0, target / proposal, 0.0)
        if m:
            in_A = (Y[:, :, None] == A[pending][:, None, :]).any(axis=(1, 2))
            ratio = np.where(in_A, 0.0, ratio)
        if ratios is not None:
            ratios.append(ratio)
        accept = rng.random(pending.size) < ratio
        pairs[pending[accept]] = Y[accept]
        pending = pending[~accept]
        rejections[pending] += 1
        if pending.size and rejections[pending].max() > max_rejects:
            raise RejectionLimitError(
                f"up operator exceeded {max_rejects} rejections", int(rejections.max()))
    return pairs, rejections, ok


def up_operator(A, kernel: LowRankKernel, tree: SampleTree, rng,
                max_rejects=DEFAULT_MAX_REJECTS):
    """Scalar up operator: returns ``((a, b), rejections)``."""
    A = np.asarray(A, dtype=np.intp).reshape(1, -1)
    try:
        pairs, rej, ok = up_operator_batch(kernel, tree, A, rng, max_rejects)
    except RejectionLimitError as exc:
        exc.bound = _try_kappa_bound(kernel, A[0])
        raise
    if not ok[0]:
        raise SingularConditioningError(f"conditioning on {tuple(A[0])} is singular")
    a, b = sorted(int(x) for x in pairs[0])
    return (a, b), int(rej[0])


def _try_kappa_bound(kernel, A):
    from .oracle import kappa_bound

    try:
        return kappa_bound(kernel, A)[1]
    except Exception:  # diagnostic only; never mask the original error
        return None


# -- initialization -------------------------------------------------------------


def greedy_map(kernel: LowRankKernel, k_max: int):
    """Greedy MAP sequence ``(s_1, ..., s_kmax)`` and a completeness flag.

    Each step appends the item with the largest ``det(L_{S + i})``, i.e. the
    largest diagonal entry of the kernel conditioned on the current prefix.
    Stops early (flag False) once every remaining gain is numerically zero.
    """
    if not 1 <= k_max <= kernel.d:
        raise ValueError(f"k_max must be in [1, d = {kernel.d}]")
    X = kernel.X
    Ws = kernel.W.copy()
    chosen = []
    first = None
    while len(chosen) < k_max:
        gains = np.einsum("ni,ij,nj->n", X, Ws, X)
        gains[chosen] = -np.inf
        s = int(np.argmax(gains))
        g = gains[s]
        first = g if first is None else first
        if not g > EPS_DET * max(1.0, first):
            return chosen, False
        chosen.append(s)
        xs = X[s]
        Ws = Ws - np.outer(Ws @ xs, xs @ Ws) / g
    return chosen, True


def _uniform_subsets(rng, n, k, N):
    S = rng.integers(0, n, size=(N, k))
    S.sort(axis=1)
    dup = (np.diff(S, axis=1) == 0).any(axis=1)
    while dup.any():
        R = rng.integers(0, n, size=(int(dup.sum()), k))
        R.sort(axis=1)
        S[dup] = R
        dup = (np.diff(S, axis=1) == 0).any(axis=1)
    return S


def _positive(kernel, S):
    XS = kernel.X[S]
    M = XS @ kernel.W @ np.swapaxes(XS, -1, -2)
    det = np.linalg.det(M)
    tol = EPS_DET * (1.0 + np.prod(np.linalg.norm(M, axis=-1), axis=-1))
    return det > tol


def initial_states(kernel: LowRankKernel, k, N, rng, init="uniform") -> np.ndarray:
    if isinstance(init, str) and init == "uniform":
        S = _uniform_subsets(rng, kernel.n, k, N)
        bad = ~_positive(kernel, S)
        for _ in range(INIT_RETRIES):
            if not bad.any():
                return S
            S[bad] = _uniform_subsets(rng, kernel.n, k, int(bad.sum()))
            bad = ~_positive(kernel, S)
        if not bad.any():
            return S
        S[bad] = _greedy_start(kernel, k)
        return S
    if isinstance(init, str) and init == "greedy":
        return np.tile(_greedy_start(kernel, k), (N, 1))
    start = np.array(sorted(int(a) for a in init), dtype=np.intp)
    if start.shape != (k,) or len(set(start.tolist())) != k:
        raise ValueError("explicit initial subset must have k distinct items")
    return np.tile(start, (N, 1))


def _greedy_start(kernel, k):
    seq, complete = greedy_map(kernel, k)
    if not complete:
        raise NumericalError(f"no size-{k} subset with positive determinant found")
    return np.array(sorted(seq), dtype=np.intp)


# -- chains ---------------------------------------------------------------------


def _logdets(kernel, S):
    XS = kernel.X[S]
    sign, logdet = np.linalg.slogdet(XS @ kernel.W @ np.swapaxes(XS, -1, -2))
    return np.where(sign > 0, logdet, -np.inf)


def mcmc_kndpp_batch(kernel: LowRankKernel, tree: SampleTree, k, num_chains, rng,
                     t_iter=None, init="uniform", max_rejects=DEFAULT_MAX_REJECTS,
                     trace=False) -> ChainBatch:
    """Run ``num_chains`` independent pair-exchange chains for ``t_iter`` steps.

    Each step drops two uniformly chosen items of S and re-draws a pair with
    the rejection up operator.  A step whose remaining set is numerically
    singular leaves the chain where it is.
    """
    if not 2 <= k <= min(kernel.d, kernel.n):
        raise ValueError(f"need 2 <= k <= d = {kernel.d}, got k = {k}")
    t_iter = default_t_iter(k) if t_iter is None else int(t_iter)
    if t_iter < 1:
        raise ValueError("t_iter must be >= 1")
    start = time.perf_counter()
    N = int(num_chains)
    rows = np.arange(N)
    S = initial_states(kernel, k, N, rng, init)
    per_iter = np.zeros((N, t_iter), dtype=np.int64)
    logs = np.empty((N, t_iter + 1)) if trace else None
    if trace:
        logs[:, 0] = _logdets(kernel, S)

    if k == kernel.n:
        per_iter[:] = 0
        if trace:
            logs[:, 1:] = logs[:, :1]
    else:
        for t in range(t_iter):
            order = np.argsort(rng.random((N, k)), axis=1)
            A = S[rows[:, None], order[:, :k - 2]]
            pairs, rej, ok = up_operator_batch(kernel, tree, A, rng, max_rejects)
            per_iter[:, t] = rej
            S[ok] = np.concatenate([A[ok], pairs[ok]], axis=1)
            if trace:
                logs[:, t + 1] = _logdets(kernel, S)
    S.sort(axis=1)
    return ChainBatch(S, per_iter.sum(axis=1), per_iter, time.perf_counter() - start, logs)


def mcmc_kndpp(kernel: LowRankKernel, tree: SampleTree, cfg: ChainConfig, rng=None) -> SampleReport:
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    try:
        out = mcmc_kndpp_batch(kernel, tree, cfg.k, 1, rng, t_iter=cfg.t_iter,
                               init=cfg.init, max_rejects=cfg.max_rejects)
    except RejectionLimitError as exc:
        if exc.bound is None and comb(kernel.n, 2) <= 10**6:
            exc.bound = _try_kappa_bound(kernel, [])
        raise
    return SampleReport(tuple(int(a) for a in out.subsets[0]), int(out.rejections[0]),
                        out.rejections_per_iter[0], out.wall_time)


@dataclass
class NDPPBatch:
    subsets: list
    sizes: np.ndarray
    rejections: np.ndarray
    wall_time: float
    t_iters: dict = field(default_factory=dict)


def mcmc_ndpp_batch(kernel: LowRankKernel, tree: SampleTree, table: ElemSymTable, num_samples, rng,
                    t_iter=default_t_iter, init="uniform",
                    max_rejects=DEFAULT_MAX_REJECTS) -> NDPPBatch:
    """Unconstrained NDPP samples: draw |S| with Pr proportional to e_k,
    then run a k-NDPP chain for each sample of size >= 2.

    ``t_iter`` maps a size to its chain length (``k**2`` by default) or is a
    fixed int.
    """
    start = time.perf_counter()
    N = int(num_samples)
    sizes = sample_size(table, rng, size=N)
    subsets = [()] * N
    rejections = np.zeros(N, dtype=np.int64)
    t_iters = {}
    singles = np.flatnonzero(sizes == 1)
    if singles.size:
        sym = 0.5 * (kernel.W + kernel.W.T)
        items = traverse_batch(tree, sym, rng, size=singles.size)
        for i, a in zip(singles, items):
            subsets[i] = (int(a),)
    for k in np.unique(sizes[sizes >= 2]):
        k = int(k)
        idx = np.flatnonzero(sizes == k)
        steps = t_iter(k) if callable(t_iter) else int(t_iter)
        t_iters[k] = steps
        out = mcmc_kndpp_batch(kernel, tree, k, idx.size, rng, t_iter=steps,
                               init=init, max_rejects=max_rejects)
        for i, row in zip(idx, out.subsets):
            subsets[i] = tuple(int(a) for a in row)
        rejections[idx] = out.rejections
    return NDPPBatch(subsets, sizes, rejections, time.perf_counter() - start, t_iters)


def mcmc_ndpp(kernel: LowRankKernel, tree: SampleTree, table: ElemSymTable, rng,
              max_rejects=DEFAULT_MAX_REJECTS) -> SampleReport:
    """One unconstrained NDPP sample; ``table`` must come from the kernel's eigenvalues."""
    start = time.perf_counter()
    k = int(sample_size(table, rng))
    if k == 0:
        return SampleReport((), 0, np.zeros(0, dtype=np.int64), time.perf_counter() - start)
    if k == 1:
        a = traverse_sample(tree, 0.5 * (kernel.W + kernel.W.T), rng)
        return SampleReport((a,), 0, np.zeros(0, dtype=np.int64), time.perf_counter() - start)
    report = mcmc_kndpp(kernel, tree, ChainConfig(k, max_rejects=max_rejects), rng)
    report.wall_time = time.perf_counter() - start
    return report
