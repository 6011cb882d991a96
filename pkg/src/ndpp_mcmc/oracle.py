"""Brute-force ground truth and diagnostics for small kernels."""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass
from itertools import combinations
from math import comb

import numpy as np

from .errors import BudgetExceededError, NumericalError
from .kernel import EPS_DET, LowRankKernel, clamp_dets, condition_inner
from .spectral import EPS_EIG, symmetrize_proposal

KNDPP_BUDGET = 10**7
NDPP_BUDGET = 10**7
PAIR_BUDGET = 10**6
_CHUNK = 1 << 16


@dataclass(frozen=True)
class ExactTable:
    """Exact subset probabilities, keyed by sorted index tuples."""

    entries: dict
    normalizer: float

    def __getitem__(self, subset):
        return self.entries.get(tuple(sorted(subset)), 0.0)

    def __len__(self):
        return len(self.entries)

    def sample(self, size, rng):
        """I.i.d. draws from the table (an exact sampler for small n)."""
        keys = list(self.entries)
        p = np.fromiter(self.entries.values(), dtype=np.float64, count=len(keys))
        idx = rng.choice(len(keys), size=size, p=p / p.sum())
        return [keys[i] for i in idx]

    def size_marginal(self, max_size):
        out = np.zeros(max_size + 1)
        for s, p in self.entries.items():
            out[len(s)] += p
        return out

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["subset", "probability"])
            for s, p in sorted(self.entries.items(), key=lambda kv: (len(kv[0]), kv[0])):
                w.writerow(["-".join(str(a) for a in s), f"{p:.17g}"])


def _chunks(it, size):
    buf = []
    for item in it:
        buf.append(item)
        if len(buf) == size:
            yield np.array(buf, dtype=np.intp)
            buf = []
    if buf:
        yield np.array(buf, dtype=np.intp)


def _subset_dets(kernel, k):
    """Yields (subsets, dets) chunks over all size-k subsets, dets clamped and
    zeroed below the roundoff floor."""
    if k == 0:
        yield np.zeros((1, 0), dtype=np.intp), np.ones(1)
        return
    for S in _chunks(combinations(range(kernel.n), k), _CHUNK):
        XS = kernel.X[S]
        M = XS @ kernel.W @ np.swapaxes(XS, -1, -2)
        dets = clamp_dets(np.linalg.det(M), M)
        floor = EPS_DET * (1.0 + np.prod(np.linalg.norm(M, axis=-1), axis=-1))
        yield S, np.where(dets > floor, dets, 0.0)


def _table(pieces):
    entries = {}
    total = 0.0
    for S, dets in pieces:
        total += float(dets.sum())
        for row, v in zip(S, dets):
            if v > 0:
                entries[tuple(int(a) for a in row)] = float(v)
    if total <= 0:
        raise ValueError("kernel assigns zero mass to every subset")
    return ExactTable({s: v / total for s, v in entries.items()}, total)


def exact_kndpp_table(kernel: LowRankKernel, k: int, budget=KNDPP_BUDGET) -> ExactTable:
    if not 0 <= k <= kernel.n:
        raise ValueError(f"k = {k} outside [0, n]")
    if comb(kernel.n, k) > budget:
        raise BudgetExceededError(f"C({kernel.n}, {k}) subsets exceed the budget of {budget}")
    return _table(_subset_dets(kernel, k))


def exact_ndpp_table(kernel: LowRankKernel, budget=NDPP_BUDGET) -> ExactTable:
    if 2**kernel.n > budget:
        raise BudgetExceededError(f"2^{kernel.n} subsets exceed the budget of {budget}")
    # sizes above the rank d have zero determinant
    top = min(kernel.n, kernel.d)
    return _table(piece for k in range(top + 1) for piece in _subset_dets(kernel, k))


def empirical_distribution(samples) -> dict:
    """Relative frequencies of subsets (any iterables of indices)."""
    counts = Counter(tuple(sorted(int(a) for a in s)) for s in samples)
    total = sum(counts.values())
    return {s: c / total for s, c in counts.items()}


def _as_mapping(p):
    if isinstance(p, ExactTable):
        return p.entries
    if isinstance(p, Counter):
        total = sum(p.values())
        return {s: c / total for s, c in p.items()}
    return p


def tv_distance(p, q) -> float:
    """``max_S |p(S) - q(S)|`` over the union of both supports."""
    p, q = _as_mapping(p), _as_mapping(q)
    keys = set(p) | set(q)
    if not keys:
        return 0.0
    return max(abs(p.get(s, 0.0) - q.get(s, 0.0)) for s in keys)


def psrf(chains) -> float:
    """Gelman-Rubin potential scale reduction factor.

    ``chains`` is an (m, n) array: m >= 2 chains of a scalar statistic, each
    of length n >= 2.
    """
    x = np.asarray(chains, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2 or x.shape[1] < 2:
        raise ValueError("need at least 2 chains of length at least 2")
    n = x.shape[1]
    W = x.var(axis=1, ddof=1).mean()
    B = n * x.mean(axis=1).var(ddof=1)
    if W <= 0:
        return float("inf") if B > 0 else float("nan")
    return float(np.sqrt(((n - 1) / n * W + B / n) / W))


def _pairs_outside(n, A, budget):
    rest = np.setdiff1d(np.arange(n), np.asarray(A, dtype=np.intp))
    if rest.size < 2:
        raise ValueError("fewer than two items outside A")
    if comb(rest.size, 2) > budget:
        raise BudgetExceededError(f"C({rest.size}, 2) pairs exceed the budget of {budget}")
    i, j = np.triu_indices(rest.size, 1)
    return np.stack([rest[i], rest[j]], axis=1)


def kappa_bound(kernel: LowRankKernel, A=(), budget=PAIR_BUDGET):
    """``(kappa_A, (1 + sigma_max(X)^2 kappa_A)^2)`` by enumerating pairs.

    A vanishing denominator gives ``kappa_A = bound = inf``.
    """
    pairs = _pairs_outside(kernel.n, A, budget)
    WA = condition_inner(kernel, kernel.W, A).WA
    num = np.linalg.norm(WA - WA.T, 2)
    XY = kernel.X[pairs]
    G = XY @ (WA + WA.T) @ np.swapaxes(XY, -1, -2)
    den = np.linalg.eigvalsh(G)[:, 0].min()
    scale = max(1.0, float(np.abs(G).max()))
    smax = np.linalg.norm(kernel.X, 2)
    if den <= EPS_EIG * scale:
        return float("inf"), float("inf")
    kappa = float(num / den)
    return kappa, float((1.0 + smax**2 * kappa) ** 2)


def expected_proposals(kernel: LowRankKernel, A=(), budget=PAIR_BUDGET) -> float:
    """Mean number of proposals per accepted pair, by enumeration:
    ``sum_Y det([X What X^T]_Y) / sum_Y det([X W^A X^T]_Y)`` over pairs
    outside A.  The mean rejection count is this minus one.
    """
    pairs = _pairs_outside(kernel.n, A, budget)
    WA = condition_inner(kernel, kernel.W, A).WA
    What = symmetrize_proposal(WA)
    XY = kernel.X[pairs]
    XYt = np.swapaxes(XY, -1, -2)
    target = np.linalg.det(XY @ WA @ XYt).sum()
    proposal = np.linalg.det(XY @ What @ XYt).sum()
    if target <= 0:
        raise NumericalError("no pair outside A has positive mass")
    return float(proposal / target)
