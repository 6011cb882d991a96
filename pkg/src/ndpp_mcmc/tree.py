"""Binary sample tree over the rows of a feature matrix.

Each node stores ``sum_{a in node} x_a^T x_a`` so that the mass
``<Q, x_a^T x_a>`` of any contiguous group of items can be read off with one
d x d inner product.  Leaves hold up to ``leaf_block`` items ("fat leaves");
inside a leaf the per-item masses are computed directly.

Items are never reordered: the tree is built over consecutive blocks of
``leaf_block`` items and every internal node splits its block range at the
midpoint, the left child taking the extra block when the count is odd.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalError

EPS_MASS = 1e-14
DENSE_LIMIT = 1 << 22  # entries of the all-node mass table
DENSE_FACTOR = 4  # dense table wins while it is at most this much more work than gathers


def default_leaf_block(n: int) -> int:
    return 1 if n < 100_000 else 8


@dataclass(frozen=True, eq=False)
class SampleTree:
    leaf_block: int
    lo: np.ndarray
    hi: np.ndarray
    left: np.ndarray  # -1 at leaves
    right: np.ndarray
    depth: np.ndarray
    agg: np.ndarray  # (num_nodes, d, d)
    leaf_items: np.ndarray  # (num_nodes, leaf_block), -1 padded
    X: np.ndarray

    @property
    def num_nodes(self) -> int:
        return self.lo.shape[0]

    @property
    def root(self) -> np.ndarray:
        return self.agg[0]

    @property
    def is_leaf(self) -> np.ndarray:
        return self.left < 0

    @property
    def height(self) -> int:
        return int(self.depth.max()) + 1


def build_tree(X, leaf_block: int | None = None) -> SampleTree:
    X = np.asarray(X, dtype=np.float64)
    n, d = X.shape
    if n < 1:
        raise ValueError("cannot build a tree over zero items")
    B = default_leaf_block(n) if leaf_block is None else int(leaf_block)
    if B < 1:
        raise ValueError("leaf_block must be >= 1")
    nblocks = -(-n // B)

    # preorder: every parent gets a smaller index than its children
    lo, hi, left, right, depth = [], [], [], [], []
    stack = [(0, nblocks, 0, -1, 0)]
    while stack:
        bl, bh, lvl, parent, side = stack.pop()
        node = len(lo)
        if parent >= 0:
            (left if side == 0 else right)[parent] = node
        lo.append(bl * B)
        hi.append(min(bh * B, n))
        depth.append(lvl)
        left.append(-1)
        right.append(-1)
        if bh - bl > 1:
            mid = bl + (bh - bl + 1) // 2
            stack.append((mid, bh, lvl + 1, node, 1))
            stack.append((bl, mid, lvl + 1, node, 0))

    lo = np.array(lo, dtype=np.intp)
    hi = np.array(hi, dtype=np.intp)
    left = np.array(left, dtype=np.intp)
    right = np.array(right, dtype=np.intp)
    depth = np.array(depth, dtype=np.intp)
    m = lo.shape[0]

    agg = np.empty((m, d, d))
    leaf_items = np.full((m, B), -1, dtype=np.intp)
    leaves = np.flatnonzero(left < 0)
    if B == 1:
        agg[leaves] = X[lo[leaves], :, None] * X[lo[leaves], None, :]
        leaf_items[leaves, 0] = lo[leaves]
    else:
        # leaves are exactly the blocks, in increasing lo order
        blocks = np.zeros((nblocks * B, d))
        blocks[:n] = X
        blocks = blocks.reshape(nblocks, B, d)
        agg[leaves] = np.einsum("bki,bkj->bij", blocks, blocks)
        items = np.arange(nblocks * B).reshape(nblocks, B)
        leaf_items[leaves] = np.where(items < n, items, -1)
    for lvl in range(int(depth.max()) - 1, -1, -1):
        nodes = np.flatnonzero((depth == lvl) & (left >= 0))
        agg[nodes] = agg[left[nodes]] + agg[right[nodes]]

    for a in (lo, hi, left, right, depth, agg, leaf_items):
        a.setflags(write=False)
    Xr = X.copy()
    Xr.setflags(write=False)
    return SampleTree(B, lo, hi, left, right, depth, agg, leaf_items, Xr)


def _masses(Q, mats, shared):
    """<Q_i, mats_i> for per-row Q, or <Q, mats_i> for a shared Q."""
    d = mats.shape[-1]
    if shared:
        return mats.reshape(-1, d * d) @ Q.ravel()
    return np.einsum("nij,nij->n", Q, mats)


def _clamp(mass, scale, what):
    if np.any(mass < -EPS_MASS * scale):
        raise NumericalError(f"negative {what} mass: query matrix is not PSD")
    return np.clip(mass, 0.0, None)


def traverse_batch(tree: SampleTree, Q, rng, size=None) -> np.ndarray:
    """Draw items with Pr(a) = <Q, x_a^T x_a> / <Q, X^T X>.

    ``Q`` is either one d x d PSD matrix (``size`` draws, default 1) or an
    (N, d, d) stack giving one draw per matrix.
    """
    Q = np.asarray(Q, dtype=np.float64)
    shared = Q.ndim == 2
    N = (1 if size is None else size) if shared else Q.shape[0]
    d = tree.X.shape[1]
    rows = np.arange(N)

    qnorm = np.linalg.norm(Q) if shared else np.linalg.norm(Q, axis=(1, 2))
    scale = qnorm * np.linalg.norm(tree.root)
    total = _masses(Q, tree.agg[:1] if shared else np.broadcast_to(tree.root, (N, d, d)), shared)
    if np.any(total <= EPS_MASS * scale):
        raise NumericalError("query matrix puts no mass on the ground set")
    scale = np.broadcast_to(scale, (N,))

    cur = np.zeros(N, dtype=np.intp)
    u = rng.random((N, tree.height))
    m = tree.num_nodes
    flat = tree.agg.reshape(m, d * d)
    dense = None
    # all node masses in one product, unless walking the paths touches far fewer nodes
    gathered = DENSE_FACTOR * 2 * N * max(tree.height - 1, 1)
    if shared and m * d * d <= 16 * DENSE_LIMIT and m <= gathered:
        dense = np.broadcast_to(flat @ Q.ravel(), (N, m))
    elif not shared and N * m <= DENSE_LIMIT and N * m <= gathered:
        dense = Q.reshape(N, d * d) @ flat.T
    for step in range(tree.height - 1):
        idx = np.flatnonzero(tree.left[cur] >= 0)
        if idx.size == 0:
            break
        node = cur[idx]
        lc, rc = tree.left[node], tree.right[node]
        if dense is not None:
            ml, mr = dense[idx, lc], dense[idx, rc]
        else:
            Qi = Q if shared else Q[idx]
            ml = _masses(Qi, tree.agg[lc], shared)
            mr = _masses(Qi, tree.agg[rc], shared)
        ml = _clamp(ml, scale[idx], "node")
        mr = _clamp(mr, scale[idx], "node")
        tot = ml + mr
        if np.any(tot <= 0):
            raise NumericalError("traversal reached a node with zero mass")
        go_left = u[idx, step] * tot < ml
        cur[idx] = np.where(go_left, lc, rc)

    items = tree.leaf_items[cur]
    if tree.leaf_block == 1:
        return items[:, 0].copy()
    valid = items >= 0
    xs = tree.X[np.where(valid, items, 0)]
    if shared:
        mass = np.einsum("nbi,ij,nbj->nb", xs, Q, xs)
    else:
        mass = np.einsum("nbi,nij,nbj->nb", xs, Q, xs)
    mass = _clamp(np.where(valid, mass, 0.0), scale[:, None], "item")
    cum = np.cumsum(mass, axis=1)
    tot = cum[:, -1]
    if np.any(tot <= 0):
        raise NumericalError("traversal reached a leaf with zero mass")
    pick = np.sum(cum <= u[:, -1:] * tot[:, None], axis=1)
    pick = np.minimum(pick, valid.sum(axis=1) - 1)
    return items[rows, pick]


def traverse_sample(tree: SampleTree, Q, rng) -> int:
    return int(traverse_batch(tree, Q, rng)[0])


def item_probabilities(tree: SampleTree, Q) -> np.ndarray:
    """Exact item distribution induced by the traversal for query ``Q``.

    Multiplies the branch probabilities along every root-to-leaf path, so
    it checks the traversal rule rather than the mass formula directly.
    """
    Q = np.asarray(Q, dtype=np.float64)
    node_mass = np.clip(tree.agg.reshape(tree.num_nodes, -1) @ Q.ravel(), 0.0, None)
    reach = np.zeros(tree.num_nodes)
    reach[0] = 1.0
    probs = np.zeros(tree.X.shape[0])
    for node in range(tree.num_nodes):  # preorder: parents first
        if tree.left[node] >= 0:
            l, r = tree.left[node], tree.right[node]
            tot = node_mass[l] + node_mass[r]
            if tot > 0:
                reach[l] = reach[node] * node_mass[l] / tot
                reach[r] = reach[node] * node_mass[r] / tot
        else:
            rows = np.arange(tree.lo[node], tree.hi[node])
            xs = tree.X[rows]
            m = np.clip(np.einsum("bi,ij,bj->b", xs, Q, xs), 0.0, None)
            if m.sum() > 0:
                probs[rows] = reach[node] * m / m.sum()
    return probs
