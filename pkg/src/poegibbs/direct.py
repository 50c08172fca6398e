"""Exact, non-iterative samplers for invertible and tree-structured models.

When K is square and invertible the pushforward of independent factor draws
U_i ~ phi_i through X = K^{-1}U is an exact draw from the product model, and
each row projection (KX)_i keeps the marginal phi_i. Tree priors over edge
differences extended by a factor on the node sum admit the same trick with a
linear-time solve along the tree instead of a factorization.
"""
from __future__ import annotations

import numpy as np
from scipy.linalg import solve_triangular

from . import linops


class DirectedTree:
    """Rooted tree on nodes 0..n-1 given as a parent array.

    parents[0] must be -1 (the root); every other node names its parent.
    Edge k connects parents[k+1] -> k+1, so per-edge data is indexed by
    child node minus one. The preorder visits parents before children.
    """

    def __init__(self, parents):
        parents = np.asarray(parents, dtype=np.int64)
        n = parents.size
        if n < 1 or parents[0] != -1:
            raise ValueError("invalid-argument: parents[0] must be -1 for the root")
        if n > 1 and (np.any(parents[1:] < 0) or np.any(parents[1:] >= n)):
            raise ValueError("invalid-argument: parent indices out of range")
        if np.any(parents[1:] == np.arange(1, n)):
            raise ValueError("invalid-argument: a node cannot be its own parent")
        self.parents = parents
        self.n = n
        children = [[] for _ in range(n)]
        for c in range(1, n):
            children[parents[c]].append(c)
        order = np.empty(n, dtype=np.int64)
        stack = [0]
        k = 0
        while stack:
            v = stack.pop()
            order[k] = v
            k += 1
            stack.extend(reversed(children[v]))
        if k != n:
            raise ValueError("invalid-argument: parent array does not form a tree")
        self.preorder = order

    @property
    def edges(self):
        return [(int(self.parents[c]), c) for c in range(1, self.n)]


def tree_solve(tree, u0, u_edges):
    """Invert the sum-plus-differences system on a tree.

    Solves sum_i x_i = u0 and x_child - x_parent = u_edge for every edge.
    u_edges is indexed by child node minus one; leading axes batch
    independent right-hand sides. Exact in n-1 additions per solve.
    """
    u0 = np.asarray(u0, dtype=float)
    u_edges = np.asarray(u_edges, dtype=float)
    if u_edges.shape[-1:] != (tree.n - 1,) and tree.n > 1:
        raise ValueError("invalid-argument: one edge value per non-root node")
    batch = np.broadcast_shapes(u0.shape, u_edges.shape[:-1])
    z = np.zeros(batch + (tree.n,))
    for j in tree.preorder[1:]:
        z[..., j] = z[..., tree.parents[j]] + u_edges[..., j - 1]
    x1 = (u0 - z.sum(axis=-1)) / tree.n
    return x1[..., None] + z


def sample_tree_prior(tree, phi0, phi_edges, rng, size=None):
    """Exact draw(s) from the tree prior extended by phi0 on the node sum.

    phi_edges is one factor per edge (child order) or a single factor shared
    by all edges. Returns shape (n,) or (size, n).
    """
    u0 = phi0.sample(rng, size)
    shape = () if size is None else (size,)
    if isinstance(phi_edges, (list, tuple)):
        if len(phi_edges) != tree.n - 1:
            raise ValueError("invalid-argument: one factor per edge")
        if tree.n == 1:
            u = np.zeros(shape + (0,))
        else:
            u = np.stack([f.sample(rng, size) for f in phi_edges], axis=-1)
    else:
        u = phi_edges.sample(rng, shape + (tree.n - 1,))
    return tree_solve(tree, u0, u)


def _solve_square(K, u):
    """Solve K x = u for batched right-hand sides u of shape (..., n)."""
    if hasattr(K, "solve"):
        return K.solve(u)
    Kd = linops.to_dense(K) if isinstance(K, linops.LinearOperator) else np.asarray(K, dtype=float)
    if Kd.ndim != 2 or Kd.shape[0] != Kd.shape[1]:
        raise ValueError("invalid-argument: K must be square")
    n = Kd.shape[0]
    flat = u.reshape(-1, n).T
    lower = np.all(Kd[np.triu_indices(n, 1)] == 0)
    upper = np.all(Kd[np.tril_indices(n, -1)] == 0)
    if lower or upper:
        if np.any(np.diag(Kd) == 0):
            raise ValueError("invalid-argument: singular K")
        x = solve_triangular(Kd, flat, lower=lower)
    else:
        try:
            x = np.linalg.solve(Kd, flat)
        except np.linalg.LinAlgError as e:
            raise ValueError("invalid-argument: singular K") from e
        if not np.all(np.isfinite(x)):
            raise ValueError("invalid-argument: singular K")
    return x.T.reshape(u.shape)


def sample_complete(K, row_factors, rng, size=None):
    """Exact draw(s) from a complete model with square invertible K.

    Draws U_i ~ phi_i independently and solves K X = U; the row projections
    (KX)_i retain the factor marginals exactly. Triangular matrices use a
    substitution solve.
    """
    n = K.n if isinstance(K, linops.LinearOperator) else np.asarray(K).shape[0]
    if len(row_factors) != n:
        raise ValueError("invalid-argument: one factor per row")
    u = np.stack([f.sample(rng, size) for f in row_factors], axis=-1)
    return _solve_square(K, u)
