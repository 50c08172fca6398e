"""Matrix-free linear operators for product-of-experts models.

Every operator acts on the last axis of its input, so batches of vectors
stream through as ``(..., n)`` arrays and come out as ``(..., m)``.
``apply_adjoint`` is the exact transpose of ``apply`` (checked in tests via
the inner-product identity), and ``sq_adjoint_diag(weights)`` returns
``diag(K^T diag(weights) K)`` for operators with enough structure to
support it.
"""
from __future__ import annotations

import numpy as np
import scipy.fft


class UnsupportedOperatorError(ValueError):
    """The operator cannot provide the requested structure (unsupported-operator)."""


class LinearOperator:
    """Base class. Subclasses set ``m`` (rows), ``n`` (columns), ``kind``."""

    kind = "abstract"
    m: int
    n: int

    def apply(self, x):
        """Map ``(..., n)`` to ``(..., m)``."""
        raise NotImplementedError

    def apply_adjoint(self, y):
        """Map ``(..., m)`` to ``(..., n)``; exact transpose of ``apply``."""
        raise NotImplementedError

    def sq_adjoint_diag(self, weights):
        """diag(K^T diag(weights) K) for row weights of shape ``(..., m)``."""
        raise UnsupportedOperatorError(
            f"unsupported-operator: {self.kind} has no structured squared diagonal"
        )

    def __repr__(self):
        return f"<{type(self).__name__} {self.m}x{self.n}>"


class Identity(LinearOperator):
    kind = "identity"

    def __init__(self, n):
        self.m = self.n = int(n)

    def apply(self, x):
        return np.asarray(x, dtype=float)

    def apply_adjoint(self, y):
        return np.asarray(y, dtype=float)

    def sq_adjoint_diag(self, weights):
        return np.asarray(weights, dtype=float)


class MeanRow(LinearOperator):
    """Single row (1/n, ..., 1/n); appended to make improper models proper."""

    kind = "mean-row"

    def __init__(self, n):
        self.n = int(n)
        self.m = 1

    def apply(self, x):
        x = np.asarray(x, dtype=float)
        return x.mean(axis=-1, keepdims=True)

    def apply_adjoint(self, y):
        y = np.asarray(y, dtype=float)
        return np.repeat(y / self.n, self.n, axis=-1)

    def sq_adjoint_diag(self, weights):
        w = np.asarray(weights, dtype=float)
        return np.repeat(w / self.n**2, self.n, axis=-1)


class Scaled(LinearOperator):
    """scale * base; used to absorb the prior strength into the operator."""

    kind = "scaled"

    def __init__(self, base, scale):
        self.base = base
        self.scale = float(scale)
        self.m = base.m
        self.n = base.n

    def apply(self, x):
        return self.scale * self.base.apply(x)

    def apply_adjoint(self, y):
        return self.scale * self.base.apply_adjoint(y)

    def sq_adjoint_diag(self, weights):
        return self.scale**2 * self.base.sq_adjoint_diag(weights)


class Stacked(LinearOperator):
    """Vertical stack of operators sharing the same input dimension."""

    kind = "stacked"

    def __init__(self, blocks):
        blocks = list(blocks)
        if not blocks:
            raise ValueError("invalid-argument: empty stack")
        n = blocks[0].n
        for b in blocks:
            if b.n != n:
                raise ValueError("invalid-argument: stacked blocks disagree on n")
        self.blocks = blocks
        self.n = n
        self.m = sum(b.m for b in blocks)
        self.offsets = np.cumsum([0] + [b.m for b in blocks])

    def apply(self, x):
        return np.concatenate([b.apply(x) for b in self.blocks], axis=-1)

    def apply_adjoint(self, y):
        y = np.asarray(y, dtype=float)
        out = 0.0
        for b, lo, hi in zip(self.blocks, self.offsets[:-1], self.offsets[1:]):
            out = out + b.apply_adjoint(y[..., lo:hi])
        return out

    def sq_adjoint_diag(self, weights):
        w = np.asarray(weights, dtype=float)
        out = 0.0
        for b, lo, hi in zip(self.blocks, self.offsets[:-1], self.offsets[1:]):
            out = out + b.sq_adjoint_diag(w[..., lo:hi])
        return out


class Grad2dCirc(LinearOperator):
    """Circular 2-D forward differences on an h x w grid, row-major pixels.

    Output rows: first the h*w horizontal differences
    x[i, (j+1) mod w] - x[i, j], then the h*w vertical differences
    x[(i+1) mod h, j] - x[i, j], each block in row-major pixel order.
    """

    kind = "finite-difference-2D-circular"

    def __init__(self, h, w):
        self.h = int(h)
        self.w = int(w)
        self.n = self.h * self.w
        self.m = 2 * self.n

    def _grid(self, x):
        x = np.asarray(x, dtype=float)
        return x.reshape(x.shape[:-1] + (self.h, self.w))

    def apply(self, x):
        xi = self._grid(x)
        dh = np.roll(xi, -1, axis=-1) - xi
        dv = np.roll(xi, -1, axis=-2) - xi
        batch = xi.shape[:-2]
        return np.concatenate(
            [dh.reshape(batch + (self.n,)), dv.reshape(batch + (self.n,))], axis=-1
        )

    def apply_adjoint(self, y):
        y = np.asarray(y, dtype=float)
        batch = y.shape[:-1]
        yh = y[..., : self.n].reshape(batch + (self.h, self.w))
        yv = y[..., self.n :].reshape(batch + (self.h, self.w))
        out = (np.roll(yh, 1, axis=-1) - yh) + (np.roll(yv, 1, axis=-2) - yv)
        return out.reshape(batch + (self.n,))

    def sq_adjoint_diag(self, weights):
        w = np.asarray(weights, dtype=float)
        batch = w.shape[:-1]
        wh = w[..., : self.n].reshape(batch + (self.h, self.w))
        wv = w[..., self.n :].reshape(batch + (self.h, self.w))
        out = np.zeros(batch + (self.h, self.w))
        # a size-1 circular axis makes that difference row identically zero
        if self.w > 1:
            out += wh + np.roll(wh, 1, axis=-1)
        if self.h > 1:
            out += wv + np.roll(wv, 1, axis=-2)
        return out.reshape(batch + (self.n,))


class Dct2d(LinearOperator):
    """Orthonormal 2-D DCT-II on an h x w grid, row-major pixels."""

    kind = "dct-2D-orthonormal"

    def __init__(self, h, w):
        self.h = int(h)
        self.w = int(w)
        self.n = self.m = self.h * self.w

    def apply(self, x):
        x = np.asarray(x, dtype=float)
        xi = x.reshape(x.shape[:-1] + (self.h, self.w))
        out = scipy.fft.dctn(xi, type=2, norm="ortho", axes=(-2, -1))
        return out.reshape(x.shape)

    def apply_adjoint(self, y):
        y = np.asarray(y, dtype=float)
        yi = y.reshape(y.shape[:-1] + (self.h, self.w))
        out = scipy.fft.idctn(yi, type=2, norm="ortho", axes=(-2, -1))
        return out.reshape(y.shape)


class RowSelection(LinearOperator):
    """Keeps a subset of rows of a base operator (e.g. observed DCT bands)."""

    kind = "row-selection"

    def __init__(self, base, rows):
        self.base = base
        self.rows = np.asarray(rows, dtype=int)
        if self.rows.ndim != 1:
            raise ValueError("invalid-argument: rows must be a 1-D index array")
        if self.rows.size and (self.rows.min() < 0 or self.rows.max() >= base.m):
            raise ValueError("invalid-argument: row index out of range")
        self.m = self.rows.size
        self.n = base.n

    def apply(self, x):
        return self.base.apply(x)[..., self.rows]

    def apply_adjoint(self, y):
        y = np.asarray(y, dtype=float)
        full = np.zeros(y.shape[:-1] + (self.base.m,))
        full[..., self.rows] = y
        return self.base.apply_adjoint(full)

    def sq_adjoint_diag(self, weights):
        w = np.asarray(weights, dtype=float)
        if isinstance(self.base, Identity):
            out = np.zeros(w.shape[:-1] + (self.n,))
            out[..., self.rows] = w
            return out
        if isinstance(self.base, DenseSmall):
            sq = self.base.mat[self.rows] ** 2
            return np.einsum("...m,mn->...n", w, sq)
        raise UnsupportedOperatorError(
            "unsupported-operator: row-selection over "
            f"{self.base.kind} has no structured squared diagonal"
        )


class DenseSmall(LinearOperator):
    """Explicit dense matrix; for small models and tests."""

    kind = "dense-small"

    def __init__(self, mat):
        self.mat = np.atleast_2d(np.asarray(mat, dtype=float))
        self.m, self.n = self.mat.shape

    def apply(self, x):
        return np.asarray(x, dtype=float) @ self.mat.T

    def apply_adjoint(self, y):
        return np.asarray(y, dtype=float) @ self.mat

    def sq_adjoint_diag(self, weights):
        w = np.asarray(weights, dtype=float)
        return np.einsum("...m,mn->...n", w, self.mat**2)


def grad2d_circ(h, w):
    """Circular 2-D difference operator (2*h*w rows, h*w columns)."""
    return Grad2dCirc(h, w)


def to_dense(op):
    """Materialize the (m, n) matrix by pushing basis vectors through apply."""
    return np.ascontiguousarray(op.apply(np.eye(op.n)).T)


def has_full_column_rank(op):
    """Dense rank check; intended for small models only."""
    if op.n > 4096:
        raise ValueError("invalid-argument: rank check is for small operators")
    return np.linalg.matrix_rank(to_dense(op)) == op.n
