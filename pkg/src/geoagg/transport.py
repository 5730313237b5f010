"""Entropic optimal transport and the normalization kernels built on it.

``sinkhorn_plan`` solves the regularized transport problem with prescribed
marginals, optionally restricted to a sparse support given as (row, col)
pairs. ``sh_normalize`` is the marginal-free alternating normalization used to
turn similarity matrices into mixing weights, and ``softmax_rows`` is the
usual stabilized row softmax.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class TransportError(ValueError):
    pass


def normalize_marginal(w, name: str = "marginal") -> np.ndarray:
    """Validate a nonnegative weight vector and rescale it to sum to one."""
    w = np.asarray(w, dtype=np.float64).ravel()
    if w.size == 0 or np.any(w < 0) or not np.all(np.isfinite(w)):
        raise TransportError(f"{name} must be a non-empty, finite, nonnegative vector")
    total = w.sum()
    if total <= 0:
        raise TransportError(f"{name} has zero total mass")
    return w / total


@dataclass
class Coupling:
    """Transport plan stored as COO triplets over its support.

    Off-support entries are exactly zero. ``row_residual`` and
    ``col_residual`` are the L1 distances between the plan's marginals and
    the prescribed ones.
    """

    shape: tuple[int, int]
    rows: np.ndarray
    cols: np.ndarray
    values: np.ndarray
    row_residual: float = 0.0
    col_residual: float = 0.0
    n_iter: int = 0

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        out[self.rows, self.cols] = self.values
        return out

    def row_sums(self) -> np.ndarray:
        return np.bincount(self.rows, weights=self.values, minlength=self.shape[0])

    def col_sums(self) -> np.ndarray:
        return np.bincount(self.cols, weights=self.values, minlength=self.shape[1])

    def cost(self, cost_values: np.ndarray) -> float:
        """Transport cost for costs given per support entry."""
        return float(np.dot(self.values, cost_values))


def _support_pairs(shape, support):
    n, m = shape
    if support is None:
        rows, cols = np.divmod(np.arange(n * m), m)
        return rows, cols
    if isinstance(support, tuple):
        rows = np.asarray(support[0], dtype=np.int64)
        cols = np.asarray(support[1], dtype=np.int64)
        if rows.shape != cols.shape:
            raise TransportError("support row and column arrays differ in length")
        return rows, cols
    mask = np.asarray(support, dtype=bool)
    if mask.shape != (n, m):
        raise TransportError(f"support mask shape {mask.shape} != cost shape {shape}")
    return np.nonzero(mask)


def sinkhorn_plan(cost, row_marginal, col_marginal, eps: float = 1.0, iters: int = 5,
                  support=None, tol: float | None = None) -> Coupling:
    """Entropic OT plan ``diag(u) exp(-cost/eps) diag(v)`` by Sinkhorn scaling.

    Parameters
    ----------
    cost : array, shape (n, m) or (nnz,)
        Dense cost matrix, or one cost per support entry when ``support`` is a
        ``(rows, cols)`` pair. Dense entries may be ``+inf`` to forbid a pair.
    row_marginal, col_marginal : array
        Target marginals; renormalized to unit mass.
    eps : float
        Entropic regularization strength.
    iters : int
        Maximum number of (row, column) scaling rounds.
    support : None, bool mask (n, m) or (rows, cols) tuple
        Entries allowed to carry mass. ``None`` means dense.
    tol : float, optional
        Stop early once the row-marginal L1 residual drops below ``tol``.
    """
    if not eps > 0:
        raise TransportError(f"eps must be positive, got {eps}")
    a = normalize_marginal(row_marginal, "row marginal")
    b = normalize_marginal(col_marginal, "column marginal")
    n, m = a.size, b.size
    cost = np.asarray(cost, dtype=np.float64)

    if isinstance(support, tuple):
        rows, cols = _support_pairs((n, m), support)
        c = cost.ravel()
        if c.shape != rows.shape:
            raise TransportError("sparse cost must give one value per support entry")
    else:
        if cost.shape != (n, m):
            raise TransportError(f"cost shape {cost.shape} != ({n}, {m})")
        rows, cols = _support_pairs((n, m), support)
        c = cost[rows, cols]
        finite = np.isfinite(c)
        if not np.all(finite | (c == np.inf)):
            raise TransportError("cost has NaN or -inf entries")
        rows, cols, c = rows[finite], cols[finite], c[finite]
    if not np.all(np.isfinite(c)):
        raise TransportError("cost must be finite on the support")

    row_count = np.bincount(rows, minlength=n)
    col_count = np.bincount(cols, minlength=m)
    if np.any(row_count == 0):
        raise TransportError(f"support row {int(np.argmin(row_count))} is empty")
    if np.any(col_count == 0):
        raise TransportError(f"support column {int(np.argmin(col_count))} is empty")

    # per-row max subtraction of -cost/eps, absorbed by the row scaling
    row_min = np.full(n, np.inf)
    np.minimum.at(row_min, rows, c)
    kernel = np.exp(-(c - row_min[rows]) / eps)
    col_mass = np.bincount(cols, weights=kernel, minlength=m)
    if np.any(col_mass <= 0):
        raise TransportError(
            f"kernel column {int(np.argmin(col_mass))} underflowed to zero; use a larger eps")

    u = np.ones(n)
    v = np.ones(m)
    done = 0
    row_res = np.inf
    for done in range(1, iters + 1):
        kv = np.bincount(rows, weights=kernel * v[cols], minlength=n)
        u = a / kv
        ktu = np.bincount(cols, weights=kernel * u[rows], minlength=m)
        v = b / ktu
        if tol is not None:
            vals = u[rows] * kernel * v[cols]
            row_res = np.abs(np.bincount(rows, weights=vals, minlength=n) - a).sum()
            if row_res <= tol:
                break

    values = u[rows] * kernel * v[cols]
    plan = Coupling((n, m), rows, cols, values, n_iter=done)
    plan.row_residual = float(np.abs(plan.row_sums() - a).sum())
    plan.col_residual = float(np.abs(plan.col_sums() - b).sum())
    return plan


def sh_normalize(sim, iters: int = 5) -> np.ndarray:
    """Alternating row/column normalization of ``exp(sim)``.

    Each round normalizes rows to sum one, then columns to sum one, so the
    result ends on a column step. ``iters=0`` returns ``exp(sim)``.
    """
    sim = np.asarray(sim, dtype=np.float64)
    if iters <= 0:
        return np.exp(sim)
    # the per-row shift is removed by the first row normalization
    k = np.exp(sim - sim.max(axis=1, keepdims=True))
    for _ in range(iters):
        k = k / k.sum(axis=1, keepdims=True)
        k = k / k.sum(axis=0, keepdims=True)
    return k


def softmax_rows(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    e = np.exp(m - m.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)
