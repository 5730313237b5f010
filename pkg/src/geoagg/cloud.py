"""Point-cloud container, exact neighbor search, farthest point sampling and
normal estimation.

All neighbor queries are exact: candidates come from a ``scipy`` kd-tree but
the final ordering is recomputed from float64 Euclidean distances and ties are
broken by ascending point index, so results agree with a brute-force scan.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

# Relative slack used when deciding whether kd-tree candidates are unambiguous.
_REL_SLACK = 1e-9
_ABS_SLACK = 1e-12


class CloudError(ValueError):
    """Raised for invalid clouds or query arguments."""


@dataclass(frozen=True)
class PointCloud:
    """N x 3 float32 coordinates with optional per-point integer labels."""

    coords: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        coords = np.ascontiguousarray(self.coords, dtype=np.float32)
        if coords.ndim != 2 or coords.shape[1] != 3:
            raise CloudError(f"coords must be (N, 3), got {coords.shape}")
        if coords.shape[0] < 1:
            raise CloudError("point cloud is empty")
        if not np.all(np.isfinite(coords)):
            raise CloudError("point cloud has non-finite coordinates")
        object.__setattr__(self, "coords", coords)
        if self.labels is not None:
            labels = np.asarray(self.labels)
            if labels.shape != (coords.shape[0],):
                raise CloudError(
                    f"labels must have length {coords.shape[0]}, got {labels.shape}")
            if labels.size and labels.min() < 0:
                raise CloudError("labels must be non-negative")
            object.__setattr__(self, "labels", labels.astype(np.int64))

    @property
    def n(self) -> int:
        return self.coords.shape[0]

    def xyz(self) -> np.ndarray:
        """Coordinates as float64, the precision every computation runs in."""
        return self.coords.astype(np.float64)


def _as_xyz(points) -> np.ndarray:
    if isinstance(points, PointCloud):
        return points.xyz()
    return np.asarray(points, dtype=np.float64)


def point_distances(points: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Euclidean distances from ``query`` (3,) to every row of ``points``."""
    diff = points - query
    return np.sqrt(np.sum(diff * diff, axis=-1))


def _order(dist: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """Positions sorting by ascending distance, then ascending index."""
    return np.lexsort((idx, dist))


class NeighborIndex:
    """Immutable exact spatial index over a fixed set of 3D points.

    Safe to share between threads once built; every query is read-only.
    """

    def __init__(self, points):
        pts = _as_xyz(points)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise CloudError(f"points must be (N, 3), got {pts.shape}")
        if pts.shape[0] == 0:
            raise CloudError("cannot build an index over an empty cloud")
        self._points = pts
        self._points.setflags(write=False)
        self._tree = cKDTree(pts)

    @property
    def n(self) -> int:
        return self._points.shape[0]

    @property
    def points(self) -> np.ndarray:
        return self._points

    def _check_k(self, k: int, available: int):
        if k < 1 or k > available:
            raise CloudError(f"k={k} is out of range for N={self.n} "
                             f"({available} points available)")

    def _sorted_ball(self, q: np.ndarray, r: float) -> np.ndarray:
        cand = np.asarray(self._tree.query_ball_point(
            q, r * (1 + _REL_SLACK) + _ABS_SLACK), dtype=np.int64)
        if cand.size == 0:
            return cand
        d = point_distances(self._points[cand], q)
        keep = d <= r
        cand, d = cand[keep], d[keep]
        return cand[_order(d, cand)]

    def knn_batch(self, queries, k: int) -> np.ndarray:
        """Exact k nearest neighbors for each query row, shape (M, k)."""
        q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        self._check_k(k, self.n)
        m = q.shape[0]
        out = np.empty((m, k), dtype=np.int64)
        if m == 0:
            return out
        if k == self.n:
            all_idx = np.arange(self.n)
            for row in range(m):
                d = point_distances(self._points, q[row])
                out[row] = all_idx[_order(d, all_idx)]
            return out

        dtree, itree = self._tree.query(q, k + 1)
        dtree = dtree.reshape(m, k + 1)
        itree = itree.reshape(m, k + 1).astype(np.int64)
        # The k-set is unambiguous when the (k+1)-th candidate is clearly farther.
        clear = dtree[:, k] > dtree[:, k - 1] * (1 + _REL_SLACK) + _ABS_SLACK
        cand = itree[clear, :k]
        diff = self._points[cand] - q[clear, None, :]
        d = np.sqrt(np.sum(diff * diff, axis=-1))
        order = np.lexsort((cand, d), axis=-1)
        out[clear] = np.take_along_axis(cand, order, axis=-1)
        for row in np.flatnonzero(~clear):
            out[row] = self._sorted_ball(q[row], dtree[row, k - 1])[:k]
        return out

    def knn(self, query, k: int, exclude_self: bool = False) -> np.ndarray:
        """k nearest neighbors of one query.

        ``query`` is either a 3-vector or an integer point index. With
        ``exclude_self`` an index query drops that point; a coordinate query
        drops the lowest-index point lying exactly at the query, if any.
        """
        if isinstance(query, (int, np.integer)):
            self_idx = int(query)
            if not 0 <= self_idx < self.n:
                raise CloudError(f"query index {self_idx} out of range for N={self.n}")
            q = self._points[self_idx]
        else:
            self_idx = None
            q = np.asarray(query, dtype=np.float64).reshape(3)

        if not exclude_self:
            return self.knn_batch(q, k)[0]

        if self_idx is None:
            nearest = self.knn_batch(q, 1)[0, 0]
            if point_distances(self._points[nearest:nearest + 1], q)[0] == 0.0:
                self_idx = int(nearest)
        if self_idx is None:
            return self.knn_batch(q, k)[0]
        self._check_k(k, self.n - 1)
        res = self.knn_batch(q, k + 1)[0]
        res = res[res != self_idx]
        return res[:k]

    def radius(self, query, r: float) -> np.ndarray:
        """All points within distance ``r`` (inclusive), nearest first."""
        if not r > 0:
            raise CloudError(f"radius must be positive, got {r}")
        q = np.asarray(query, dtype=np.float64).reshape(3)
        return self._sorted_ball(q, float(r))

    def knn_within(self, queries, k: int, r: float,
                   exclude: np.ndarray | None = None) -> list[np.ndarray]:
        """Up to k nearest neighbors per query restricted to distance <= r.

        ``exclude`` optionally gives one point index per query to drop (used
        when the queries are themselves indexed points).
        """
        q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        kk = min(k + (exclude is not None), self.n)
        nbrs = self.knn_batch(q, kk)
        result = []
        for row in range(q.shape[0]):
            cand = nbrs[row]
            if exclude is not None:
                cand = cand[cand != exclude[row]][:k]
            d = point_distances(self._points[cand], q[row])
            result.append(cand[d <= r])
        return result


def build_index(cloud) -> NeighborIndex:
    """Build the exact neighbor index for a cloud (or raw N x 3 array)."""
    return NeighborIndex(cloud)


def knn_query(index: NeighborIndex, query, k: int, exclude_self: bool = False) -> np.ndarray:
    return index.knn(query, k, exclude_self=exclude_self)


def radius_query(index: NeighborIndex, query, r: float) -> np.ndarray:
    return index.radius(query, r)


def fps_sample(cloud, count: int, start: int = 0, return_distances: bool = False):
    """Farthest point sampling.

    Each new sample maximizes the distance to its nearest already-selected
    sample; ties go to the smallest index. With ``return_distances`` the
    selection distance of every step is returned too (``inf`` for ``start``).
    """
    pts = _as_xyz(cloud)
    n = pts.shape[0]
    if not 1 <= count <= n:
        raise CloudError(f"cannot sample {count} points from N={n}")
    if not 0 <= start < n:
        raise CloudError(f"start index {start} out of range for N={n}")

    selected = np.empty(count, dtype=np.int64)
    step_dist = np.empty(count, dtype=np.float64)
    selected[0] = start
    step_dist[0] = np.inf
    min_dist = point_distances(pts, pts[start])
    min_dist[start] = -1.0
    for t in range(1, count):
        nxt = int(np.argmax(min_dist))
        selected[t] = nxt
        step_dist[t] = min_dist[nxt]
        np.minimum(min_dist, point_distances(pts, pts[nxt]), out=min_dist)
        min_dist[selected[:t + 1]] = -1.0
    if return_distances:
        return selected, step_dist
    return selected


def orient_by_largest_component(normals: np.ndarray) -> np.ndarray:
    """Flip rows so their largest-magnitude component is positive."""
    normals = np.asarray(normals, dtype=np.float64)
    lead = np.argmax(np.abs(normals), axis=1)
    sign = np.sign(normals[np.arange(normals.shape[0]), lead])
    sign[sign == 0] = 1.0
    return normals * sign[:, None]


def normals_from_neighborhoods(pts: np.ndarray, neighborhoods, centers=None) -> np.ndarray:
    """Smallest-eigenvector normals for explicit neighborhoods (unoriented).

    ``neighborhoods`` is an (M, k) index array or a sequence of index arrays
    into ``pts``; ``centers`` names the point each neighborhood belongs to,
    for error messages only.
    """
    if isinstance(neighborhoods, np.ndarray) and neighborhoods.ndim == 2:
        local = pts[neighborhoods]
        centered = local - local.mean(axis=1, keepdims=True)
        covs = np.einsum("nki,nkj->nij", centered, centered)
    else:
        covs = np.empty((len(neighborhoods), 3, 3))
        for row, nb in enumerate(neighborhoods):
            centered = pts[nb] - pts[nb].mean(axis=0)
            covs[row] = centered.T @ centered
    flat = ~np.any(covs.reshape(len(covs), -1), axis=1)
    if np.any(flat):
        row = int(np.flatnonzero(flat)[0])
        who = row if centers is None else int(centers[row])
        raise CloudError(f"degenerate neighborhood at point {who}: all neighbors coincide")
    _, vecs = np.linalg.eigh(covs)
    out = vecs[:, :, 0]
    return out / np.linalg.norm(out, axis=1, keepdims=True)


def estimate_normals(cloud, index: NeighborIndex | None = None, k: int = 16) -> np.ndarray:
    """Per-point normals from the covariance of the k nearest neighbors.

    The neighborhood includes the point itself. Normals are oriented so that
    their largest-magnitude component is positive.
    """
    pts = _as_xyz(cloud)
    if k < 3:
        raise CloudError(f"normal estimation needs k >= 3, got {k}")
    if index is None:
        index = NeighborIndex(pts)
    nbrs = index.knn_batch(pts, k)
    normals = normals_from_neighborhoods(pts, nbrs)
    return orient_by_largest_component(normals)
