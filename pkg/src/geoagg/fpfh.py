"""Fast Point Feature Histograms with reference-point subsampling.

Descriptors are computed on a farthest-point-sampled reference subset and
lifted back to every input point through its nearest reference point.
Each descriptor is 33-dimensional (three 11-bin angle histograms) and rows
are L2-normalized.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import breadth_first_order, connected_components, minimum_spanning_tree

from .cloud import (CloudError, NeighborIndex, _as_xyz, fps_sample,
                    normals_from_neighborhoods, orient_by_largest_component)

N_BINS = 11
FPFH_DIM = 3 * N_BINS
# floor applied to neighbor distances used as weights
MIN_WEIGHT_DIST = 1e-8
_CHUNK = 4096
# below this |cos| a normal is treated as tangent to the outward direction
_FLAT_COS = 1e-6


class FpfhError(ValueError):
    pass


@dataclass(frozen=True)
class FpfhParams:
    m_ref: int = 512
    k3: int = 32
    k4: int = 100
    r1: float = 0.04
    r2: float = 0.08

    def __post_init__(self):
        if self.m_ref < 3 or self.m_ref < self.k3:
            raise FpfhError(f"m_ref={self.m_ref} must be >= 3 and >= k3={self.k3}")
        if self.k3 < 3 or self.k4 < 1:
            raise FpfhError(f"need k3 >= 3 and k4 >= 1, got k3={self.k3} k4={self.k4}")
        if not (self.r2 >= self.r1 > 0):
            raise FpfhError(f"radii must satisfy r2 >= r1 > 0, got r1={self.r1} r2={self.r2}")


def darboux_angles(p_s, n_s, p_t, n_t):
    """(alpha, phi, theta) between a source point and target neighbors.

    ``p_t`` and ``n_t`` may hold several targets as rows. Pairs whose
    displacement is zero or parallel to the source normal come back as NaN.
    """
    p_t = np.atleast_2d(p_t)
    n_t = np.atleast_2d(n_t)
    d = p_t - p_s
    dist = np.linalg.norm(d, axis=1)
    u = np.broadcast_to(n_s, d.shape)
    v = np.cross(d, u)
    vnorm = np.linalg.norm(v, axis=1)
    ok = (dist > 0) & (vnorm > 1e-12 * np.maximum(dist, 1e-300))
    with np.errstate(invalid="ignore", divide="ignore"):
        v = v / vnorm[:, None]
        w = np.cross(u, v)
        alpha = np.sum(v * n_t, axis=1)
        phi = (d @ n_s) / dist
        theta = np.arctan2(np.sum(w * n_t, axis=1), n_t @ n_s)
    # -pi and pi are the same angle; keep a signed zero from picking the bin
    theta = np.where(theta <= -np.pi + 1e-9, np.pi, theta)
    angles = np.stack([alpha, phi, theta], axis=1)
    angles[~ok] = np.nan
    return angles


def _bin(values, lo, hi):
    idx = np.floor((values - lo) / (hi - lo) * N_BINS).astype(np.int64)
    return np.clip(idx, 0, N_BINS - 1)


def compute_spfh(point: int, neighbors, coords, normals) -> np.ndarray:
    """Simplified point feature histogram of ``point`` against ``neighbors``.

    Each of the three angle histograms carries mass 1/3, so the 33-vector
    sums to one. Degenerate pairs are skipped.
    """
    coords = _as_xyz(coords)
    normals = np.asarray(normals, dtype=np.float64)
    neighbors = np.asarray(neighbors, dtype=np.int64)
    if neighbors.size == 0:
        raise FpfhError(f"point {point} has no neighbors")
    ang = darboux_angles(coords[point], normals[point], coords[neighbors], normals[neighbors])
    ang = ang[~np.isnan(ang).any(axis=1)]
    if ang.shape[0] == 0:
        raise FpfhError(f"all neighbor pairs of point {point} are degenerate")
    hist = np.zeros(FPFH_DIM)
    for j, (lo, hi) in enumerate([(-1.0, 1.0), (-1.0, 1.0), (-np.pi, np.pi)]):
        np.add.at(hist, j * N_BINS + _bin(ang[:, j], lo, hi), 1.0)
    return hist / (3.0 * ang.shape[0])


def _orient_consistently(ref_pts, normals, hoods):
    # Orientation must be rigid-equivariant for the angles to be invariant.
    # Per connected piece of the reference graph, the normal most aligned with
    # the outward direction from the piece's centroid fixes the sign, which
    # then spreads along a spanning tree that prefers nearly parallel
    # normals. Flat pieces have no outward side and fall back to the centroid
    # of all reference points, then to the component rule.
    m = ref_pts.shape[0]
    rows = np.repeat(np.arange(m), [nb.size for nb in hoods])
    cols = np.concatenate(hoods) if m else np.zeros(0, dtype=np.int64)
    align = np.abs(np.sum(normals[rows] * normals[cols], axis=1))
    graph = coo_matrix((1.0 + 1e-9 - align, (rows, cols)), shape=(m, m)).tocsr()
    graph = graph.maximum(graph.T)
    n_comp, comp = connected_components(graph, directed=False)
    tree = minimum_spanning_tree(graph)
    tree = tree.maximum(tree.T)

    centroids = np.zeros((n_comp, 3))
    np.add.at(centroids, comp, ref_pts)
    centroids /= np.bincount(comp, minlength=n_comp)[:, None]
    radial = ref_pts - centroids[comp]
    cos = np.sum(radial * normals, axis=1) / (np.linalg.norm(radial, axis=1) + 1e-300)
    overall = ref_pts - ref_pts.mean(axis=0)
    fallback = orient_by_largest_component(normals)

    out = normals.copy()
    for c in range(n_comp):
        members = np.flatnonzero(comp == c)
        seed = members[np.argmax(np.abs(cos[members]))]
        if abs(cos[seed]) > _FLAT_COS:
            out[seed] = normals[seed] * np.sign(cos[seed])
        else:
            dot = overall[seed] @ normals[seed]
            if abs(dot) > _FLAT_COS * np.linalg.norm(overall[seed]):
                out[seed] = normals[seed] * np.sign(dot)
            else:
                out[seed] = fallback[seed]
        order, pred = breadth_first_order(tree, seed, directed=False)
        for node in order[1:]:
            if out[node] @ out[pred[node]] < 0:
                out[node] = -out[node]
    return out


def _in_radius_neighbors(index, pts, k, r, what, ref_idx):
    idx = np.arange(pts.shape[0])
    lists = index.knn_within(pts, k, r, exclude=idx)
    for i, nb in enumerate(lists):
        if nb.size < 3:
            raise FpfhError(f"reference point {i} (cloud point {ref_idx[i]}) has {nb.size} "
                            f"neighbors within radius {r} for {what} (need at least 3)")
    return lists


def compute_fpfh(cloud, params: FpfhParams, start: int = 0,
                 return_reference: bool = False):
    """FPFH descriptor for every point of ``cloud``.

    Reference points are chosen by FPS from ``start``. Reference normals use
    up to ``k3`` reference neighbors within ``r1``; reference SPFHs use up to
    ``k4`` reference neighbors within ``r2``. Each input point takes the SPFH
    of its nearest reference point plus the inverse-distance weighted mean of
    the SPFHs of that reference point's neighbors, distances measured from the
    input point itself.
    """
    pts = _as_xyz(cloud)
    n = pts.shape[0]
    if n < params.m_ref:
        raise FpfhError(f"cloud has {n} points, fewer than m_ref={params.m_ref}")
    try:
        ref_idx = fps_sample(pts, params.m_ref, start=start)
    except CloudError as exc:
        raise FpfhError(str(exc)) from exc
    ref = pts[ref_idx]
    ref_index = NeighborIndex(ref)

    normal_nbrs = _in_radius_neighbors(ref_index, ref, params.k3, params.r1, "normals", ref_idx)
    # the normal neighborhood includes the reference point itself
    hoods = [np.concatenate([[i], nb]) for i, nb in enumerate(normal_nbrs)]
    normals = normals_from_neighborhoods(ref, hoods, centers=ref_idx)

    feat_nbrs = _in_radius_neighbors(ref_index, ref, params.k4, params.r2, "FPFH", ref_idx)
    normals = _orient_consistently(ref, normals, feat_nbrs)
    spfh = np.stack([compute_spfh(i, nb, ref, normals) for i, nb in enumerate(feat_nbrs)])

    k_max = max(nb.size for nb in feat_nbrs)
    padded = np.zeros((len(feat_nbrs), k_max), dtype=np.int64)
    valid = np.zeros((len(feat_nbrs), k_max), dtype=bool)
    for i, nb in enumerate(feat_nbrs):
        padded[i, :nb.size] = nb
        valid[i, :nb.size] = True

    nearest = ref_index.knn_batch(pts, 1)[:, 0]
    out = np.empty((n, FPFH_DIM))
    for lo in range(0, n, _CHUNK):
        hi = min(lo + _CHUNK, n)
        owner = nearest[lo:hi]
        nb, ok = padded[owner], valid[owner]
        dist = np.linalg.norm(ref[nb] - pts[lo:hi, None, :], axis=2)
        inv_w = np.where(ok, 1.0 / np.maximum(dist, MIN_WEIGHT_DIST), 0.0)
        weighted = np.einsum("pk,pkd->pd", inv_w, spfh[nb])
        out[lo:hi] = spfh[owner] + weighted / ok.sum(axis=1, keepdims=True)
    out /= np.linalg.norm(out, axis=1, keepdims=True)
    if return_reference:
        return out, ref_idx, normals
    return out
