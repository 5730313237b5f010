"""Feature anchors: joint visual/geometric Mean-Shift, non-maximum
suppression and anchor banks merged across clouds."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .superpoints import unit_rows


class AnchorError(ValueError):
    pass


@dataclass(frozen=True)
class Bandwidths:
    delta_v: float
    delta_g: float

    def __post_init__(self):
        if not (self.delta_v > 0 and self.delta_g > 0):
            raise AnchorError(f"bandwidths must be positive, got {self.delta_v}, {self.delta_g}")


@dataclass
class AnchorSet:
    c_v: np.ndarray
    c_g: np.ndarray
    density: np.ndarray

    def __post_init__(self):
        self.c_v = unit_rows(self.c_v)
        self.c_g = unit_rows(self.c_g)
        self.density = np.asarray(self.density, dtype=np.float64).ravel()
        if self.c_v.shape[0] < 1:
            raise AnchorError("an anchor set needs at least one anchor")
        if not (self.c_v.shape[0] == self.c_g.shape[0] == self.density.size):
            raise AnchorError("c_v, c_g and density disagree on the anchor count")

    def __len__(self):
        return self.c_v.shape[0]


BANDWIDTH_FLOOR = 1e-4
_CHUNK = 2048


def estimate_bandwidth(features, neighbor_rank: int = 16) -> float:
    """Mean cosine similarity of each row to its ``neighbor_rank``-th most
    similar other row, clamped to [1e-4, 1]."""
    x = unit_rows(features)
    n = x.shape[0]
    if n <= neighbor_rank:
        raise AnchorError(f"bandwidth needs more than {neighbor_rank} rows, got {n}")
    kth = np.empty(n)
    for lo in range(0, n, _CHUNK):
        hi = min(lo + _CHUNK, n)
        sim = x[lo:hi] @ x.T
        sim[np.arange(hi - lo), np.arange(lo, hi)] = -np.inf
        # neighbor_rank-th largest == (n - neighbor_rank)-th smallest
        kth[lo:hi] = np.partition(sim, n - neighbor_rank, axis=1)[:, n - neighbor_rank]
    return float(np.clip(kth.mean(), BANDWIDTH_FLOOR, 1.0))


def estimate_bandwidths(f, g, neighbor_rank: int = 16) -> Bandwidths:
    """Visual and geometric bandwidths; the rank shrinks for tiny inputs."""
    n = np.asarray(f).shape[0]
    if n < 2:
        return Bandwidths(1.0, 1.0)
    rank = min(neighbor_rank, n - 1)
    return Bandwidths(estimate_bandwidth(f, rank), estimate_bandwidth(g, rank))


def _log_kernel(fn, gn, c_v, c_g, bw: Bandwidths):
    # shifted so the kernel peaks at 1 (cos = 1 in both spaces); the constant
    # factor cancels in every weighted mean and keeps densities finite
    return ((fn @ c_v.T - 1.0) / bw.delta_v ** 2
            + (gn @ c_g.T - 1.0) / bw.delta_g ** 2)


def meanshift(points_f, points_g, init_v, init_g, bw: Bandwidths, iters: int = 40,
              tol: float = 1e-6):
    """Joint-kernel Mean-Shift over unit feature rows.

    Kernel ``exp(cos_v / dv^2) * exp(cos_g / dg^2)``, rescaled by its peak
    value. Every step replaces each centroid with the kernel-weighted mean of
    the point features and re-normalizes it. Stops after ``iters`` steps or
    once no centroid moves more than ``tol``.

    Returns ``(c_v, c_g, density, n_steps)``.
    """
    fn = unit_rows(points_f)
    gn = unit_rows(points_g)
    c_v = unit_rows(init_v)
    c_g = unit_rows(init_g)
    steps = 0
    for steps in range(1, iters + 1):
        logk = _log_kernel(fn, gn, c_v, c_g, bw)
        w = np.exp(logk - logk.max(axis=0, keepdims=True))
        w /= w.sum(axis=0, keepdims=True)
        new_v = unit_rows(w.T @ fn)
        new_g = unit_rows(w.T @ gn)
        move = max(np.abs(new_v - c_v).max(), np.abs(new_g - c_g).max())
        c_v, c_g = new_v, new_g
        if move < tol:
            break
    density = np.exp(_log_kernel(fn, gn, c_v, c_g, bw)).sum(axis=0)
    return c_v, c_g, density, steps


def nms_centroids(c_v, c_g, density, thresholds: Bandwidths,
                  require_both: bool = True) -> AnchorSet:
    """Greedy non-maximum suppression by density.

    The densest remaining centroid is kept (ties to the lower index) and every
    remaining centroid whose cosine to it exceeds ``delta_v / 2`` in visual
    space and ``delta_g / 2`` in geometric space is dropped. With
    ``require_both=False`` exceeding either threshold suffices.
    """
    cv = unit_rows(c_v)
    cg = unit_rows(c_g)
    density = np.asarray(density, dtype=np.float64)
    order = np.lexsort((np.arange(density.size), -density))
    alive = np.ones(density.size, dtype=bool)
    keep = []
    for j in order:
        if not alive[j]:
            continue
        keep.append(j)
        alive[j] = False
        close_v = cv @ cv[j] > thresholds.delta_v / 2
        close_g = cg @ cg[j] > thresholds.delta_g / 2
        close = close_v & close_g if require_both else close_v | close_g
        alive &= ~close
    keep = np.asarray(keep, dtype=np.int64)
    return AnchorSet(cv[keep], cg[keep], density[keep])


def anchor_scores(anchors: AnchorSet, vlm, geo) -> np.ndarray:
    """(N, L) table of visual similarity times geometric similarity."""
    return (np.asarray(vlm, dtype=np.float64) @ anchors.c_v.T) * \
        (np.asarray(geo, dtype=np.float64) @ anchors.c_g.T)


def assign_points(anchors: AnchorSet, vlm, geo) -> np.ndarray:
    """Index of the best-scoring anchor for every point (ties to lowest)."""
    return np.argmax(anchor_scores(anchors, vlm, geo), axis=1)


def compute_anchors(vlm, geo, init_v, init_g, neighbor_rank: int = 16, iters: int = 40,
                    require_both: bool = True) -> tuple[AnchorSet, dict]:
    """Anchors for one cloud: Mean-Shift from the given initial centroids,
    then NMS with thresholds estimated on the converged centroids."""
    bw = estimate_bandwidths(vlm, geo, neighbor_rank)
    c_v, c_g, density, steps = meanshift(vlm, geo, init_v, init_g, bw, iters=iters)
    thr = estimate_bandwidths(c_v, c_g, neighbor_rank)
    anchors = nms_centroids(c_v, c_g, density, thr, require_both=require_both)
    info = {"kernel_bandwidths": [bw.delta_v, bw.delta_g],
            "nms_bandwidths": [thr.delta_v, thr.delta_g],
            "meanshift_steps": steps, "n_anchors": len(anchors)}
    return anchors, info


def build_anchor_bank(anchor_sets, neighbor_rank: int = 16,
                      require_both: bool = True) -> AnchorSet:
    """Merge anchor sets from several clouds and re-suppress duplicates.

    Exact duplicate anchors are collapsed first (first occurrence, highest
    density) so they cannot pull the bandwidth estimate toward 1. Banks with
    no more than ``neighbor_rank`` distinct anchors are too small to estimate
    a bandwidth from and are returned deduplicated but otherwise untouched.
    """
    anchor_sets = list(anchor_sets)
    if not anchor_sets:
        raise AnchorError("cannot build an anchor bank from an empty list")
    c_v = np.concatenate([a.c_v for a in anchor_sets])
    c_g = np.concatenate([a.c_g for a in anchor_sets])
    density = np.concatenate([a.density for a in anchor_sets])
    _, first, inverse = np.unique(np.hstack([c_v, c_g]), axis=0, return_index=True,
                                  return_inverse=True)
    inverse = inverse.ravel()
    best = np.full(first.size, -np.inf)
    np.maximum.at(best, inverse, density)
    order = np.argsort(first)
    c_v, c_g, density = c_v[first[order]], c_g[first[order]], best[order]
    if density.size <= neighbor_rank:
        return AnchorSet(c_v, c_g, density)
    thr = estimate_bandwidths(c_v, c_g, neighbor_rank)
    return nms_centroids(c_v, c_g, density, thr, require_both=require_both)
