"""Superpoints from FPS seeds refined by neighborhood-restricted optimal
transport over a joint coordinate / geometric-feature cost.

Each refinement round gathers the K1 nearest points of every seed, weighs
seeds by the mean feature agreement of their neighborhood, solves a sparse
entropic transport problem between points and seeds, and moves each seed to
the plan-weighted average of its neighborhood.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from .cloud import NeighborIndex, _as_xyz, fps_sample
from .transport import Coupling, sinkhorn_plan

logger = logging.getLogger(__name__)


class SuperpointError(ValueError):
    pass


@dataclass
class SuperpointState:
    seeds_p: np.ndarray
    seeds_g: np.ndarray
    seeds_f: np.ndarray
    seed_index: np.ndarray
    mu: np.ndarray | None = None
    plan: Coupling | None = None
    neighbor_lists: np.ndarray | None = None
    warnings: list[str] = field(default_factory=list)
    history: list[dict] = field(default_factory=list)

    @property
    def n_super(self) -> int:
        return self.seeds_p.shape[0]


@dataclass(frozen=True)
class ScaleConstants:
    d_c: float
    d_g: float


def unit_rows(x: np.ndarray) -> np.ndarray:
    """Row-normalize, leaving all-zero rows at zero."""
    x = np.asarray(x, dtype=np.float64)
    norm = np.linalg.norm(x, axis=1, keepdims=True)
    return np.divide(x, norm, out=np.zeros_like(x), where=norm > 0)


def init_seeds(cloud, geo, vlm, n_super: int, start: int = 0) -> SuperpointState:
    """Seed superpoints at FPS-selected points."""
    pts = _as_xyz(cloud)
    idx = fps_sample(pts, n_super, start=start)
    return SuperpointState(
        seeds_p=pts[idx].copy(),
        seeds_g=np.asarray(geo, dtype=np.float64)[idx].copy(),
        seeds_f=unit_rows(np.asarray(vlm, dtype=np.float64)[idx]),
        seed_index=idx,
    )


def seed_neighborhoods(state: SuperpointState, index: NeighborIndex, k1: int) -> np.ndarray:
    """The K1 nearest points of every seed, shape (N̄, K1)."""
    return index.knn_batch(state.seeds_p, k1)


def compute_mu(state: SuperpointState, vlm, index: NeighborIndex, k1: int) -> np.ndarray:
    """Mean of (1 + cos) / 2 between each seed feature and its K1 nearest points."""
    nbrs = seed_neighborhoods(state, index, k1)
    f = unit_rows(vlm)
    fbar = unit_rows(state.seeds_f)
    cos = np.clip(np.einsum("jkb,jb->jk", f[nbrs], fbar), -1.0, 1.0)
    return (1.0 + cos).sum(axis=1) / (2.0 * k1)


def _nearest_other_mean(x: np.ndarray) -> float:
    d, _ = cKDTree(x).query(x, 2)
    return float(d[:, 1].mean())


def scale_constants(state: SuperpointState) -> ScaleConstants:
    """Mean nearest-other-seed distance in coordinate and geometric space."""
    if state.n_super < 2:
        raise SuperpointError("scale constants need at least 2 superpoints")
    d_c = _nearest_other_mean(state.seeds_p)
    # brute force in feature space; cKDTree degrades for d = 33
    g = state.seeds_g
    sq = np.sum(g * g, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * g @ g.T, 0.0)
    np.fill_diagonal(d2, np.inf)
    d_g = float(np.sqrt(d2.min(axis=1)).mean())
    if not d_c > 0:
        raise SuperpointError("all superpoints coincide; coordinate scale is zero")
    return ScaleConstants(d_c, d_g)


@dataclass
class Assignment:
    plan: Coupling
    covered: np.ndarray
    uncovered: np.ndarray


def ot_assign(state: SuperpointState, cloud, geo, scales: ScaleConstants,
              eps: float = 1.0, iters: int = 5, tol: float | None = None) -> Assignment:
    """Soft point-to-seed affiliation by sparse entropic OT.

    The support pairs every seed with its K1 neighborhood
    (``state.neighbor_lists``). Points outside every neighborhood are left
    out of the plan and reported as uncovered.
    """
    if state.neighbor_lists is None or state.mu is None:
        raise SuperpointError("neighborhoods and mu must be computed before assignment")
    mu = np.asarray(state.mu, dtype=np.float64)
    if not np.any(mu > 0):
        raise SuperpointError("all seed weights mu are zero")
    pts = _as_xyz(cloud)
    geo = np.asarray(geo, dtype=np.float64)
    n = pts.shape[0]
    nbrs = state.neighbor_lists
    n_super, k1 = nbrs.shape

    rows = nbrs.ravel()
    cols = np.repeat(np.arange(n_super), k1)
    cost = np.linalg.norm(pts[rows] - state.seeds_p[cols], axis=1) / np.sqrt(scales.d_c)
    if scales.d_g > 0:
        cost = cost + np.linalg.norm(geo[rows] - state.seeds_g[cols], axis=1) / np.sqrt(scales.d_g)

    covered = np.unique(rows)
    uncovered = np.setdiff1d(np.arange(n), covered)
    compact = np.full(n, -1, dtype=np.int64)
    compact[covered] = np.arange(covered.size)
    row_marg = np.full(covered.size, 1.0 / n)
    col_marg = mu / mu.sum()

    sub = sinkhorn_plan(cost, row_marg, col_marg, eps=eps, iters=iters,
                        support=(compact[rows], cols), tol=tol)
    plan = Coupling((n, n_super), covered[sub.rows], sub.cols, sub.values,
                    row_residual=sub.row_residual, col_residual=sub.col_residual,
                    n_iter=sub.n_iter)
    return Assignment(plan, covered, uncovered)


def _weighted_mean(plan: Coupling, x: np.ndarray, n_super: int):
    mass = plan.col_sums()
    acc = np.zeros((n_super, x.shape[1]))
    np.add.at(acc, plan.cols, plan.values[:, None] * x[plan.rows])
    return acc, mass


def update_seeds(state: SuperpointState, cloud, geo, vlm, plan: Coupling) -> SuperpointState:
    """Move every seed to the plan-weighted mean of its neighborhood."""
    pts = _as_xyz(cloud)
    n_super = state.n_super
    mass = plan.col_sums()
    empty = mass <= 0
    safe = np.where(empty, 1.0, mass)[:, None]

    new = {}
    for name, x in (("seeds_p", pts), ("seeds_g", np.asarray(geo, dtype=np.float64)),
                    ("seeds_f", unit_rows(vlm))):
        acc, _ = _weighted_mean(plan, x, n_super)
        new[name] = np.where(empty[:, None], getattr(state, name), acc / safe)
    new["seeds_f"] = unit_rows(new["seeds_f"])

    warnings = list(state.warnings)
    for j in np.flatnonzero(empty):
        msg = f"superpoint {j} received no transport mass; left unchanged"
        logger.warning(msg)
        warnings.append(msg)
    return replace(state, plan=plan, warnings=warnings, **new)


def assign_step(state: SuperpointState, cloud, geo, vlm, index: NeighborIndex, k1: int,
                eps: float, iters: int, scales: ScaleConstants | None = None):
    """Neighborhoods, seed weights and the transport plan for the current seeds."""
    state = replace(state, neighbor_lists=seed_neighborhoods(state, index, k1),
                    mu=compute_mu(state, vlm, index, k1))
    if scales is None:
        scales = scale_constants(state)
    assignment = ot_assign(state, cloud, geo, scales, eps=eps, iters=iters)
    return replace(state, plan=assignment.plan), assignment, scales


def refine(state: SuperpointState, cloud, geo, vlm, config, index: NeighborIndex | None = None
           ) -> SuperpointState:
    """Run ``config.gamma_iters`` rounds of assignment and seed update.

    ``config`` needs ``gamma_iters``, ``k1``, ``ot_eps``, ``ot_iters`` and
    ``recompute_scales``. Per-round residuals and coverage go to
    ``state.history``.
    """
    if index is None:
        index = NeighborIndex(cloud)
    fixed_scales = None
    history = list(state.history)
    for it in range(config.gamma_iters):
        scales = fixed_scales if not config.recompute_scales else None
        state, assignment, scales = assign_step(
            state, cloud, geo, vlm, index, config.k1, config.ot_eps, config.ot_iters, scales)
        if not config.recompute_scales:
            fixed_scales = scales
        history.append({
            "iteration": it,
            "row_residual": assignment.plan.row_residual,
            "col_residual": assignment.plan.col_residual,
            "uncovered": int(assignment.uncovered.size),
            "d_c": scales.d_c,
            "d_g": scales.d_g,
        })
        state = update_seeds(state, cloud, geo, vlm, assignment.plan)
    return replace(state, history=history)
