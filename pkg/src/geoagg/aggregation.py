"""Geometry-driven feature aggregation.

The cascade runs local aggregation inside superpoint patches, pools the
refined point features back into superpoints, mixes superpoints globally,
propagates superpoint features to every point and finally snaps points to
their best anchor. ``run_pipeline`` chains all of it, starting from the raw
cloud and feature fields.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .anchors import AnchorSet, anchor_scores, compute_anchors
from .cloud import NeighborIndex, _as_xyz
from .config import PipelineConfig
from .superpoints import SuperpointState, assign_step, init_seeds, refine, unit_rows
from .transport import Coupling, sh_normalize, softmax_rows


class PipelineError(ValueError):
    pass


def mixing_weights(sim_a, sim_b, sh_iters: int, mask=None) -> np.ndarray:
    """Row-softmax of the elementwise product of two SH-normalized similarities."""
    prod = sh_normalize(sim_a, sh_iters) * sh_normalize(sim_b, sh_iters)
    if mask is not None:
        prod = prod * mask
    return softmax_rows(prod)


def _patch_update(f_patch, g_patch, sh_iters):
    b = f_patch.shape[1]
    d = g_patch.shape[1]
    w = mixing_weights(g_patch @ g_patch.T / np.sqrt(d), f_patch @ f_patch.T / np.sqrt(b), sh_iters)
    return 0.5 * (f_patch + w @ f_patch), w


def local_aggregate(state: SuperpointState, cloud, geo, vlm, k2: int, sh_iters: int = 5,
                    index: NeighborIndex | None = None, workers: int = 1,
                    return_weights: bool = False):
    """Smooth features inside the K2-point patch of every superpoint.

    Points in several patches get the mean of their patch results; points in
    none keep their input feature. Output rows are re-normalized.
    """
    if index is None:
        index = NeighborIndex(cloud)
    f = np.asarray(vlm, dtype=np.float64)
    g = np.asarray(geo, dtype=np.float64)
    patches = index.knn_batch(state.seeds_p, k2)

    def work(j):
        return _patch_update(f[patches[j]], g[patches[j]], sh_iters)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(work, range(len(patches))))
    else:
        results = [work(j) for j in range(len(patches))]

    # accumulate in patch order so the sum is independent of the worker count
    acc = np.zeros_like(f)
    count = np.zeros(f.shape[0])
    for j, (out, _) in enumerate(results):
        acc[patches[j]] += out
        count[patches[j]] += 1
    touched = count > 0
    new = f.copy()
    new[touched] = acc[touched] / count[touched, None]
    new = unit_rows(new)
    if return_weights:
        return new, [w for _, w in results]
    return new


def pool_to_superpoints(state: SuperpointState, refined, plan: Coupling | None = None) -> np.ndarray:
    """Plan-weighted mean of point features per superpoint, re-normalized.

    Superpoints that carry no plan mass keep their current feature.
    """
    plan = state.plan if plan is None else plan
    if plan is None:
        raise PipelineError("pooling needs a transport plan")
    f = np.asarray(refined, dtype=np.float64)
    n_super = state.n_super
    acc = np.zeros((n_super, f.shape[1]))
    np.add.at(acc, plan.cols, plan.values[:, None] * f[plan.rows])
    mass = plan.col_sums()
    out = state.seeds_f.copy()
    ok = mass > 0
    out[ok] = acc[ok] / mass[ok, None]
    return unit_rows(out)


def global_aggregate(seeds_f, seeds_g, seeds_p, d_c: float, sh_iters: int = 5,
                     return_weights: bool = False):
    """Mix superpoint features among superpoints closer than ``d_c``.

    Pairs farther apart are zeroed in the weight product before the softmax,
    so they still receive the softmax weight of a zero logit.
    """
    fbar = np.asarray(seeds_f, dtype=np.float64)
    gbar = np.asarray(seeds_g, dtype=np.float64)
    pbar = np.asarray(seeds_p, dtype=np.float64)
    b, d = fbar.shape[1], gbar.shape[1]
    dist = np.linalg.norm(pbar[:, None, :] - pbar[None, :, :], axis=2)
    mask = (dist < d_c).astype(np.float64)
    np.fill_diagonal(mask, 1.0)
    w = mixing_weights(gbar @ gbar.T / np.sqrt(d), fbar @ fbar.T / np.sqrt(b), sh_iters, mask)
    out = unit_rows(0.5 * (fbar + w @ fbar))
    return (out, w) if return_weights else out


def coordinate_kernel(cloud, seeds_p, d_c: float, kind: str = "tanh") -> np.ndarray:
    """Point-to-superpoint coordinate affinity built from ``d_c - distance``."""
    pts = _as_xyz(cloud)
    dist = np.linalg.norm(pts[:, None, :] - np.asarray(seeds_p)[None, :, :], axis=2)
    if kind == "tanh":
        return np.tanh(d_c - dist)
    if kind == "softmax":
        return softmax_rows(d_c - dist)
    raise PipelineError(f"unknown coordinate kernel {kind!r}")


def superpoint_to_point(cloud, vlm, seeds_p, seeds_f, d_c: float, sh_iters: int = 5,
                        kind: str = "tanh", valid=None, return_weights: bool = False):
    """Blend every point feature with a weighted mix of superpoint features.

    Rows flagged invalid (or all-zero when ``valid`` is None) take the
    superpoint mix directly.
    """
    f = np.asarray(vlm, dtype=np.float64)
    fbar = np.asarray(seeds_f, dtype=np.float64)
    s_c = coordinate_kernel(cloud, seeds_p, d_c, kind)
    s_v = f @ fbar.T / np.sqrt(f.shape[1])
    w = mixing_weights(s_c, s_v, sh_iters)
    mixed = w @ fbar
    if valid is None:
        valid = np.any(f != 0, axis=1)
    out = np.where(np.asarray(valid)[:, None], 0.5 * (f + mixed), mixed)
    out = unit_rows(out)
    return (out, w) if return_weights else out


def anchor_project(vlm, geo, anchors: AnchorSet, blend: float = 1.0) -> np.ndarray:
    """Pull each point toward its best anchor; ``blend=1`` replaces it outright."""
    f = np.asarray(vlm, dtype=np.float64)
    best = np.argmax(anchor_scores(anchors, f, geo), axis=1)
    return unit_rows((1.0 - blend) * f + blend * anchors.c_v[best])


@dataclass
class PipelineResult:
    features: np.ndarray
    state: SuperpointState
    anchors: AnchorSet
    report: dict = field(default_factory=dict)


def _row_sum_error(w) -> float:
    return float(np.abs(w.sum(axis=1) - 1.0).max())


def run_pipeline(cloud, vlm, geo, config: PipelineConfig,
                 external_anchors: AnchorSet | None = None, workers: int = 1,
                 keep_stages: bool = False) -> PipelineResult:
    """Superpoints, anchors, aggregation passes, propagation and projection.

    The report holds per-stage timings, superpoint coverage, residuals of
    every refinement round, anchor statistics and the worst row-sum error of
    every mixing matrix. With ``keep_stages`` the intermediate feature fields
    are returned under ``report["stages"]``.
    """
    pts = _as_xyz(cloud)
    n = pts.shape[0]
    vlm = np.asarray(vlm, dtype=np.float64)
    geo = np.asarray(geo, dtype=np.float64)
    if vlm.ndim != 2 or vlm.shape[0] != n:
        raise PipelineError(f"VLM features have shape {vlm.shape}, expected ({n}, b)")
    if geo.ndim != 2 or geo.shape[0] != n:
        raise PipelineError(f"geometric features have shape {geo.shape}, expected ({n}, d)")
    if external_anchors is not None and (
            external_anchors.c_v.shape[1] != vlm.shape[1]
            or external_anchors.c_g.shape[1] != geo.shape[1]):
        raise PipelineError("anchor dimensions do not match the feature fields")
    if not (np.all(np.isfinite(vlm)) and np.all(np.isfinite(geo))):
        raise PipelineError("feature fields contain non-finite values")
    config.check_cloud_size(n)

    timings: dict[str, float] = {}
    row_err: dict[str, float] = {}
    stages: dict[str, np.ndarray] = {}
    tick = time.perf_counter()

    def lap(name):
        nonlocal tick
        now = time.perf_counter()
        timings[name] = now - tick
        tick = now

    valid = np.any(vlm != 0, axis=1)
    f = unit_rows(vlm)
    index = NeighborIndex(pts)
    lap("index")

    state = init_seeds(pts, geo, f, config.n_super, start=config.fps_start)
    state = refine(state, pts, geo, f, config, index=index)
    # the plan must match the final seeds for pooling
    state, assignment, scales = assign_step(state, pts, geo, f, index, config.k1,
                                            config.ot_eps, config.ot_iters)
    lap("superpoints")

    if external_anchors is not None:
        anchors = external_anchors
        anchor_info = {"n_anchors": len(anchors), "external": True}
    else:
        anchors, anchor_info = compute_anchors(
            f[valid], geo[valid], state.seeds_f, state.seeds_g,
            neighbor_rank=config.bandwidth_rank, iters=config.ms_iters,
            require_both=config.nms_require_both)
        anchor_info["external"] = False
    lap("anchors")

    row_err["local"] = row_err["global"] = 0.0
    for p in range(config.agg_passes):
        f, local_w = local_aggregate(state, pts, geo, f, config.k2, config.sh_iters,
                                     index=index, workers=workers, return_weights=True)
        row_err["local"] = max(row_err["local"], max(_row_sum_error(w) for w in local_w))
        if keep_stages:
            stages[f"local_{p}"] = f.copy()
        pooled = pool_to_superpoints(state, f)
        seeds_f, gw = global_aggregate(pooled, state.seeds_g, state.seeds_p, scales.d_c,
                                       config.sh_iters, return_weights=True)
        row_err["global"] = max(row_err["global"], _row_sum_error(gw))
        state = replace(state, seeds_f=seeds_f)
        if keep_stages:
            stages[f"global_{p}"] = seeds_f.copy()
    lap("aggregation")

    f, pw = superpoint_to_point(pts, f, state.seeds_p, state.seeds_f, scales.d_c,
                                config.sh_iters, kind=config.coord_kernel,
                                return_weights=True)
    row_err["superpoint_to_point"] = _row_sum_error(pw)
    if keep_stages:
        stages["superpoint_to_point"] = f.copy()
    lap("superpoint_to_point")

    f = anchor_project(f, geo, anchors, config.blend)
    lap("anchor_projection")

    report = {
        "n_points": n,
        "n_superpoints": state.n_super,
        "timings": timings,
        "coverage": {"covered": int(assignment.covered.size),
                     "uncovered": int(assignment.uncovered.size),
                     "invalid_input_rows": int((~valid).sum())},
        "refinement": state.history,
        "final_plan_residuals": [assignment.plan.row_residual, assignment.plan.col_residual],
        "scales": {"d_c": scales.d_c, "d_g": scales.d_g},
        "anchors": anchor_info,
        "mixing_row_sum_error": row_err,
        "warnings": list(state.warnings),
    }
    if keep_stages:
        report["stages"] = stages
    return PipelineResult(f, state, anchors, report)

