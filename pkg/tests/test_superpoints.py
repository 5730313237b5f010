import numpy as np
import pytest
from dataclasses import replace
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from geoagg.cloud import NeighborIndex, PointCloud
from geoagg.config import PipelineConfig
from geoagg.fpfh import FpfhParams, compute_fpfh
from geoagg.superpoints import (ScaleConstants, SuperpointError, SuperpointState,
                                assign_step, compute_mu, init_seeds, ot_assign,
                                refine, scale_constants, seed_neighborhoods,
                                unit_rows, update_seeds)
from geoagg.transport import Coupling
from oracles import dense_sinkhorn, unit


def random_fields(n, b=8, d=5, seed=0):
    rng = np.random.default_rng(seed)
    return rng.random((n, 3)), rng.random((n, d)), unit_rows(rng.normal(size=(n, b)))


def state_with(seeds_p, seeds_g=None, seeds_f=None):
    seeds_p = np.asarray(seeds_p, dtype=np.float64)
    m = len(seeds_p)
    g = np.zeros((m, 2)) if seeds_g is None else np.asarray(seeds_g, dtype=np.float64)
    f = np.tile([1.0, 0], (m, 1)) if seeds_f is None else np.asarray(seeds_f, dtype=np.float64)
    return SuperpointState(seeds_p, g, f, np.arange(m))


class TestInitSeeds:
    def test_full_cloud(self):
        pts, geo, vlm = random_fields(20)
        s = init_seeds(pts, geo, vlm, 20)
        assert sorted(s.seed_index.tolist()) == list(range(20))
        assert np.array_equal(s.seeds_p, pts[s.seed_index])
        assert s.mu is None

    def test_single_seed_at_start(self):
        pts, geo, vlm = random_fields(20)
        s = init_seeds(pts, geo, vlm, 1, start=7)
        assert s.seed_index.tolist() == [7] and np.array_equal(s.seeds_g[0], geo[7])

    def test_too_many(self):
        pts, geo, vlm = random_fields(5)
        with pytest.raises(ValueError):
            init_seeds(pts, geo, vlm, 6)


class TestMu:
    def setup_method(self):
        self.pts = np.random.default_rng(0).random((10, 3))
        self.index = NeighborIndex(self.pts)
        self.state = state_with(self.pts[:2], seeds_f=[[1.0, 0], [1.0, 0]])

    @pytest.mark.parametrize("feat,expect", [([1.0, 0], 1.0), ([0.0, 1], 0.5), ([-1.0, 0], 0.0)])
    def test_constant_neighbourhoods(self, feat, expect):
        vlm = np.tile(feat, (10, 1))
        assert np.allclose(compute_mu(self.state, vlm, self.index, 4), expect, atol=1e-15)

    def test_zero_feature_counts_as_orthogonal(self):
        assert np.allclose(compute_mu(self.state, np.zeros((10, 2)), self.index, 4), 0.5)

    def test_matches_loop_oracle(self):
        pts, geo, vlm = random_fields(60, seed=1)
        s = init_seeds(pts, geo, vlm, 6)
        mu = compute_mu(s, vlm, NeighborIndex(pts), 9)
        for j in range(6):
            d = np.linalg.norm(pts - s.seeds_p[j], axis=1)
            nb = sorted(range(60), key=lambda i: (d[i], i))[:9]
            ref = sum(1 + unit(vlm[i]) @ unit(s.seeds_f[j]) for i in nb) / 18
            assert abs(mu[j] - ref) < 1e-12

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 30))
    def test_in_unit_interval(self, seed, k1):
        pts, geo, vlm = random_fields(30, seed=seed)
        s = init_seeds(pts, geo, vlm, 5)
        mu = compute_mu(s, vlm, NeighborIndex(pts), k1)
        assert np.all((mu >= 0) & (mu <= 1))


class TestScaleConstants:
    def test_line(self):
        s = state_with([[0.0, 0, 0], [1, 0, 0], [2, 0, 0]],
                       seeds_g=[[0.0, 0], [3, 4], [3, 4]])
        sc = scale_constants(s)
        assert sc.d_c == 1.0
        # seed 0 is 5 from its nearest; the identical pair contribute 0
        assert np.isclose(sc.d_g, 5 / 3)

    def test_homogeneous_in_scale(self):
        pts, geo, vlm = random_fields(40)
        s = init_seeds(pts, geo, vlm, 8)
        s2 = replace(s, seeds_p=s.seeds_p * 3.5)
        assert np.isclose(scale_constants(s2).d_c, 3.5 * scale_constants(s).d_c)

    def test_needs_two(self):
        with pytest.raises(SuperpointError):
            scale_constants(state_with([[0.0, 0, 0]]))

    def test_coincident_seeds(self):
        with pytest.raises(SuperpointError):
            scale_constants(state_with([[0.0, 0, 0], [0, 0, 0]]))


class TestOtAssign:
    def test_single_seed_covers_all(self):
        pts, geo, vlm = random_fields(12)
        s = init_seeds(pts, geo, vlm, 1)
        s = replace(s, neighbor_lists=seed_neighborhoods(s, NeighborIndex(pts), 12),
                    mu=np.array([0.7]))
        plan = ot_assign(s, pts, geo, ScaleConstants(1.0, 1.0), iters=3).plan
        assert np.allclose(plan.to_dense(), 1 / 12, atol=1e-15)

    def test_mirror_symmetry(self):
        rng = np.random.default_rng(2)
        half = rng.random((8, 3)) + [0.2, 0, 0]
        pts = np.vstack([half, half * [-1, 1, 1]])
        geo = np.vstack([rng.random((8, 4))] * 2)
        s = state_with([[0.6, 0.5, 0.5], [-0.6, 0.5, 0.5]], seeds_g=[geo[:8].mean(0)] * 2)
        idx = NeighborIndex(pts)
        s = replace(s, neighbor_lists=seed_neighborhoods(s, idx, 10), mu=np.array([0.8, 0.8]))
        plan = ot_assign(s, pts, geo, scale_constants(s), iters=50).plan.to_dense()
        mirror = np.r_[np.arange(8, 16), np.arange(8)]
        assert np.abs(plan - plan[mirror][:, ::-1]).max() < 1e-8

    def test_converged_residuals(self):
        pts, geo, vlm = random_fields(80, seed=3)
        s, a, _ = assign_step(init_seeds(pts, geo, vlm, 10), pts, geo, vlm,
                              NeighborIndex(pts), 16, eps=1.0, iters=200)
        assert a.plan.row_residual <= 1e-6 and a.plan.col_residual <= 1e-6

    def test_support_and_coverage(self):
        pts, geo, vlm = random_fields(50, seed=4)
        s, a, _ = assign_step(init_seeds(pts, geo, vlm, 4), pts, geo, vlm,
                              NeighborIndex(pts), 6, eps=1.0, iters=5)
        dense = a.plan.to_dense()
        allowed = np.zeros_like(dense, dtype=bool)
        for j, nb in enumerate(s.neighbor_lists):
            allowed[nb, j] = True
        assert np.all(dense[~allowed] == 0)
        assert a.uncovered.size == 50 - a.covered.size > 0
        assert np.all(dense[a.uncovered] == 0)

    def test_marginals_with_overlap(self):
        pts, geo, vlm = random_fields(50, seed=4)
        s, a, _ = assign_step(init_seeds(pts, geo, vlm, 4), pts, geo, vlm,
                              NeighborIndex(pts), 40, eps=1.0, iters=500)
        dense = a.plan.to_dense()
        assert np.allclose(dense[a.covered].sum(1), 1 / a.covered.size, atol=1e-8)
        assert np.allclose(dense.sum(0), s.mu / s.mu.sum(), atol=1e-8)

    def test_all_zero_mu(self):
        pts, geo, vlm = random_fields(10)
        s = init_seeds(pts, geo, vlm, 2)
        s = replace(s, neighbor_lists=seed_neighborhoods(s, NeighborIndex(pts), 4), mu=np.zeros(2))
        with pytest.raises(SuperpointError):
            ot_assign(s, pts, geo, ScaleConstants(1.0, 1.0))

    def test_requires_neighbourhoods(self):
        pts, geo, vlm = random_fields(10)
        with pytest.raises(SuperpointError):
            ot_assign(init_seeds(pts, geo, vlm, 2), pts, geo, ScaleConstants(1.0, 1.0))

    def test_zero_geometric_scale_drops_term(self):
        pts, geo, vlm = random_fields(30, seed=5)
        s, _, _ = assign_step(init_seeds(pts, geo, vlm, 3), pts, geo, vlm,
                              NeighborIndex(pts), 30, eps=1.0, iters=1)
        a = ot_assign(s, pts, geo * 0 + 1, ScaleConstants(0.5, 0.0), iters=30)
        b = ot_assign(s, pts, geo, ScaleConstants(0.5, 0.0), iters=30)
        assert np.allclose(a.plan.values, b.plan.values)


def plan_from(dense):
    r, c = np.nonzero(dense)
    return Coupling(dense.shape, r, c, dense[r, c])


class TestUpdateSeeds:
    def test_midpoint(self):
        pts = np.array([[0.0, 0, 0], [2, 4, 6], [9, 9, 9]])
        s = state_with([[1.0, 1, 1]], seeds_g=[[0.0, 0]], seeds_f=[[1.0, 0]])
        dense = np.array([[0.5], [0.5], [0.0]])
        out = update_seeds(s, pts, np.zeros((3, 2)), np.tile([0.0, 1], (3, 1)), plan_from(dense))
        assert np.allclose(out.seeds_p[0], [1, 2, 3])
        assert np.allclose(out.seeds_f[0], [0, 1])

    def test_delta(self):
        pts, geo, vlm = random_fields(5)
        dense = np.full((5, 1), 1e-12)
        dense[3] = 1.0
        out = update_seeds(state_with(pts[:1], geo[:1], vlm[:1]), pts, geo, vlm, plan_from(dense))
        assert np.abs(out.seeds_p[0] - pts[3]).max() < 1e-6
        assert np.abs(out.seeds_g[0] - geo[3]).max() < 1e-6

    def test_zero_mass_keeps_seed_and_warns(self):
        pts, geo, vlm = random_fields(4)
        s = state_with(pts[:2], geo[:2], vlm[:2])
        dense = np.zeros((4, 2))
        dense[:, 0] = 0.25
        out = update_seeds(s, pts, geo, vlm, plan_from(dense))
        assert np.array_equal(out.seeds_p[1], s.seeds_p[1])
        assert len(out.warnings) == 1 and "superpoint 1" in out.warnings[0]

    def test_inside_neighbourhood_box(self):
        pts, geo, vlm = random_fields(100, seed=6)
        s, a, _ = assign_step(init_seeds(pts, geo, vlm, 10), pts, geo, vlm,
                              NeighborIndex(pts), 12, eps=1.0, iters=5)
        out = update_seeds(s, pts, geo, vlm, a.plan)
        for j, nb in enumerate(s.neighbor_lists):
            lo, hi = pts[nb].min(0), pts[nb].max(0)
            assert np.all(out.seeds_p[j] >= lo - 1e-12) and np.all(out.seeds_p[j] <= hi + 1e-12)
        assert np.allclose(np.linalg.norm(out.seeds_f, axis=1), 1.0)


def small_config(**kw):
    base = dict(gamma_iters=4, n_super=2, k1=8, k2=4)
    base.update(kw)
    return PipelineConfig(**base)


class TestRefine:
    def test_zero_rounds_identity(self):
        pts, geo, vlm = random_fields(30)
        s = init_seeds(pts, geo, vlm, 4)
        out = refine(s, pts, geo, vlm, small_config(gamma_iters=0))
        assert np.array_equal(out.seeds_p, s.seeds_p) and out.history == []

    def test_two_blobs(self):
        rng = np.random.default_rng(7)
        blob_a = rng.normal(scale=0.1, size=(40, 3))
        blob_b = rng.normal(scale=0.1, size=(40, 3)) + [3.0, 0, 0]
        pts = np.vstack([blob_a, blob_b])
        geo = rng.random((80, 6))
        vlm = unit_rows(rng.normal(size=(80, 4)))
        out = refine(init_seeds(pts, geo, vlm, 2), pts, geo, vlm,
                     small_config(gamma_iters=16, k1=40))
        boxes = [(b.min(0), b.max(0)) for b in (blob_a, blob_b)]
        hits = sorted(next(i for i, (lo, hi) in enumerate(boxes)
                           if np.all(p >= lo) and np.all(p <= hi)) for p in out.seeds_p)
        assert hits == [0, 1]

    def test_history_and_bounding_box(self):
        pts, geo, vlm = random_fields(120, seed=8)
        s = init_seeds(pts, geo, vlm, 12)
        index = NeighborIndex(pts)
        lo, hi = pts.min(0), pts.max(0)
        for _ in range(6):
            s = refine(s, pts, geo, vlm, small_config(gamma_iters=1, k1=16), index=index)
            assert np.all(s.seeds_p >= lo) and np.all(s.seeds_p <= hi)
        assert len(s.history) == 6
        assert {"row_residual", "col_residual", "uncovered", "d_c", "d_g"} <= set(s.history[0])

    def test_frozen_scales(self):
        pts, geo, vlm = random_fields(60, seed=9)
        s = init_seeds(pts, geo, vlm, 6)
        out = refine(s, pts, geo, vlm, small_config(k1=10, recompute_scales=False))
        assert len({h["d_c"] for h in out.history}) == 1
        out = refine(s, pts, geo, vlm, small_config(k1=10))
        assert len({h["d_c"] for h in out.history}) > 1

    def test_coordinate_only_plan_matches_dense_oracle(self):
        rng = np.random.default_rng(10)
        n = 48
        pts = rng.random((n, 3))
        geo = np.ones((n, 4))
        vlm = np.tile([1.0, 0, 0], (n, 1))
        cfg = small_config(gamma_iters=5, k1=n, ot_iters=40)
        out = refine(init_seeds(pts, geo, vlm, 5), pts, geo, vlm, cfg)
        s, a, sc = assign_step(out, pts, geo, vlm, NeighborIndex(pts), n, 1.0, 40)
        cost = np.linalg.norm(pts[:, None] - s.seeds_p[None], axis=2) / np.sqrt(sc.d_c)
        oracle = dense_sinkhorn(cost, np.full(n, 1 / n), s.mu / s.mu.sum(), 1.0, 40)
        got = a.plan.to_dense()
        assert abs(np.sum(got * cost) - np.sum(oracle * cost)) < 1e-6

    def test_rigid_equivariance(self):
        rng = np.random.default_rng(11)
        d = rng.normal(size=(300, 3))
        pts = d / np.linalg.norm(d, axis=1, keepdims=True) * [1, 0.8, 0.6]
        vlm = unit_rows(rng.normal(size=(300, 6)))
        params = FpfhParams(m_ref=150, k3=10, k4=20, r1=0.4, r2=0.6)
        cfg = small_config(gamma_iters=6, n_super=12, k1=24)

        def run(p):
            geo = compute_fpfh(PointCloud(p), params)
            xyz = PointCloud(p).xyz()
            return refine(init_seeds(xyz, geo, vlm, 12), xyz, geo, vlm, cfg).seeds_p

        base = run(pts)
        rot = Rotation.random(random_state=3).as_matrix()
        shift = np.array([0.5, -2.0, 1.0])
        moved = run(pts @ rot.T + shift)
        assert np.abs(moved - (base @ rot.T + shift)).max() < 1e-4
