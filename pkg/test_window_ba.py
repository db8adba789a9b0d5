"""
Tests for the depth-regularized sliding-window bundle adjuster.
"""

import unittest
import sys
import os

import numpy as np
from hypothesis import given, settings, strategies as st

# Add src directory to path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), 'src'))

from src.exceptions import EmptyHistoryException, NotEnoughConstraintsException, ValidationException
from src.lie_geometry import (
    CameraIntrinsics, Pose, project, relative, reproject_patch_jacobians, se3_exp, se3_log,
)
from src.window_ba import (
    BAWindow, BundleAdjuster, CorrespondenceEdge, DepthPrior, Patch, align_prior_scale,
    residual_depth, residual_reprojection, robust_weight, window_cost,
)


K = CameraIntrinsics.centered(400.0, 512, 288)


def make_scene(n_frames=4, n_points=30, seed=0, rotation_only=False):
    """Exact observations of random points seen from a short sideways track."""
    rng = np.random.default_rng(seed)
    points = np.column_stack([rng.uniform(-2, 2, n_points), rng.uniform(-1, 1, n_points),
                              rng.uniform(4, 8, n_points)])
    poses = {}
    for j in range(n_frames):
        if rotation_only:
            xi = np.array([0, 0, 0, 0.01 * j, 0.03 * j, 0])
        else:
            xi = np.array([-0.3 * j, 0.05 * j, 0.02 * j, 0.01 * j, 0.02 * j, 0])
        poses[j] = se3_exp(xi)

    patches, edges, priors = {}, [], {}
    for pid, X in enumerate(points):
        host = pid % 2 if n_frames > 2 else 0
        p_host = poses[host].transform(X)
        patches[(host, pid)] = Patch(host, pid, project(K, p_host), 1.0 / p_host[2])
        priors.setdefault(host, DepthPrior(host, {}, 1.0)).prior_depths[pid] = float(p_host[2])
        for j in poses:
            if j != host:
                edges.append(CorrespondenceEdge(host, pid, j, project(K, poses[j].transform(X))))
    return poses, patches, edges, priors


def make_window(poses, patches, edges, priors=None, mu=0.0, fixed=(0, 1), **kwargs):
    return BAWindow(K=K, frame_ids=sorted(poses), poses=dict(poses),
                    patches={k: Patch(p.frame_id, p.patch_id, p.center, p.inv_depth) for k, p in patches.items()},
                    edges=list(edges), priors=priors or {}, mu=mu, fixed_frames=set(fixed), **kwargs)


def pose_error(a: Pose, b: Pose) -> float:
    return float(np.max(np.abs(se3_log(relative(a, b)))))


def dense_step(window, mu):
    """Undamped Gauss-Newton step from the full weighted normal equations."""
    free = [f for f in window.frame_ids if f not in window.fixed_frames]
    keys = sorted(k for k in window.patches if k not in window.fixed_patches)
    col = {fid: 6 * i for i, fid in enumerate(free)}
    dcol = {key: 6 * len(free) + i for i, key in enumerate(keys)}
    n = 6 * len(free) + len(keys)
    H = np.zeros((n, n))
    g = np.zeros(n)
    for e in window.edges:
        p = window.patches[e.patch_key]
        pixel, J_i, J_j, J_d, _ = reproject_patch_jacobians(window.K, window.poses[e.src_frame],
                                                            window.poses[e.dst_frame], p.center, p.inv_depth)
        r = pixel - e.observed
        w = robust_weight(float(np.linalg.norm(r)), window.huber_delta) * e.confidence
        J = np.zeros((2, n))
        if e.src_frame in col:
            J[:, col[e.src_frame]:col[e.src_frame] + 6] = J_i
        if e.dst_frame in col:
            J[:, col[e.dst_frame]:col[e.dst_frame] + 6] = J_j
        if e.patch_key in dcol:
            J[:, dcol[e.patch_key]] = J_d
        H += w * J.T @ J
        g -= w * J.T @ r
    if mu > 0:
        for key in keys:
            target = window.priors[key[0]].aligned_depth(key[1])
            r = np.sqrt(mu) * (window.patches[key].inv_depth - 1.0 / target)
            H[dcol[key], dcol[key]] += mu
            g[dcol[key]] -= np.sqrt(mu) * r
    solution = np.linalg.solve(H, g)
    return ({fid: solution[col[fid]:col[fid] + 6] for fid in free},
            {key: solution[dcol[key]] for key in keys})


def random_window(seed):
    """Up to 5 frames and 20 patches with noisy, partly down-weighted observations."""
    rng = np.random.default_rng(seed)
    n_frames = int(rng.integers(2, 6))
    n_points = int(rng.integers(10, 21))
    poses, patches, edges, priors = make_scene(n_frames=n_frames, n_points=n_points, seed=seed)
    edges = [CorrespondenceEdge(e.src_frame, e.patch_id, e.dst_frame, e.observed + rng.normal(0, 2.0, 2),
                                confidence=float(rng.uniform(0.3, 1.0)))
             for e in edges]
    for prior in priors.values():
        prior.alpha = float(rng.uniform(0.5, 2.0))
        for pid in prior.prior_depths:
            prior.prior_depths[pid] *= prior.alpha * float(rng.uniform(0.9, 1.1))
    mu = float(rng.choice([0.0, 0.05, 0.3, 1.0]))
    n_fixed = int(rng.integers(1, n_frames))
    fixed = set(int(f) for f in rng.choice(n_frames, size=n_fixed, replace=False))
    keys = sorted(patches)
    fixed_patches = set()
    if mu == 0.0 and len(fixed) < 2:
        fixed_patches.add(keys[int(rng.integers(len(keys)))])
    if rng.random() < 0.5:
        fixed_patches.add(keys[int(rng.integers(len(keys)))])
    huber = float(rng.choice([1.5, 3.0, 1e9]))
    window = make_window(poses, patches, edges, priors=priors, mu=mu, fixed=fixed, huber_delta=huber,
                         fixed_patches=fixed_patches)
    return window, mu


class TestScaleAlignment(unittest.TestCase):
    """Alignment of monocular depth priors to the map scale."""

    def test_constant_medians(self):
        self.assertAlmostEqual(align_prior_scale([4.0] * 5, [0.5] * 7), 2.0)

    def test_median_arithmetic(self):
        self.assertAlmostEqual(align_prior_scale([2.0, 4.0, 6.0], [1.0, 0.5, 1.0 / 3.0]), 2.0)

    def test_literal_formula_uses_inverse_depths(self):
        self.assertAlmostEqual(align_prior_scale([4.0] * 3, [0.5] * 3, formula='literal'), 8.0)

    @settings(max_examples=100, deadline=None)
    @given(st.floats(0.01, 100.0))
    def test_scaling_priors_scales_alpha(self, c):
        rng = np.random.default_rng(1)
        priors = rng.uniform(1, 20, 15)
        inv_depths = rng.uniform(0.05, 1.0, 9)
        base = align_prior_scale(priors, inv_depths)
        self.assertAlmostEqual(align_prior_scale(priors * c, inv_depths) / base, c, places=9)

    def test_empty_history(self):
        with self.assertRaises(EmptyHistoryException):
            align_prior_scale([1.0, 2.0], [])
        with self.assertRaises(EmptyHistoryException):
            align_prior_scale([float('nan')], [0.5])


class TestResiduals(unittest.TestCase):
    """Reprojection and depth-prior residuals."""

    def setUp(self):
        self.poses, self.patches, self.edges, self.priors = make_scene()
        self.window = make_window(self.poses, self.patches, self.edges)

    def test_exact_edge_has_zero_residual(self):
        np.testing.assert_allclose(residual_reprojection(self.edges[0], self.window), [0, 0], atol=1e-9)

    def test_shifted_observation(self):
        edge = self.edges[0]
        shifted = CorrespondenceEdge(edge.src_frame, edge.patch_id, edge.dst_frame, edge.observed - [1.0, 0])
        np.testing.assert_allclose(residual_reprojection(shifted, self.window), [1.0, 0], atol=1e-9)

    def test_cost_matches_brute_force(self):
        rng = np.random.default_rng(5)
        noisy = [CorrespondenceEdge(e.src_frame, e.patch_id, e.dst_frame, e.observed + rng.normal(0, 3, 2))
                 for e in self.edges]
        window = make_window(self.poses, self.patches, noisy, huber_delta=1e9)
        brute = 0.0
        for e in noisy:
            p = window.patches[e.patch_key]
            pixel = reproject_patch_jacobians(K, window.poses[e.src_frame], window.poses[e.dst_frame],
                                              p.center, p.inv_depth)[0]
            brute += 0.5 * np.sum((pixel - e.observed) ** 2)
        self.assertAlmostEqual(window_cost(window), brute, places=6)

    def test_depth_residual(self):
        patch = Patch(0, 0, [10.0, 10.0], 0.5)
        prior = DepthPrior(0, {0: 4.0}, 1.0)
        self.assertAlmostEqual(residual_depth(patch, prior, 0.25), 0.125)
        self.assertEqual(residual_depth(patch, prior, 0.0), 0.0)
        satisfied = Patch(0, 0, [10.0, 10.0], 0.25)
        self.assertAlmostEqual(residual_depth(satisfied, prior, 0.25), 0.0)

    def test_depth_residual_uses_alpha(self):
        patch = Patch(0, 0, [10.0, 10.0], 0.5)
        prior = DepthPrior(0, {0: 8.0}, 4.0)
        self.assertAlmostEqual(residual_depth(patch, prior, 1.0), 0.0)

    def test_robust_weight(self):
        self.assertEqual(robust_weight(0.0, 2.0), 1.0)
        self.assertEqual(robust_weight(2.0, 2.0), 1.0)
        self.assertAlmostEqual(robust_weight(4.0, 2.0), 0.5)

    def test_edge_validation(self):
        with self.assertRaises(ValidationException):
            CorrespondenceEdge(1, 0, 1, [0, 0])
        with self.assertRaises(ValidationException):
            CorrespondenceEdge(0, 0, 1, [0, 0], confidence=1.5)


class TestSolver(unittest.TestCase):
    """Levenberg-Marquardt window solves."""

    def setUp(self):
        self.adjuster = BundleAdjuster()

    def test_zero_noise_recovers_ground_truth(self):
        poses, patches, edges, _ = make_scene(seed=2)
        rng = np.random.default_rng(3)
        start = dict(poses)
        for j in (2, 3):
            start[j] = Pose.from_matrix(se3_exp(rng.normal(0, 0.01, 6)).matrix() @ poses[j].matrix())
        window = make_window(start, patches, edges)
        for patch in window.patches.values():
            patch.inv_depth *= rng.uniform(0.9, 1.1)

        result = self.adjuster.solve(window, iterations=60)

        self.assertLess(result.final_cost, 1e-10)
        for j in poses:
            self.assertLess(pose_error(window.poses[j], poses[j]), 1e-6)
        for key, patch in patches.items():
            self.assertAlmostEqual(window.patches[key].inv_depth, patch.inv_depth, delta=1e-6)

    def test_exact_priors_fix_scale_with_one_fixed_frame(self):
        poses, patches, edges, priors = make_scene(seed=4)
        window = make_window(poses, patches, edges, priors=priors, mu=0.05, fixed=(0,))
        self.assertLess(window_cost(window), 1e-16)

        rng = np.random.default_rng(6)
        for j in (1, 2, 3):
            window.poses[j] = Pose.from_matrix(se3_exp(rng.normal(0, 0.01, 6)).matrix() @ poses[j].matrix())
        self.adjuster.solve(window, iterations=60)
        for j in poses:
            self.assertLess(pose_error(window.poses[j], poses[j]), 1e-6)

    def test_pure_rotation_depths_follow_priors(self):
        poses, patches, edges, priors = make_scene(n_frames=2, seed=8, rotation_only=True)
        window = make_window(poses, patches, edges, priors=priors, mu=0.05, fixed=(0,))
        rng = np.random.default_rng(9)
        for patch in window.patches.values():
            patch.inv_depth *= rng.uniform(0.8, 1.2)
        self.adjuster.solve(window, iterations=60)
        for key, patch in patches.items():
            self.assertAlmostEqual(window.patches[key].inv_depth / patch.inv_depth, 1.0, delta=0.01)

    def test_cost_never_increases(self):
        poses, patches, edges, priors = make_scene(seed=10)
        rng = np.random.default_rng(11)
        noisy = [CorrespondenceEdge(e.src_frame, e.patch_id, e.dst_frame, e.observed + rng.normal(0, 1.0, 2))
                 for e in edges]
        window = make_window(poses, patches, noisy, priors=priors, mu=0.05, fixed=(0,))
        for j in (1, 2, 3):
            window.poses[j] = Pose.from_matrix(se3_exp(rng.normal(0, 0.02, 6)).matrix() @ poses[j].matrix())
        costs = [window_cost(window)]
        for _ in range(8):
            result = self.adjuster.solve(window, iterations=1)
            self.assertLessEqual(result.final_cost, result.initial_cost + 1e-12)
            costs.append(result.final_cost)
        self.assertTrue(all(b <= a + 1e-12 for a, b in zip(costs, costs[1:])))

    def test_under_determined_window(self):
        poses, patches, edges, _ = make_scene(n_frames=2, n_points=1)
        window = make_window(poses, patches, edges, fixed=(0,))
        with self.assertRaises(NotEnoughConstraintsException):
            self.adjuster.solve(window)

    def test_window_without_fixed_frame(self):
        poses, patches, edges, priors = make_scene()
        window = make_window(poses, patches, edges, priors=priors, mu=0.05, fixed=())
        with self.assertRaises(NotEnoughConstraintsException):
            self.adjuster.solve(window)

    def test_weights_downweight_outlier(self):
        poses, patches, edges, _ = make_scene(seed=12)
        bad = edges[0]
        edges[0] = CorrespondenceEdge(bad.src_frame, bad.patch_id, bad.dst_frame, bad.observed + [40.0, 0])
        window = make_window(poses, patches, edges)
        result = self.adjuster.solve(window, iterations=20)
        self.assertLess(result.weights[0], 0.5)
        self.assertTrue(np.all(result.weights[1:] > 0.5))


class TestSchurStep(unittest.TestCase):
    """The depth-eliminated step equals a dense normal-equations solve."""

    def assert_matches_dense(self, window, mu):
        step = BundleAdjuster().compute_step(window, damping=0.0)
        pose_deltas, depth_deltas = dense_step(window, mu)
        scale = max(max((np.max(np.abs(v)) for v in pose_deltas.values()), default=0.0),
                    max((abs(v) for v in depth_deltas.values()), default=0.0))
        self.assertEqual(set(step.pose_deltas), set(pose_deltas))
        self.assertEqual(set(step.depth_deltas), set(depth_deltas))
        for fid, delta in pose_deltas.items():
            np.testing.assert_allclose(step.pose_deltas[fid], delta, rtol=0, atol=1e-8 * scale)
        for key, delta in depth_deltas.items():
            self.assertAlmostEqual(step.depth_deltas[key], delta, delta=1e-8 * scale)

    def test_matches_dense_solve(self):
        poses, patches, edges, priors = make_scene(n_frames=4, n_points=16, seed=13)
        rng = np.random.default_rng(14)
        edges = [CorrespondenceEdge(e.src_frame, e.patch_id, e.dst_frame, e.observed + rng.normal(0, 2.0, 2))
                 for e in edges]
        window = make_window(poses, patches, edges, priors=priors, mu=0.3, fixed=(0,), huber_delta=1e9)
        self.assert_matches_dense(window, 0.3)

    def test_random_windows_match_dense_solve(self):
        for seed in range(20):
            with self.subTest(seed=seed):
                window, mu = random_window(100 + seed)
                self.assert_matches_dense(window, mu)


class TestScaleEquivariance(unittest.TestCase):
    """Stretching priors and map by c stretches the solution by c."""

    def solve_pair(self, window_for, c):
        base = window_for(1.0)
        scaled = window_for(c)
        BundleAdjuster().solve(base, iterations=100)
        BundleAdjuster().solve(scaled, iterations=100)
        for fid in base.frame_ids:
            np.testing.assert_allclose(scaled.poses[fid].R, base.poses[fid].R, atol=1e-7)
            np.testing.assert_allclose(scaled.poses[fid].translation, c * base.poses[fid].translation,
                                       rtol=1e-5, atol=1e-7 * c)
        for key, patch in base.patches.items():
            self.assertAlmostEqual(scaled.patches[key].inv_depth * c / patch.inv_depth, 1.0, delta=1e-5)

    @staticmethod
    def stretched(poses, patches, priors, c):
        poses = {f: Pose(p.rotation, c * p.translation) for f, p in poses.items()}
        patches = {k: Patch(p.frame_id, p.patch_id, p.center, p.inv_depth / c) for k, p in patches.items()}
        priors = {f: DepthPrior(f, {pid: c * d for pid, d in p.prior_depths.items()}, p.alpha)
                  for f, p in priors.items()}
        return poses, patches, priors

    def test_prior_scaled_window(self):
        """Exact pixels, priors off by a common factor, one fixed frame: the priors set the scale."""
        poses, patches, edges, priors = make_scene(n_frames=4, n_points=20, seed=21)
        rng = np.random.default_rng(22)
        bias = 1.15
        for prior in priors.values():
            for pid in prior.prior_depths:
                prior.prior_depths[pid] *= bias
        start = dict(poses)
        for j in (1, 2, 3):
            start[j] = Pose.from_matrix(se3_exp(rng.normal(0, 0.01, 6)).matrix() @ poses[j].matrix())

        def window_for(c):
            p, q, r = self.stretched(start, patches, priors, c)
            return make_window(p, q, edges, priors=r, mu=0.05, fixed=(0,))

        for c in (0.25, 3.0):
            with self.subTest(c=c):
                self.solve_pair(window_for, c)

        window = window_for(1.0)
        BundleAdjuster().solve(window, iterations=100)
        for j in poses:
            np.testing.assert_allclose(window.poses[j].translation, bias * poses[j].translation, atol=1e-6)

    def test_frame_scaled_window(self):
        """Noisy pixels without priors: two fixed frames carry the scale."""
        poses, patches, edges, _ = make_scene(n_frames=5, n_points=20, seed=23)
        rng = np.random.default_rng(24)
        edges = [CorrespondenceEdge(e.src_frame, e.patch_id, e.dst_frame, e.observed + rng.normal(0, 1.0, 2))
                 for e in edges]

        def window_for(c):
            p, q, _ = self.stretched(poses, patches, {}, c)
            return make_window(p, q, edges, fixed=(0, 1))

        for c in (0.5, 4.0):
            with self.subTest(c=c):
                self.solve_pair(window_for, c)


if __name__ == '__main__':
    unittest.main()
