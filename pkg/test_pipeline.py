"""
Tests for the incremental reconstruction pipeline on small noise-free worlds
and the preset worlds it is expected to handle.
"""

import unittest
import sys
import os
import copy
import time
from dataclasses import replace

import numpy as np
from scipy.spatial.transform import Rotation

# Add src directory to path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), 'src'))

from src.eval_metrics import ate_rmse, count_registered, evaluate_trajectory
from src.exceptions import (
    DegenerateGeometryException, FullyMaskedException, InsufficientParallaxException, InvalidValueException,
    RefinementDivergedException,
)
from src.frontend_sim import NoiseSpec, Segment, WorldSpec, generate, inject_scale_drift, standard_worlds
from src.lie_geometry import CameraIntrinsics, Pose
from src.pipeline import (
    CorrespondenceIndex, PipelineConfig, SlamPipeline, run_pipeline, sample_patches, select_init_frames,
    translation_parallax, triangulate_rays,
)
from src.window_ba import Patch


def tiny_world(**overrides):
    params = dict(
        name='tiny', seed=3, landmark_count=1500, scene_extent=40.0,
        trajectory_script=[Segment('arc', 10, 0.5, 30.0), Segment('forward', 20, 0.5)],
        noise=NoiseSpec.zero(), candidates_per_frame=40, edge_radius=4,
    )
    params.update(overrides)
    return WorldSpec(**params)


class TestPipelineConfig(unittest.TestCase):
    """Configuration invariants."""

    def test_defaults_are_valid(self):
        config = PipelineConfig().validate()
        self.assertEqual(config.window_size, 10)
        self.assertIn('mu', PipelineConfig.keys())

    def test_invalid_values_name_their_key(self):
        cases = {'n_init': 2, 'window_size': 3, 'mu': -1.0, 'patch_size': 4,
                 'post_refine': 'everything', 'loop_similarity': 1.5, 'alpha_formula': 'median'}
        for key, value in cases.items():
            with self.subTest(key=key):
                with self.assertRaises(InvalidValueException) as ctx:
                    PipelineConfig(**{key: value}).validate()
                self.assertEqual(ctx.exception.key, key)


class TestStandaloneOperations(unittest.TestCase):
    """Initialization frame selection, patch sampling and ray triangulation."""

    @classmethod
    def setUpClass(cls):
        cls.bundle, cls.gt = generate(tiny_world())

    def test_init_frames_have_enough_flow(self):
        index = CorrespondenceIndex(self.bundle)
        frames = select_init_frames(self.bundle, 6, 12.0, index)
        self.assertEqual(len(frames), 6)
        self.assertEqual(frames[0], 0)
        self.assertEqual(frames, sorted(frames))
        for a, b in zip(frames, frames[1:]):
            self.assertGreaterEqual(index.mean_flow(a, b), 12.0)

    def test_init_without_parallax(self):
        with self.assertRaises(InsufficientParallaxException):
            select_init_frames(self.bundle, 6, 1e6)

    def test_sampling_skips_masked_pixels(self):
        rng = np.random.default_rng(0)
        mask = np.zeros((40, 60), dtype=bool)
        mask[:, :30] = True
        ids, centers = sample_patches(mask, 50, rng, patch_size=3)
        self.assertEqual(len(ids), 50)
        self.assertTrue(np.all(centers[:, 0] >= 30))
        self.assertTrue(np.all(centers[:, 0] <= 58))
        self.assertTrue(np.all((centers[:, 1] >= 1) & (centers[:, 1] <= 38)))

    def test_sampling_among_candidates(self):
        rng = np.random.default_rng(1)
        mask = np.zeros((40, 60), dtype=bool)
        mask[:20] = True
        ids = np.arange(6)
        centers = np.array([[5.0, 5.0], [6.0, 30.0], [7.0, 10.0], [8.0, 25.0], [9.0, 35.0], [10.0, 2.0]])
        chosen, chosen_centers = sample_patches(mask, 10, rng, candidates=(ids, centers))
        np.testing.assert_array_equal(chosen, [1, 3, 4])
        np.testing.assert_allclose(chosen_centers, centers[[1, 3, 4]])

    def test_fully_masked_frame(self):
        with self.assertRaises(FullyMaskedException):
            sample_patches(np.ones((10, 10), dtype=bool), 5, np.random.default_rng(0))

    def test_rays_meet_at_point(self):
        point = np.array([1.0, 2.0, 10.0])
        origins = np.array([[0.0, 0, 0], [1.0, 0, 0], [0.0, 1.0, 0]])
        found = triangulate_rays(origins, point - origins)
        np.testing.assert_allclose(found, point, atol=1e-9)

    def test_parallel_rays(self):
        origins = np.array([[0.0, 0, 0], [1.0, 0, 0]])
        directions = np.array([[0.0, 0, 1.0], [0.0, 0, 1.0]])
        self.assertIsNone(triangulate_rays(origins, directions))

    def test_point_behind_rays(self):
        point = np.array([0.0, 0.0, -5.0])
        origins = np.array([[0.0, 0, 0], [1.0, 0, 0]])
        self.assertIsNone(triangulate_rays(origins, -(point - origins)))

    def test_translation_parallax(self):
        K = CameraIntrinsics.centered(400.0, 512, 288)
        patches = [Patch(0, 0, [256.0, 144.0], 0.1), Patch(0, 1, [300.0, 100.0], 0.2)]
        turned = Pose(Rotation.from_euler('y', 0.2).as_quat(), np.zeros(3))
        self.assertAlmostEqual(translation_parallax(K, [Pose.identity(), turned], patches), 0.0, places=9)
        # a point 10 m ahead on the axis shifts by f * 1 / 10 after a 1 m sidestep
        shifted = Pose(np.array([0.0, 0.0, 0.0, 1.0]), [-1.0, 0.0, 0.0])
        self.assertAlmostEqual(translation_parallax(K, [Pose.identity(), shifted], patches[:1]), 40.0, places=6)


class TestFocalEstimation(unittest.TestCase):
    """Focal length from the initialization window."""

    def estimate(self, spec, **config):
        bundle, gt = generate(spec)
        pipeline = SlamPipeline(bundle, PipelineConfig(n_init=6, **config))
        frames = select_init_frames(bundle, 6, pipeline.config.flow_threshold_px, pipeline.index)
        return pipeline.estimate_focal(frames), gt, bundle

    def test_recovers_true_focal(self):
        K, gt, bundle = self.estimate(tiny_world())
        self.assertAlmostEqual(K.fx / gt.camera.fx, 1.0, delta=0.005)
        self.assertEqual(K.fx, K.fy)
        self.assertEqual((K.cx, K.cy), (bundle.width / 2.0, bundle.height / 2.0))

    def test_focal_under_pixel_noise(self):
        K, gt, _ = self.estimate(tiny_world(noise=NoiseSpec(0.5, 0.0, 0.0, 0.0)), focal_patches_per_frame=40)
        self.assertAlmostEqual(K.fx / gt.camera.fx, 1.0, delta=0.02)

    def test_pure_rotation_is_degenerate(self):
        spec = tiny_world(trajectory_script=[Segment('pure_rotation', 20, 0.0, 60.0), Segment('forward', 10, 0.5)])
        bundle, _ = generate(spec)
        pipeline = SlamPipeline(bundle, PipelineConfig(n_init=6))
        with self.assertRaises(DegenerateGeometryException):
            pipeline.initialize()


class TestReconstruction(unittest.TestCase):
    """End-to-end run with a known focal length."""

    @classmethod
    def setUpClass(cls):
        cls.bundle, cls.gt = generate(tiny_world())
        cls.config = PipelineConfig(n_init=6, focal_px=410.0, seed=2)
        cls.pipeline = run_pipeline(cls.bundle, cls.config)
        cls.state = cls.pipeline.state

    def test_every_frame_registered(self):
        for fid in self.bundle.frame_ids:
            self.assertTrue(self.state.is_registered(int(fid)), f"frame {fid}")
        self.assertEqual(count_registered(self.pipeline.trajectory()), self.bundle.frame_count)

    def test_trajectory_matches_ground_truth(self):
        metrics = evaluate_trajectory(self.pipeline.trajectory(), self.bundle.gt_trajectory())
        self.assertLess(metrics['ate_rmse_over_extent'], 1e-6)
        self.assertEqual(metrics['breaks'], 0)

    def test_no_frame_lost(self):
        self.assertEqual(self.state.lost_frames, set())
        self.assertFalse([e for e in self.state.events if e['event'] == 'tracking_lost'])

    def test_anchors_point_at_keyframes(self):
        keyframes = set(self.state.keyframes)
        for fid, (host, _) in self.state.anchors.items():
            self.assertNotIn(fid, keyframes)
            self.assertIn(host, keyframes)

    def test_window_is_bounded(self):
        self.assertLessEqual(len(self.state.window), self.config.window_size)
        self.assertTrue(set(self.state.window) <= set(self.state.keyframes))

    def test_patches_belong_to_keyframes(self):
        keyframes = set(self.state.keyframes)
        self.assertTrue(all(key[0] in keyframes for key in self.state.patches))
        self.assertTrue(all(p.inv_depth > 0 for p in self.state.patches.values()))

    def test_init_event_logged(self):
        first = self.state.events[0]
        self.assertEqual(first['event'], 'init')
        self.assertEqual(first['focal'], 410.0)

    def test_pose_graph_export(self):
        graph = self.pipeline.pose_graph()
        keyframes = self.state.keyframes
        self.assertEqual([node.frame_id for node in graph.nodes], keyframes)
        self.assertEqual(len(graph.edges), len(keyframes) - 1)

    def test_loop_rejected_for_non_keyframe(self):
        anchored = next(iter(self.state.anchors), None)
        if anchored is None:
            self.skipTest("every frame became a keyframe")
        events = len(self.state.events)
        self.assertFalse(self.pipeline.close_loop(anchored, 0))
        self.assertEqual(self.state.events[events]['event'], 'loop_rejected')

    def test_post_refine_off(self):
        self.assertEqual(self.pipeline.post_refine('off'), {})

    def test_post_refine_unknown_mode(self):
        with self.assertRaises(InvalidValueException):
            self.pipeline.post_refine('polish')


class TestPostRefinement(unittest.TestCase):
    """Re-triangulation either lowers the cost or rolls back."""

    def test_refine_or_roll_back(self):
        bundle, _ = generate(tiny_world())
        pipeline = run_pipeline(bundle, PipelineConfig(n_init=6, focal_px=410.0))
        poses_before = {k: p.matrix() for k, p in pipeline.state.poses.items()}
        try:
            summary = pipeline.post_refine('retriangulate')
        except RefinementDivergedException:
            for k, matrix in poses_before.items():
                np.testing.assert_allclose(pipeline.state.poses[k].matrix(), matrix)
            self.assertEqual(pipeline.state.K.fx, 410.0)
            return
        self.assertLessEqual(summary['cost_after'], summary['cost_before'] * (1 + 1e-9) + 1e-12)
        self.assertLessEqual(abs(summary['focal_after'] / 410.0 - 1.0), 0.2)

    def test_recovers_focal_from_offset_start(self):
        bundle, gt = generate(tiny_world())
        config = PipelineConfig(n_init=6, focal_px=1.05 * 410.0, mu=0.0, use_loop_closure=False)
        pipeline = run_pipeline(bundle, config)
        summary = pipeline.post_refine('retriangulate+global_ba')
        self.assertAlmostEqual(summary['focal_after'] / gt.camera.fx, 1.0, delta=1e-3)
        self.assertLessEqual(summary['cost_after'], summary['cost_before'])
        self.assertEqual(pipeline.state.K_init.fx, 1.05 * 410.0)
        self.assertEqual(pipeline.state.events[-1]['event'], 'refine')


class TestDeterminism(unittest.TestCase):
    """Same bundle and seed give the same trajectory."""

    def test_repeat_run(self):
        bundle, _ = generate(tiny_world(trajectory_script=[Segment('arc', 10, 0.5, 30.0),
                                                           Segment('forward', 8, 0.5)]))
        config = PipelineConfig(n_init=6, focal_px=410.0, use_loop_closure=False)
        first = run_pipeline(bundle, config).trajectory()
        second = run_pipeline(bundle, config).trajectory()
        for a, b in zip(first.poses, second.poses):
            np.testing.assert_array_equal(a.matrix(), b.matrix())


class TestDynamicMasks(unittest.TestCase):
    """Masking moving objects keeps the crowded street close to its empty twin."""

    @classmethod
    def setUpClass(cls):
        crowded = standard_worlds()['crowded']
        empty = replace(crowded, dynamic_object_count=0, dynamic_fraction_of_view=0.0)

        def ate(spec, use_masks):
            bundle, _ = generate(spec)
            pipeline = run_pipeline(bundle, PipelineConfig(focal_px=410.0, use_loop_closure=False,
                                                           use_masks=use_masks))
            return ate_rmse(pipeline.trajectory(), bundle.gt_trajectory())

        cls.empty = ate(empty, True)
        cls.masked = ate(crowded, True)
        cls.unmasked = ate(crowded, False)

    def test_masked_run_close_to_empty_street(self):
        self.assertLessEqual(self.masked, 2.0 * self.empty)

    def test_unmasked_run_degrades(self):
        self.assertGreaterEqual(self.unmasked, 5.0 * self.masked)


class TestRotationDepthPriors(unittest.TestCase):
    """Through a rotation-only stretch the depth priors hold the map's depths."""

    ROTATION_FRAMES = range(46, 86)

    @classmethod
    def setUpClass(cls):
        spec = replace(standard_worlds()['plaza_rotation'], noise=NoiseSpec(0.5, 0.0, 0.0, 0.0))
        cls.bundle, cls.gt = generate(spec)
        table = cls.bundle.patches
        keys = zip(table['frame_id'].astype(int).tolist(), table['patch_id'].astype(int).tolist())
        cls.truth = dict(zip(keys, cls.gt.patch_depths.tolist()))
        cls.runs = {mu: run_pipeline(cls.bundle, PipelineConfig(mu=mu, focal_px=410.0, use_loop_closure=False))
                    for mu in (0.0, 0.05)}

    def depth_rms(self, pipeline):
        """Relative RMS depth error of rotation-segment patches after a median scale fit."""
        pairs = [(1.0 / patch.inv_depth, self.truth[key]) for key, patch in pipeline.state.patches.items()
                 if key[0] in self.ROTATION_FRAMES and key in self.truth]
        self.assertTrue(pairs)
        est, ref = np.array(pairs).T
        scale = np.median(ref / est)
        return float(np.sqrt(np.mean((scale * est / ref - 1.0) ** 2)))

    def test_priors_hold_depths(self):
        self.assertLessEqual(self.depth_rms(self.runs[0.05]), 0.1 * self.depth_rms(self.runs[0.0]))

    def test_no_breaks_with_priors(self):
        metrics = evaluate_trajectory(self.runs[0.05].trajectory(), self.bundle.gt_trajectory())
        self.assertEqual(metrics['breaks'], 0)
        self.assertEqual(metrics['models'], 1)


class TestCityLoop(unittest.TestCase):
    """Noise-free 500-frame block loop with the default configuration and a known focal length."""

    @classmethod
    def setUpClass(cls):
        spec = replace(standard_worlds()['city_loop'], noise=NoiseSpec.zero())
        cls.bundle, cls.gt = generate(spec)
        cls.pipeline = SlamPipeline(cls.bundle, PipelineConfig(focal_px=410.0))
        start = time.perf_counter()
        cls.pipeline.run()
        cls.elapsed = time.perf_counter() - start
        cls.state = cls.pipeline.state
        cls.metrics = evaluate_trajectory(cls.pipeline.trajectory(), cls.bundle.gt_trajectory())

    def test_runs_in_under_a_minute(self):
        self.assertEqual(self.bundle.frame_count, 500)
        self.assertLess(self.elapsed, 60.0)

    def test_one_complete_model(self):
        self.assertEqual(self.metrics['registered'], self.bundle.frame_count)
        self.assertEqual(self.metrics['models'], 1)
        self.assertEqual(self.metrics['breaks'], 0)
        self.assertEqual(self.state.lost_frames, set())

    def test_exact_trajectory(self):
        self.assertLess(self.metrics['ate_rmse_over_extent'], 1e-6)

    def test_revisit_is_closed(self):
        loops = [e for e in self.state.events if e['event'] == 'loop']
        self.assertGreaterEqual(len(loops), 1)
        self.assertTrue(all(e['query'] > 400 for e in loops))

    def keyframe_positions(self, state):
        keyframes = state.keyframes
        est = np.array([state.poses[k].center() for k in keyframes])
        ref = np.array([self.gt.poses[k].center() for k in keyframes])
        return est, ref

    def test_loop_corrects_scale_drift(self):
        """A 25% scale drift is mostly undone by one loop correction."""
        pipeline = self.pipeline
        saved = copy.deepcopy((pipeline.state, pipeline.loop_edges))
        try:
            state = pipeline.state
            state.poses, state.patches = inject_scale_drift(state.poses, state.patches, 0.25)
            est, ref = self.keyframe_positions(state)
            drifted = ate_rmse(est, ref)
            self.assertGreater(drifted, 0.01 * self.bundle.world['scene_extent'])

            query = state.window[-1]
            centers = self.gt.centers()
            match = int(np.argmin(np.linalg.norm(centers[:100] - centers[query], axis=1)))
            events = len(state.events)
            self.assertTrue(pipeline.close_loop(query, match))

            new_events = [e['event'] for e in state.events[events:]]
            self.assertIn('loop', new_events)
            pgo = [e for e in state.events[events:] if e['event'] == 'pgo'][0]
            self.assertLess(pgo['loop_residual_after'], 1e-3)
            est, ref = self.keyframe_positions(state)
            self.assertLessEqual(ate_rmse(est, ref), 0.2 * drifted)
        finally:
            pipeline.state, pipeline.loop_edges = saved


if __name__ == '__main__':
    unittest.main()
