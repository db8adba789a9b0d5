"""
Tests for descriptor retrieval and loop confirmation.
"""

import unittest
import sys
import os

import numpy as np

# Add src directory to path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), 'src'))

from src.exceptions import DuplicateFrameException, ValidationException
from src.frontend_sim import GroundTruth, Segment, assign_place_ids, integrate_script, render_descriptors
from src.lie_geometry import CameraIntrinsics
from src.loop_detection import Descriptor, DescriptorStore, LoopCandidate, LoopConfirmer, confirm


def unit(index, dim=8):
    vector = np.zeros(dim)
    vector[index] = 1.0
    return vector


def revisit_truth(seed=0, dim=64):
    """Ground truth of a closed square walked once and then partly retraced."""
    script = []
    for _ in range(4):
        script += [Segment('arc', 15, 0.5, 90.0), Segment('forward', 20, 0.5)]
    script += [Segment('arc', 15, 0.5, 90.0), Segment('forward', 10, 0.5)]
    positions, headings = integrate_script(script)
    place_ids = assign_place_ids(positions, headings, 1.0)
    return GroundTruth(
        poses=[], landmarks=np.zeros((0, 3)), landmark_kind=np.zeros(0, dtype=np.int64),
        place_ids=place_ids, patch_depths=np.zeros(0), patch_landmarks=np.zeros(0, dtype=np.int64),
        prior_scales=np.ones(len(positions)), camera=CameraIntrinsics.centered(410.0, 512, 288),
        seed=seed, scene_extent=60.0, descriptor_dim=dim,
    )


class TestDescriptorStore(unittest.TestCase):
    """Flat inner-product index."""

    def test_self_query_without_exclusion(self):
        store = DescriptorStore(temporal_exclusion=0)
        store.add(Descriptor(3, [1.0, 2.0, 2.0]))
        candidate = store.query(Descriptor(4, [1.0, 2.0, 2.0]))
        self.assertIsNotNone(candidate)
        self.assertEqual(candidate.match_frame, 3)
        self.assertAlmostEqual(candidate.similarity, 1.0, places=12)

    def test_vectors_are_normalized(self):
        descriptor = Descriptor(0, [3.0, 4.0])
        np.testing.assert_allclose(descriptor.vector, [0.6, 0.8])

    def test_zero_vector_rejected(self):
        with self.assertRaises(ValidationException):
            Descriptor(0, np.zeros(4))

    def test_orthogonal_is_no_match(self):
        store = DescriptorStore(temporal_exclusion=0)
        store.add(Descriptor(0, unit(0)))
        self.assertIsNone(store.query(Descriptor(10, unit(1))))

    def test_exclusion_window(self):
        store = DescriptorStore(temporal_exclusion=90)
        store.add(Descriptor(20, unit(0)))
        self.assertIsNone(store.query(Descriptor(100, unit(0))))
        match = store.query(Descriptor(111, unit(0)))
        self.assertEqual(match.match_frame, 20)
        self.assertEqual(store.query(Descriptor(100, unit(0)), temporal_exclusion=10).match_frame, 20)

    def test_best_match_wins(self):
        store = DescriptorStore(similarity_threshold=0.5, temporal_exclusion=0)
        store.add(Descriptor(0, [1.0, 0.2, 0, 0]))
        store.add(Descriptor(1, [1.0, 0.05, 0, 0]))
        store.add(Descriptor(2, [0, 1.0, 0, 0]))
        self.assertEqual(store.query(Descriptor(5, [1.0, 0, 0, 0])).match_frame, 1)

    def test_duplicate_frame(self):
        store = DescriptorStore()
        store.add(Descriptor(1, unit(0)))
        with self.assertRaises(DuplicateFrameException):
            store.add(Descriptor(1, unit(1)))

    def test_dimension_mismatch(self):
        store = DescriptorStore()
        store.add(Descriptor(1, unit(0, dim=8)))
        with self.assertRaises(ValidationException):
            store.add(Descriptor(2, unit(0, dim=16)))
        self.assertEqual(store.dimension, 8)

    def test_store_grows_past_initial_capacity(self):
        store = DescriptorStore(temporal_exclusion=0)
        rng = np.random.default_rng(0)
        for k in range(200):
            store.add(Descriptor(k, rng.standard_normal(16)))
        self.assertEqual(len(store), 200)
        candidate = store.query(Descriptor(500, store._vectors[150]))
        self.assertEqual(candidate.match_frame, 150)

    def test_empty_store(self):
        self.assertIsNone(DescriptorStore().query(Descriptor(0, unit(0))))


class TestLoopConfirmer(unittest.TestCase):
    """Streak-based confirmation."""

    def candidates(self, pairs):
        return [None if pair is None else LoopCandidate(pair[0], pair[1], 0.95) for pair in pairs]

    def test_three_consecutive_matches(self):
        loops = confirm(self.candidates([(500, 100), (501, 101), (502, 102)]))
        self.assertEqual(loops, [(502, 102)])

    def test_gap_resets_streak(self):
        loops = confirm(self.candidates([(500, 100), (501, 101), None, (503, 103)]))
        self.assertEqual(loops, [])

    def test_two_matches_are_not_enough(self):
        self.assertEqual(confirm(self.candidates([(500, 100), (501, 101)])), [])

    def test_match_within_tolerance(self):
        loops = confirm(self.candidates([(500, 100), (501, 103), (502, 102)]), tolerance=2)
        self.assertEqual(loops, [(502, 102)])

    def test_jumping_match_resets_streak(self):
        loops = confirm(self.candidates([(500, 100), (501, 160), (502, 161)]))
        self.assertEqual(loops, [])

    def test_cooldown(self):
        stream = [(500 + k, 100 + k) for k in range(12)]
        loops = confirm(self.candidates(stream), cooldown=50)
        self.assertEqual(loops, [(502, 102)])
        loops = confirm(self.candidates(stream), cooldown=3)
        self.assertEqual(loops, [(502, 102), (505, 105), (508, 108), (511, 111)])

    def test_reset(self):
        confirmer = LoopConfirmer()
        confirmer.push(LoopCandidate(500, 100, 0.95))
        confirmer.push(LoopCandidate(501, 101, 0.95))
        confirmer.reset()
        self.assertIsNone(confirmer.push(LoopCandidate(502, 102, 0.95)))

    def test_invalid_streak_length(self):
        with self.assertRaises(ValidationException):
            LoopConfirmer(consecutive=0)


class TestRevisit(unittest.TestCase):
    """Retrieval over descriptors rendered from a revisiting trajectory."""

    def setUp(self):
        self.gt = revisit_truth()
        self.descriptors = render_descriptors(self.gt, sigma=0.05)

    def run_stream(self):
        store = DescriptorStore(similarity_threshold=0.9, temporal_exclusion=90)
        candidates = []
        for descriptor in self.descriptors:
            candidates.append(store.query(descriptor))
            store.add(descriptor)
        return candidates

    def test_revisited_frames_find_their_place(self):
        candidates = self.run_stream()
        revisit_start = 141
        for query in range(revisit_start, len(self.descriptors)):
            candidate = candidates[query]
            self.assertIsNotNone(candidate, f"frame {query}")
            self.assertEqual(self.gt.place_ids[candidate.match_frame], self.gt.place_ids[query])
        self.assertTrue(all(c is None for c in candidates[:130]))

    def test_loop_is_confirmed(self):
        loops = confirm(self.run_stream())
        self.assertGreaterEqual(len(loops), 1)
        query, match = loops[0]
        self.assertGreaterEqual(query, 130)
        self.assertLess(match, 30)

    def test_rendering_is_deterministic(self):
        again = render_descriptors(revisit_truth(), sigma=0.05)
        for a, b in zip(self.descriptors, again):
            np.testing.assert_array_equal(a.vector, b.vector)
        other = render_descriptors(revisit_truth(seed=1), sigma=0.05)
        self.assertFalse(np.allclose(self.descriptors[0].vector, other[0].vector))


if __name__ == '__main__':
    unittest.main()
