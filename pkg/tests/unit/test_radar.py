#!/usr/bin/env python3
"""
Test module for radar frames, sampling, projection and the point networks
"""

import shutil
import sys
import tempfile
import unittest
from pathlib import Path

import numpy as np

# Add src directory to path for imports
sys.path.append(str(Path(__file__).parent.parent.parent / "src"))

from losses_metrics import ClassWeights, focal_loss
from mask_ops import NUM_CLASSES
from numerics import gradient_relative_error
from radar import (
    CameraModel, RadarError, RadarFormatError, RadarFrame, RadarPoint, SampledPoints, classify_points,
    encode_points, init_point_classifier, init_point_encoder, load_radar_frame, project_array,
    project_points, sample_or_pad, save_radar_frame,
)

WIDTHS = (4, 6, 8, 10)


def random_frame(rng, count, labeled=True, frame_id="f0"):
    matrix = np.column_stack([rng.uniform(-5, 5, count), rng.uniform(0, 2, count),
                              rng.uniform(2, 40, count), rng.uniform(-10, 20, count),
                              rng.uniform(-3, 3, count)])
    labels = rng.integers(0, NUM_CLASSES, count).tolist() if labeled else None
    return RadarFrame.from_matrix(matrix, labels, frame_id)


class TestRadarTypes(unittest.TestCase):
    """Validation of points, frames and cameras"""

    def test_point_rejects_non_finite(self):
        """Test every component must be finite"""
        with self.assertRaises(RadarError):
            RadarPoint(0.0, float("nan"), 1.0, 0.0, 0.0)
        with self.assertRaises(RadarError):
            RadarPoint(0.0, 0.0, float("inf"), 0.0, 0.0)

    def test_frame_label_length_and_range(self):
        """Test labels must match the point count and the class range"""
        points = [RadarPoint(0, 0, 5, 1, 0), RadarPoint(1, 0, 5, 1, 0)]
        with self.assertRaises(RadarError):
            RadarFrame(points, labels=[1])
        with self.assertRaises(RadarError):
            RadarFrame(points, labels=[1, NUM_CLASSES])
        self.assertEqual(len(RadarFrame(points, labels=[0, 8])), 2)

    def test_frame_id_without_whitespace(self):
        """Test frame ids are single tokens in the text format"""
        with self.assertRaises(RadarError):
            RadarFrame([], frame_id="two words")

    def test_camera_validation(self):
        """Test focal lengths and principal point are checked"""
        with self.assertRaises(RadarError):
            CameraModel(0, 100, 10, 10, 64, 64)
        with self.assertRaises(RadarError):
            CameraModel(100, 100, 64, 10, 64, 64)


class TestSampleOrPad(unittest.TestCase):
    """Fixed-size radar inputs"""

    def setUp(self):
        self.rng = np.random.default_rng(11)

    def test_large_frame_is_sampled(self):
        """Test 1500 points → 1000 valid rows drawn from the input"""
        frame = random_frame(self.rng, 1500)
        sampled = sample_or_pad(frame, 1000, rng_seed=3)
        self.assertEqual(sampled.target_count, 1000)
        self.assertEqual(sampled.valid_count, 1000)
        self.assertEqual(len(set(sampled.source_indices.tolist())), 1000)
        np.testing.assert_array_equal(sampled.matrix, frame.as_matrix()[sampled.source_indices])
        self.assertTrue(np.all(np.diff(sampled.source_indices) > 0))

    def test_empty_frame_is_all_padding(self):
        """Test an empty frame yields zero rows that are all invalid"""
        sampled = sample_or_pad(RadarFrame([]), 1000, rng_seed=0)
        self.assertEqual(sampled.matrix.shape, (1000, 5))
        self.assertFalse(sampled.valid.any())
        self.assertTrue(np.all(sampled.matrix == 0))

    def test_exact_size_keeps_order(self):
        """Test N_p == target keeps the input unchanged"""
        frame = random_frame(self.rng, 1000)
        sampled = sample_or_pad(frame, 1000, rng_seed=9)
        np.testing.assert_array_equal(sampled.matrix, frame.as_matrix())
        self.assertTrue(sampled.valid.all())

    def test_small_frame_padded_after_points(self):
        """Test fewer points are kept in order and followed by zero rows"""
        frame = random_frame(self.rng, 7)
        sampled = sample_or_pad(frame, 10, rng_seed=0)
        np.testing.assert_array_equal(sampled.matrix[:7], frame.as_matrix())
        np.testing.assert_array_equal(sampled.valid, [True] * 7 + [False] * 3)
        self.assertTrue(np.all(sampled.matrix[7:] == 0))
        np.testing.assert_array_equal(sampled.source_indices[7:], [-1, -1, -1])

    def test_deterministic_per_seed(self):
        """Test identical seeds select identical rows and different seeds differ"""
        frame = random_frame(self.rng, 300)
        a = sample_or_pad(frame, 100, rng_seed=5)
        b = sample_or_pad(frame, 100, rng_seed=5)
        c = sample_or_pad(frame, 100, rng_seed=6)
        np.testing.assert_array_equal(a.source_indices, b.source_indices)
        self.assertFalse(np.array_equal(a.source_indices, c.source_indices))

    def test_target_count_must_be_positive(self):
        """Test target_count below one is rejected"""
        with self.assertRaises(RadarError):
            sample_or_pad(RadarFrame([]), 0, rng_seed=0)

    def test_labels_from_marks_padding(self):
        """Test padded rows have label -1 and valid rows follow their source"""
        frame = random_frame(self.rng, 4)
        sampled = sample_or_pad(frame, 6, rng_seed=0)
        labels = sampled.labels_from(frame)
        np.testing.assert_array_equal(labels[:4], frame.labels)
        np.testing.assert_array_equal(labels[4:], [-1, -1])
        unlabeled = random_frame(self.rng, 4, labeled=False)
        self.assertTrue(np.all(sample_or_pad(unlabeled, 6, 0).labels_from(unlabeled) == -1))


class TestProjection(unittest.TestCase):
    """Pinhole projection"""

    def setUp(self):
        self.cam = CameraModel(fx=100, fy=100, cx=160, cy=160, width=320, height=320)

    def test_optical_axis(self):
        """Test a point on the optical axis lands on the principal point"""
        (u, v, in_view), = project_points(RadarFrame([RadarPoint(0, 0, 5, 0, 0)]), self.cam)
        self.assertEqual((u, v), (160.0, 160.0))
        self.assertTrue(in_view)

    def test_behind_camera(self):
        """Test points behind the camera are out of view with NaN coordinates"""
        (u, v, in_view), = project_points(RadarFrame([RadarPoint(1, 0, -2, 0, 0)]), self.cam)
        self.assertFalse(in_view)
        self.assertTrue(np.isnan(u) and np.isnan(v))

    def test_hand_computed_projection(self):
        """Test (1, 0.5, 4) with f=100, c=160 → (185, 172.5)"""
        (u, v, in_view), = project_points(RadarFrame([RadarPoint(1, 0.5, 4, 0, 0)]), self.cam)
        self.assertAlmostEqual(u, 185.0, places=12)
        self.assertAlmostEqual(v, 172.5, places=12)
        self.assertTrue(in_view)

    def test_outside_image_bounds(self):
        """Test points in front of the camera but off the sensor are out of view"""
        u, v, in_view = project_array(np.array([[100.0, 0.0, 5.0]]), self.cam)
        self.assertGreater(u[0], self.cam.width)
        self.assertFalse(in_view[0])

    def test_z_min_cutoff(self):
        """Test depth at or below z_min is out of view"""
        u, _, in_view = project_array(np.array([[0.0, 0.0, 0.1], [0.0, 0.0, 0.11]]), self.cam, z_min=0.1)
        self.assertFalse(in_view[0])
        self.assertTrue(in_view[1])

    def test_back_projection_round_trip(self):
        """Test back-projecting (u, v, z) recovers (x, y)"""
        rng = np.random.default_rng(2)
        xyz = np.column_stack([rng.uniform(-3, 3, 50), rng.uniform(-1, 1, 50), rng.uniform(1, 30, 50)])
        u, v, _ = project_array(xyz, self.cam)
        for (x, y, z), a, b in zip(xyz, u, v):
            bx, by = self.cam.back_project(a, b, z)
            self.assertAlmostEqual(bx, x, delta=1e-9)
            self.assertAlmostEqual(by, y, delta=1e-9)


class TestPointNetworks(unittest.TestCase):
    """Shared-MLP encoder and classification head"""

    def setUp(self):
        self.rng = np.random.default_rng(4)
        self.params = init_point_encoder(WIDTHS, np.random.default_rng(0))
        self.params.update(init_point_classifier(WIDTHS[-1], 12, NUM_CLASSES, np.random.default_rng(1)))

    def test_feature_widths_match_levels(self):
        """Test each level has shape (target_count, C_i)"""
        sampled = sample_or_pad(random_frame(self.rng, 20), 32, rng_seed=0)
        features = encode_points(sampled, self.params)
        self.assertEqual([f.shape for f in features], [(32, w) for w in WIDTHS])

    def test_padding_never_leaks(self):
        """Test all-invalid input yields all-zero features"""
        sampled = sample_or_pad(RadarFrame([]), 16, rng_seed=0)
        for features in encode_points(sampled, self.params):
            self.assertTrue(np.all(features.data == 0))

    def test_padded_rows_zero_even_with_nonzero_matrix(self):
        """Test invalid rows are zeroed by the validity flags, not by their values"""
        matrix = self.rng.normal(size=(5, 5))
        valid = np.array([True, False, True, False, True])
        features = encode_points(SampledPoints(matrix, valid), self.params)
        for level in features:
            self.assertTrue(np.all(level.data[~valid] == 0))

    def test_permutation_equivariance(self):
        """Test permuting input rows permutes per-point features identically"""
        sampled = sample_or_pad(random_frame(self.rng, 12), 12, rng_seed=0)
        perm = self.rng.permutation(12)
        permuted = SampledPoints(sampled.matrix[perm], sampled.valid[perm])
        for a, b in zip(encode_points(sampled, self.params), encode_points(permuted, self.params)):
            np.testing.assert_allclose(a.data[perm], b.data, atol=1e-12)

    def test_classifier_rows_are_distributions(self):
        """Test probabilities sum to one and invalid rows are uniform"""
        sampled = sample_or_pad(random_frame(self.rng, 6), 9, rng_seed=0)
        probs = classify_points(encode_points(sampled, self.params)[-1], self.params, sampled.valid).data
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-9)
        np.testing.assert_allclose(probs[6:], 1.0 / NUM_CLASSES, atol=1e-12)

    def test_zero_initialization_is_uniform(self):
        """Test the all-zero head predicts 1/C_cls everywhere"""
        params = dict(self.params)
        params.update(init_point_classifier(WIDTHS[-1], 12, NUM_CLASSES, zero=True))
        sampled = sample_or_pad(random_frame(self.rng, 6), 6, rng_seed=0)
        probs = classify_points(encode_points(sampled, params)[-1], params, sampled.valid).data
        np.testing.assert_allclose(probs, 1.0 / NUM_CLASSES, atol=1e-12)

    def test_focal_gradient_through_head(self):
        """Test focal-loss gradients through encoder and head match finite differences"""
        weights = ClassWeights(np.linspace(0.5, 1.5, NUM_CLASSES), gamma=2.0)
        for seed in range(5):
            rng = np.random.default_rng(seed)
            frame = random_frame(rng, 6)
            sampled = sample_or_pad(frame, 8, rng_seed=seed)
            targets = sampled.labels_from(frame)
            params = init_point_encoder((3, 4, 4, 5), rng)
            params.update(init_point_classifier(5, 6, NUM_CLASSES, rng))

            def loss():
                feats = encode_points(sampled, params)[-1]
                return focal_loss(classify_points(feats, params, sampled.valid), targets, weights, sampled.valid)

            checked = [params["cls.h.w"], params["cls.out.w"], params["cls.out.b"], params["point.l4.w"]]
            self.assertLess(gradient_relative_error(loss, checked), 1e-4)


class TestRadarTextFormat(unittest.TestCase):
    """radar.txt persistence"""

    def setUp(self):
        self.temp_dir = tempfile.mkdtemp()
        self.temp_path = Path(self.temp_dir)

    def tearDown(self):
        shutil.rmtree(self.temp_dir)

    def test_labeled_frame_survives_exactly(self):
        """Test floats and labels are reproduced bit-exactly"""
        frame = random_frame(np.random.default_rng(8), 25, frame_id="s00003")
        loaded = load_radar_frame(save_radar_frame(frame, self.temp_path / "radar.txt"))
        np.testing.assert_array_equal(loaded.as_matrix(), frame.as_matrix())
        self.assertEqual(loaded.labels, frame.labels)
        self.assertEqual(loaded.frame_id, "s00003")

    def test_unlabeled_frame(self):
        """Test -1 labels load back as an unlabeled frame"""
        frame = random_frame(np.random.default_rng(8), 3, labeled=False)
        loaded = load_radar_frame(save_radar_frame(frame, self.temp_path / "radar.txt"))
        self.assertIsNone(loaded.labels)

    def test_wrong_field_count(self):
        """Test malformed lines name the file and line"""
        path = self.temp_path / "radar.txt"
        path.write_text("# harborsight radar v1\nf0 1 2 3 4 5\n", encoding="utf-8")
        with self.assertRaises(RadarFormatError) as ctx:
            load_radar_frame(path)
        self.assertIn("radar.txt:2", str(ctx.exception))

    def test_mixed_labels_rejected(self):
        """Test a frame cannot be partly labeled"""
        path = self.temp_path / "radar.txt"
        path.write_text("f0 1.0 0.0 5.0 1.0 0.0 3\nf0 1.0 0.0 6.0 1.0 0.0 -1\n", encoding="utf-8")
        with self.assertRaises(RadarFormatError):
            load_radar_frame(path)


if __name__ == '__main__':
    unittest.main()
