#!/usr/bin/env python3
"""
Test module for corpus persistence
"""

import sys
import tempfile
import unittest
from pathlib import Path

import numpy as np

# Add src directory to path for imports
sys.path.append(str(Path(__file__).parent.parent.parent / "src"))

from corpus_io import (
    MANIFEST_FORMAT, MANIFEST_NAME, Corpus, CorpusError, CorpusFormatError, CorpusLocationError,
    jsonable, load_scene, prepare_output_dir, read_manifest, save_scene, write_corpus, write_jsonl,
)
from radar import RadarFormatError, load_radar_frame, save_radar_frame
from synth_scenes import CorpusConfig, CorruptionConfig, RadarNoiseConfig, SceneConfig, generate_scene, plan_corpus


class TestScenePersistence(unittest.TestCase):
    """Scene directories"""

    def setUp(self):
        self.temp_dir = tempfile.TemporaryDirectory()
        self.root = Path(self.temp_dir.name)
        self.scene = generate_scene(SceneConfig(image_height=32, image_width=48, rng_seed=4),
                                    RadarNoiseConfig(), CorruptionConfig("blur", 0.5, 4), scene_id="s00004")

    def tearDown(self):
        self.temp_dir.cleanup()

    def test_scene_round_trip(self):
        """Test a saved scene reloads with identical GT, radar and metadata"""
        loaded = load_scene(save_scene(self.scene, self.root / "s00004"))
        np.testing.assert_array_equal(loaded.gt.channels, self.scene.gt.channels)
        np.testing.assert_array_equal(loaded.radar.as_matrix(), self.scene.radar.as_matrix())
        self.assertEqual(loaded.radar.labels, self.scene.radar.labels)
        self.assertEqual(loaded.camera, self.scene.camera)
        self.assertEqual(loaded.corruption, self.scene.corruption)
        np.testing.assert_array_equal(loaded.point_sources, self.scene.point_sources)
        self.assertLessEqual(np.abs(loaded.image - self.scene.image).max(), 0.5 / 255 + 1e-12)

    def test_missing_scene_file(self):
        """Test a scene directory missing a file is rejected"""
        scene_dir = save_scene(self.scene, self.root / "s00004")
        (scene_dir / "radar.txt").unlink()
        with self.assertRaises(CorpusLocationError):
            load_scene(scene_dir)

    def test_malformed_metadata(self):
        scene_dir = save_scene(self.scene, self.root / "s00004")
        (scene_dir / "meta.yaml").write_text("scene_id: s00004\n", encoding="utf-8")
        with self.assertRaises(CorpusFormatError):
            load_scene(scene_dir)


class TestRadarText(unittest.TestCase):
    """Radar text files inside scene directories"""

    def setUp(self):
        self.temp_dir = tempfile.TemporaryDirectory()
        self.root = Path(self.temp_dir.name)

    def tearDown(self):
        self.temp_dir.cleanup()

    def test_bad_field_count_reports_line(self):
        path = self.root / "radar.txt"
        path.write_text("# harborsight radar v1\ns0 1.0 2.0 3.0\n", encoding="utf-8")
        with self.assertRaises(RadarFormatError) as ctx:
            load_radar_frame(path)
        self.assertIn(":2", str(ctx.exception))

    def test_non_finite_values_are_format_errors(self):
        """Test nan components and out-of-range labels name the file"""
        path = self.root / "radar.txt"
        path.write_text("# harborsight radar v1\ns0 1.0 nan 3.0 -5.0 0.1 2\n", encoding="utf-8")
        with self.assertRaises(RadarFormatError) as ctx:
            load_radar_frame(path)
        self.assertIn(":2", str(ctx.exception))
        path.write_text("# harborsight radar v1\ns0 1.0 0.5 3.0 -5.0 0.1 42\n", encoding="utf-8")
        with self.assertRaises(RadarFormatError):
            load_radar_frame(path)

    def test_empty_frame_round_trip(self):
        scene = generate_scene(SceneConfig(object_count_min=0, object_count_max=0, rng_seed=1),
                               RadarNoiseConfig(clutter_rate=0.0), CorruptionConfig())
        frame = load_radar_frame(save_radar_frame(scene.radar, self.root / "radar.txt"))
        self.assertEqual(len(frame), 0)


class TestJsonLines(unittest.TestCase):
    """Line-delimited JSON records"""

    def test_sorted_keys_and_null_for_non_finite(self):
        with tempfile.TemporaryDirectory() as temp_dir:
            path = write_jsonl([{"b": 1, "a": float("inf")}, {"scores": [0.5, float("nan")]}],
                               Path(temp_dir) / "nested" / "x.jsonl")
            self.assertEqual(path.read_text(encoding="utf-8"),
                             '{"a": null, "b": 1}\n{"scores": [0.5, null]}\n')

    def test_jsonable_recurses(self):
        self.assertEqual(jsonable({"a": (1.0, float("-inf")), "b": {"c": float("nan")}}),
                         {"a": [1.0, None], "b": {"c": None}})


class TestCorpusDirectory(unittest.TestCase):
    """Corpus writing, manifests and output directories"""

    def setUp(self):
        self.temp_dir = tempfile.TemporaryDirectory()
        self.root = Path(self.temp_dir.name)
        self.plans = plan_corpus(CorpusConfig(count=6, seed=2))
        self.scene_cfg = SceneConfig(image_height=32, image_width=32)

    def tearDown(self):
        self.temp_dir.cleanup()

    def test_write_and_read_corpus(self):
        """Test the manifest lists every scene and scenes reload through Corpus"""
        write_corpus(self.root / "corpus", self.plans, self.scene_cfg, RadarNoiseConfig())
        manifest = read_manifest(self.root / "corpus")
        self.assertEqual(manifest.header["format"], MANIFEST_FORMAT)
        self.assertEqual([e.scene_id for e in manifest.entries], [p.scene_id for p in self.plans])
        corpus = Corpus(self.root / "corpus")
        self.assertEqual(len(corpus), 6)
        for entry, scene in zip(corpus.entries(), corpus.scenes()):
            self.assertEqual(scene.scene_id, entry.scene_id)
            self.assertEqual(len(scene.radar), entry.n_points)
        adverse = corpus.entries(adverse_only=True)
        self.assertTrue(all(e.is_adverse for e in adverse))

    def test_corpus_bytes_are_deterministic(self):
        """Test two generations with equal settings write identical files"""
        write_corpus(self.root / "a", self.plans, self.scene_cfg, RadarNoiseConfig())
        write_corpus(self.root / "b", self.plans, self.scene_cfg, RadarNoiseConfig())
        files_a = sorted(p.relative_to(self.root / "a") for p in (self.root / "a").rglob("*") if p.is_file())
        files_b = sorted(p.relative_to(self.root / "b") for p in (self.root / "b").rglob("*") if p.is_file())
        self.assertEqual(files_a, files_b)
        for rel in files_a:
            self.assertEqual((self.root / "a" / rel).read_bytes(), (self.root / "b" / rel).read_bytes(), str(rel))

    def test_refuses_non_empty_directory_without_force(self):
        """Test existing output is kept unless force is given"""
        target = self.root / "out"
        target.mkdir()
        (target / "keep.txt").write_text("x", encoding="utf-8")
        with self.assertRaises(CorpusLocationError):
            prepare_output_dir(target)
        prepare_output_dir(target, force=True)
        self.assertEqual(list(target.iterdir()), [])

    def test_output_path_is_a_file(self):
        path = self.root / "file"
        path.write_text("x", encoding="utf-8")
        with self.assertRaises(CorpusLocationError):
            prepare_output_dir(path)

    def test_missing_or_unknown_manifest(self):
        """Test missing corpora and foreign manifests are rejected"""
        with self.assertRaises(CorpusLocationError):
            Corpus(self.root / "nowhere")
        (self.root / "c").mkdir()
        (self.root / "c" / MANIFEST_NAME).write_text("# format=other\n", encoding="utf-8")
        with self.assertRaises(CorpusFormatError):
            read_manifest(self.root / "c")
        self.assertTrue(issubclass(CorpusFormatError, CorpusError))

    def test_bad_manifest_line(self):
        (self.root / "c").mkdir()
        (self.root / "c" / MANIFEST_NAME).write_text(
            f"# format={MANIFEST_FORMAT}\ns00000 train\n", encoding="utf-8")
        with self.assertRaises(CorpusFormatError):
            read_manifest(self.root / "c")


if __name__ == '__main__':
    unittest.main()
