#!/usr/bin/env python3
"""
Test module for the three-stage pipeline, training loops and evaluation
"""

import math
import shutil
import sys
import tempfile
import unittest
from dataclasses import replace
from pathlib import Path
from unittest.mock import patch

import numpy as np

# Add src directory to path for imports
sys.path.append(str(Path(__file__).parent.parent.parent / "src"))

from fusion_attention import decode_masks, encode_image, query_projection
from inpaint_orchestrator import IdentityInpainter, InpaintConfig, MockTextureInpainter
from mask_ops import NUM_CLASSES, WATER_INDEX
from numerics import Tensor, gradient_relative_error, mul, sum_all, zeros
from pipeline import (
    ABLATIONS, STAGE3_VARIANTS, EvaluationResult, ExperimentInputs, FullPipelinePredictor, ModelConfig,
    PipelineError, Stage1Model, Stage1Output, Stage1Predictor, Stage2Settings, Stage3Model, TrainConfig,
    TrainingDivergenceError, evaluate_scenes, fuse_branches, inpaint_scene, precompute_stage3_inputs,
    run_ablation, stage1_forward, stage2_run, stage3_predict, train_stage1, train_stage3,
)
from prompt_masker import EmptyMasker, RegionGrowMasker
from radar import RadarFrame
from synth_scenes import CorruptionConfig, RadarNoiseConfig, SceneConfig, generate_scene

SMALL_MODEL = ModelConfig(widths=(4, 4, 4, 4), decoder_width=4, classifier_hidden=4, target_count=48)
FAST_TRAIN = TrainConfig(lr_initial=1e-2, lr_final=1e-3, batch_size=2, epochs=1, rng_seed=0)


def small_scene(seed, corruption=None, **overrides):
    cfg = SceneConfig(image_height=32, image_width=32, object_count_min=1, object_count_max=2,
                      rng_seed=seed, **overrides)
    return generate_scene(cfg, RadarNoiseConfig(points_per_object_min=10, points_per_object_max=20),
                          corruption or CorruptionConfig(), scene_id=f"s{seed:05d}")


class TestStage1(unittest.TestCase):
    """Stage-1 model and forward pass"""

    def setUp(self):
        self.scene = small_scene(1)
        self.model = Stage1Model.initialize(SMALL_MODEL, seed=0)

    def test_parameter_groups(self):
        """Test radar and camera-only models hold the expected parameter groups"""
        names = set(self.model.params)
        self.assertIn("point.l1.w", names)
        self.assertIn("cls.out.w", names)
        self.assertIn("caf.l4.wv", names)
        camera = Stage1Model.initialize(replace(SMALL_MODEL, use_radar=False), seed=0)
        self.assertFalse(any(n.startswith(("point.", "cls.")) or n.endswith((".wk", ".wv"))
                             for n in camera.params))
        self.assertLess(camera.parameter_count, self.model.parameter_count)

    def test_forward_shapes(self):
        """Test M_init covers the image and every sampled point gets a distribution"""
        out = stage1_forward(self.scene, self.model)
        self.assertEqual(out.probs.shape, (32, 32, NUM_CLASSES))
        self.assertEqual(out.point_probs.shape, (48, NUM_CLASSES))
        self.assertEqual(out.sampled.valid_count, min(len(self.scene.radar), 48))
        np.testing.assert_allclose(out.m_init.channels.sum(axis=0), 1.0, atol=1e-9)
        np.testing.assert_allclose(out.point_probs.data.sum(axis=1), 1.0, atol=1e-12)

    def test_same_seed_same_model(self):
        a = Stage1Model.initialize(SMALL_MODEL, seed=3)
        b = Stage1Model.initialize(SMALL_MODEL, seed=3)
        for name in a.params:
            np.testing.assert_array_equal(a.params[name].data, b.params[name].data)

    def test_empty_radar_uses_query_projection(self):
        """Test a frame without points decodes the query projections alone"""
        empty = replace(self.scene, radar=RadarFrame(points=[], labels=[], frame_id=self.scene.scene_id))
        out = stage1_forward(empty, self.model)
        pyramid = encode_image(empty.image, self.model.params)
        fused = [query_projection(f, self.model.params, level) for level, f in enumerate(pyramid, start=1)]
        expected = decode_masks(fused, self.model.params, 32, 32)
        np.testing.assert_allclose(out.probs.data, expected.data, atol=1e-12)

    def test_camera_only_forward(self):
        camera = Stage1Model.initialize(replace(SMALL_MODEL, use_radar=False), seed=0)
        out = stage1_forward(self.scene, camera)
        self.assertIsNone(out.point_probs)
        self.assertEqual(out.probs.shape, (32, 32, NUM_CLASSES))

    def test_checkpoint_round_trip(self):
        """Test a saved model reloads and predicts identically"""
        temp_dir = tempfile.mkdtemp()
        try:
            path = self.model.save(Path(temp_dir) / "stage1.ckpt")
            loaded = Stage1Model.load(path)
            self.assertEqual(loaded.config, self.model.config)
            np.testing.assert_array_equal(Stage1Predictor(loaded)(self.scene).channels,
                                          Stage1Predictor(self.model)(self.scene).channels)
            with self.assertRaises(PipelineError):
                Stage3Model.load(path)
        finally:
            shutil.rmtree(temp_dir, ignore_errors=True)


class TestStage2(unittest.TestCase):
    """Radar-prompted pseudo-masks and noise reduction"""

    def setUp(self):
        self.scene = small_scene(2)
        self.model = Stage1Model.initialize(SMALL_MODEL, seed=0)

    def test_empty_masker_keeps_m_init(self):
        """Test no pseudo-masks leave M_nr equal to M_init"""
        result = stage2_run(self.scene, self.model, EmptyMasker())
        np.testing.assert_array_equal(result.m_sam.channels, 0.0)
        np.testing.assert_array_equal(result.m_nr.channels, result.m_init.channels)

    def test_region_grow_only_adds_object_mass(self):
        """Test noise reduction never lowers object channels and copies background and water"""
        result = stage2_run(self.scene, self.model, RegionGrowMasker())
        self.assertEqual(result.prompt_count, min(len(self.scene.radar), 48))
        objects = list(result.m_init.object_indices)
        self.assertTrue(np.all(result.m_nr.channels[objects] >= result.m_init.channels[objects]))
        np.testing.assert_array_equal(result.m_nr.channels[0], result.m_init.channels[0])
        np.testing.assert_array_equal(result.m_nr.channels[WATER_INDEX], result.m_init.channels[WATER_INDEX])

    def test_clutter_only_scene_keeps_m_init(self):
        """Test pseudo-masks grown from water clutter are erased when M_init sees only background and water"""
        cfg = SceneConfig(image_height=32, image_width=32, object_count_min=0, object_count_max=0, rng_seed=4)
        scene = generate_scene(cfg, RadarNoiseConfig(clutter_rate=20.0), CorruptionConfig(), scene_id="clutter")
        self.assertGreater(len(scene.radar), 0)
        live = stage1_forward(scene, self.model)
        confident = Stage1Output(Tensor(np.transpose(scene.gt.channels, (1, 2, 0))), live.point_probs,
                                 live.sampled)
        result = stage2_run(scene, self.model, RegionGrowMasker(), stage1_output=confident)
        self.assertGreater(result.prompt_count, 0)
        np.testing.assert_array_equal(result.m_nr.channels, scene.gt.channels)
        np.testing.assert_array_equal(result.m_nr.channels[list(result.m_nr.object_indices)], 0.0)

    def test_camera_only_model_has_no_prompts(self):
        camera = Stage1Model.initialize(replace(SMALL_MODEL, use_radar=False), seed=0)
        result = stage2_run(self.scene, camera, RegionGrowMasker())
        self.assertEqual(result.prompt_count, 0)
        np.testing.assert_array_equal(result.m_nr.channels, result.m_init.channels)


class TestStage3(unittest.TestCase):
    """Dual-encoder fusion variants"""

    def setUp(self):
        self.scene = small_scene(3)
        self.inpainted = MockTextureInpainter().texture(32, 32, 4, InpaintConfig())

    def test_every_variant_predicts_distributions(self):
        for variant in STAGE3_VARIANTS:
            model = Stage3Model.initialize(SMALL_MODEL, variant, seed=0)
            probs = stage3_predict(self.scene.image, self.inpainted, model)
            self.assertEqual(probs.shape, (32, 32, NUM_CLASSES), variant)
            np.testing.assert_allclose(probs.data.sum(axis=2), 1.0, atol=1e-9)

    def test_parameter_counts_by_variant(self):
        """Test gating adds one logit per channel and concatenation a 2C×C projection per level"""
        counts = {v: Stage3Model.initialize(SMALL_MODEL, v).parameter_count for v in STAGE3_VARIANTS}
        self.assertEqual(counts["gated"] - counts["addition"], 16)
        self.assertEqual(counts["concatenation"] - counts["addition"], 4 * (8 * 4 + 4))
        self.assertLess(counts["inpaint_only"], counts["addition"])

    def test_branch_fusion_rules(self):
        """Test addition sums and a zero gate averages the branches"""
        rng = np.random.default_rng(0)
        a, b = Tensor(rng.normal(size=(2, 2, 4))), Tensor(rng.normal(size=(2, 2, 4)))
        params = {"gate.l1": zeros((4,))}
        np.testing.assert_allclose(fuse_branches(a, b, params, "addition", 1).data, a.data + b.data)
        np.testing.assert_allclose(fuse_branches(a, b, params, "gated", 1).data, 0.5 * (a.data + b.data),
                                   atol=1e-12)
        with self.assertRaises(PipelineError):
            fuse_branches(a, b, params, "inpaint_only", 1)

    def test_branch_fusion_gradients(self):
        """Test analytic gradients of every fusion variant against finite differences"""
        for seed in range(20):
            rng = np.random.default_rng(seed)
            a = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
            b = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
            params = {
                "gate.l2": Tensor(rng.normal(size=(4,)), requires_grad=True),
                "fuse.l2.w": Tensor(rng.normal(size=(8, 4)), requires_grad=True),
                "fuse.l2.b": Tensor(rng.normal(size=(4,)), requires_grad=True),
            }
            weights = Tensor(rng.normal(size=(2, 3, 4)))
            leaves = {
                "addition": [a, b],
                "gated": [a, b, params["gate.l2"]],
                "concatenation": [a, b, params["fuse.l2.w"], params["fuse.l2.b"]],
            }
            for variant, variant_leaves in leaves.items():
                def loss(variant=variant):
                    return sum_all(mul(fuse_branches(a, b, params, variant, 2), weights))
                self.assertLess(gradient_relative_error(loss, variant_leaves), 1e-6, (variant, seed))

    def test_unknown_variant(self):
        with self.assertRaises(PipelineError):
            Stage3Model.initialize(SMALL_MODEL, "stacked")

    def test_identity_inpainting_returns_image(self):
        """Test I_inp equals the input image with the identity inpainter"""
        model = Stage1Model.initialize(SMALL_MODEL, seed=0)
        m_nr = stage2_run(self.scene, model, RegionGrowMasker()).m_nr
        out = inpaint_scene(self.scene, m_nr, IdentityInpainter(), Stage2Settings())
        np.testing.assert_array_equal(out, self.scene.image)


class TestTraining(unittest.TestCase):
    """Training loops"""

    def setUp(self):
        self.scenes = [small_scene(seed) for seed in (10, 11, 12)]

    def test_stage1_log_records(self):
        """Test one step record per batch and one epoch record per epoch"""
        cfg = replace(FAST_TRAIN, epochs=2)
        model, log = train_stage1(self.scenes, cfg, SMALL_MODEL, val_scenes=self.scenes[:1])
        steps = [r for r in log.records if r["kind"] == "step"]
        epochs = log.epoch_records()
        self.assertEqual(len(steps), 4)
        self.assertEqual(len(epochs), 2)
        self.assertEqual(steps[0]["lr"], cfg.lr_initial)
        self.assertAlmostEqual(steps[-1]["lr"], cfg.lr_final)
        self.assertTrue(all(math.isfinite(r["L_seg"]) and math.isfinite(r["L_cls"]) for r in steps))
        self.assertTrue(0.0 <= epochs[-1]["val_mIoU"] <= 1.0)

    def test_training_changes_parameters(self):
        before = Stage1Model.initialize(SMALL_MODEL, seed=0)
        model, _ = train_stage1(self.scenes, FAST_TRAIN, SMALL_MODEL)
        self.assertFalse(np.array_equal(model.params["dec.out.w"].data, before.params["dec.out.w"].data))

    def test_zero_classification_weight_freezes_head(self):
        """Test λ_cls = 0 without weight decay leaves the point classifier untouched"""
        cfg = replace(FAST_TRAIN, lambda_cls=0.0, weight_decay=0.0)
        before = Stage1Model.initialize(SMALL_MODEL, seed=0)
        model, log = train_stage1(self.scenes, cfg, SMALL_MODEL)
        for name in ("cls.h.w", "cls.out.w", "cls.out.b"):
            np.testing.assert_array_equal(model.params[name].data, before.params[name].data)
        self.assertIn("L_cls", log.records[0])

    def test_zero_segmentation_weight_freezes_decoder(self):
        """Test λ_seg = 0 without weight decay leaves the mask decoder untouched"""
        cfg = replace(FAST_TRAIN, lambda_seg=0.0, weight_decay=0.0)
        before = Stage1Model.initialize(SMALL_MODEL, seed=0)
        model, _ = train_stage1(self.scenes, cfg, SMALL_MODEL)
        decoder = [name for name in before.params if name.startswith("dec.")]
        self.assertTrue(decoder)
        for name in decoder:
            np.testing.assert_array_equal(model.params[name].data, before.params[name].data)
        self.assertFalse(np.array_equal(model.params["cls.out.w"].data, before.params["cls.out.w"].data))

    def test_deterministic_training(self):
        a, _ = train_stage1(self.scenes, FAST_TRAIN, SMALL_MODEL)
        b, _ = train_stage1(self.scenes, FAST_TRAIN, SMALL_MODEL)
        np.testing.assert_array_equal(a.params["img.l1.w"].data, b.params["img.l1.w"].data)

    def test_divergence_is_reported(self):
        """Test a non-finite loss stops training with the failing step"""
        with patch("pipeline.dice_loss", return_value=Tensor(float("nan"))):
            with self.assertRaises(TrainingDivergenceError) as ctx:
                train_stage1(self.scenes, FAST_TRAIN, SMALL_MODEL)
        self.assertEqual(ctx.exception.step, 0)

    def test_empty_training_split(self):
        with self.assertRaises(PipelineError):
            train_stage1([], FAST_TRAIN, SMALL_MODEL)

    def test_train_config_validation(self):
        with self.assertRaises(PipelineError):
            TrainConfig(lr_initial=1e-6, lr_final=1e-3)
        with self.assertRaises(PipelineError):
            TrainConfig(batch_size=0)

    def test_stage3_training(self):
        """Test stage-3 training on precomputed inputs logs dice only"""
        stage1 = Stage1Model.initialize(SMALL_MODEL, seed=0)
        samples = precompute_stage3_inputs(self.scenes, stage1, RegionGrowMasker(), MockTextureInpainter(),
                                           Stage2Settings())
        model, log = train_stage3(samples, FAST_TRAIN, "gated", SMALL_MODEL)
        self.assertEqual(model.variant, "gated")
        self.assertTrue(all("L_cls" not in r for r in log.records))
        self.assertEqual(len(log.epoch_records()), 1)


class TestEvaluation(unittest.TestCase):
    """Corpus evaluation"""

    def setUp(self):
        self.scenes = [small_scene(20), small_scene(21, CorruptionConfig("fog", 0.5, 21)), small_scene(22)]

    def test_ground_truth_scores_one(self):
        """Test the ground truth predictor scores mIoU 1 on both parts"""
        result = evaluate_scenes(self.scenes, lambda scene: scene.gt)
        self.assertEqual(result.scene_count, 3)
        self.assertEqual(result.adverse_count, 1)
        self.assertEqual(result.total.mean(), 1.0)
        self.assertEqual(result.adverse.mean(), 1.0)

    def test_parallel_matches_sequential(self):
        """Test threaded evaluation accumulates the same counts"""
        predictor = Stage1Predictor(Stage1Model.initialize(SMALL_MODEL, seed=0))
        sequential = evaluate_scenes(self.scenes, predictor, workers=1)
        parallel = evaluate_scenes(self.scenes, predictor, workers=3)
        np.testing.assert_array_equal(sequential.total.intersection, parallel.total.intersection)
        np.testing.assert_array_equal(sequential.total.union, parallel.total.union)

    def test_empty_evaluation(self):
        result = evaluate_scenes([], lambda scene: scene.gt)
        self.assertIsInstance(result, EvaluationResult)
        self.assertTrue(math.isnan(result.summary()["mIoU"]))

    def test_full_pipeline_predictor(self):
        """Test the full predictor returns the final mask and its intermediates"""
        predictor = FullPipelinePredictor(Stage1Model.initialize(SMALL_MODEL, seed=0),
                                          Stage3Model.initialize(SMALL_MODEL, "addition", seed=0),
                                          RegionGrowMasker(), MockTextureInpainter(), Stage2Settings())
        mask, stage2, inpainted = predictor.run(self.scenes[0])
        self.assertEqual(mask.channels.shape, (NUM_CLASSES, 32, 32))
        self.assertEqual(stage2.m_nr.channels.shape, mask.channels.shape)
        self.assertEqual(inpainted.shape, self.scenes[0].image.shape)


class TestExperimentDrivers(unittest.TestCase):

    def test_rejects_unknown_ablation_and_empty_validation(self):
        scenes = [small_scene(30)]
        inputs = ExperimentInputs(scenes, [], SMALL_MODEL, FAST_TRAIN, FAST_TRAIN, Stage2Settings())
        with self.assertRaises(PipelineError):
            run_ablation(inputs, "everything", [0])
        with self.assertRaises(PipelineError):
            run_ablation(inputs, ABLATIONS[0], [0])


if __name__ == '__main__':
    unittest.main()
