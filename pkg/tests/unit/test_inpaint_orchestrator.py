#!/usr/bin/env python3
"""
Test module for iterative mask-conditioned inpainting
"""

import sys
import tempfile
import unittest
from pathlib import Path

import numpy as np

# Add src directory to path for imports
sys.path.append(str(Path(__file__).parent.parent.parent / "src"))

from inpaint_orchestrator import (
    DEFAULT_PROMPTS, IdentityInpainter, InpaintConfig, InpaintError, InpainterInterface,
    InpaintShapeError, MissingPromptError, MockTextureInpainter, iterative_inpaint,
    load_prompt_table, mask_ordering, masks_from_stack,
)
from mask_ops import NUM_CLASSES, BinaryMask, MaskStack


def box_mask(shape, rows, cols, class_index):
    data = np.zeros(shape, dtype=np.uint8)
    data[rows, cols] = 1
    return BinaryMask(data, class_index)


class RecordingInpainter(InpainterInterface):
    """Records the prompts it receives and paints the mask area with a constant"""

    name = "recording"

    def __init__(self):
        self.calls = []

    def inpaint(self, request):
        self.calls.append((request.prompt, request.mask.class_index))
        out = request.image.copy()
        out[request.mask.data.astype(bool)] = 0.25 * len(self.calls)
        return out


class ShrinkingInpainter(InpainterInterface):
    name = "shrinking"

    def inpaint(self, request):
        return request.image[:-1]


class TestIterativeInpaint(unittest.TestCase):
    """Folding an inpainter over ordered masks"""

    def setUp(self):
        self.image = np.random.default_rng(0).uniform(size=(10, 12, 3))
        self.config = InpaintConfig(guidance_scale=7.0, inference_steps=50, rng_seed=11)
        self.ship = box_mask((10, 12), slice(1, 4), slice(1, 5), 4)
        self.buoy = box_mask((10, 12), slice(6, 9), slice(7, 9), 2)

    def test_no_masks_returns_input(self):
        """Test an empty mask list returns the input bit-exactly"""
        out = iterative_inpaint(self.image, [], DEFAULT_PROMPTS, MockTextureInpainter(), self.config)
        np.testing.assert_array_equal(out, self.image)

    def test_identity_inpainter_returns_input(self):
        """Test the identity inpainter leaves the image unchanged"""
        out = iterative_inpaint(self.image, [self.ship, self.buoy], DEFAULT_PROMPTS,
                                IdentityInpainter(), self.config)
        np.testing.assert_array_equal(out, self.image)

    def test_pixels_outside_masks_unchanged(self):
        """Test pixels outside every mask keep their original values"""
        out = iterative_inpaint(self.image, [self.ship, self.buoy], DEFAULT_PROMPTS,
                                MockTextureInpainter(), self.config)
        outside = ~(self.ship.data.astype(bool) | self.buoy.data.astype(bool))
        np.testing.assert_array_equal(out[outside], self.image[outside])
        self.assertFalse(np.array_equal(out[1:4, 1:5], self.image[1:4, 1:5]))

    def test_disjoint_masks_order_invariant(self):
        """Test disjoint masks give the same result in either order"""
        inpainter = MockTextureInpainter()
        forward = iterative_inpaint(self.image, [self.ship, self.buoy], DEFAULT_PROMPTS, inpainter, self.config)
        backward = iterative_inpaint(self.image, [self.buoy, self.ship], DEFAULT_PROMPTS, inpainter, self.config)
        np.testing.assert_array_equal(forward, backward)

    def test_overlapping_masks_last_write_wins(self):
        """Test the later mask paints over the earlier one on overlap"""
        overlap = box_mask((10, 12), slice(2, 6), slice(3, 8), 5)
        recorder = RecordingInpainter()
        out = iterative_inpaint(self.image, [self.ship, overlap], DEFAULT_PROMPTS, recorder, self.config)
        self.assertEqual(out[2, 3, 0], 0.5)
        self.assertEqual(out[1, 1, 0], 0.25)
        self.assertEqual(recorder.calls, [(DEFAULT_PROMPTS["ship"], 4), (DEFAULT_PROMPTS["boat"], 5)])

    def test_deterministic_per_seed(self):
        """Test equal seeds reproduce the fill and different seeds change it"""
        inpainter = MockTextureInpainter()
        first = iterative_inpaint(self.image, [self.ship], DEFAULT_PROMPTS, inpainter, self.config)
        again = iterative_inpaint(self.image, [self.ship], DEFAULT_PROMPTS, inpainter, self.config)
        other = iterative_inpaint(self.image, [self.ship], DEFAULT_PROMPTS, inpainter,
                                  InpaintConfig(rng_seed=12))
        np.testing.assert_array_equal(first, again)
        self.assertFalse(np.array_equal(first, other))

    def test_missing_prompt_fails_before_any_call(self):
        """Test a class without a prompt aborts before the inpainter runs"""
        recorder = RecordingInpainter()
        prompts = {"ship": "a ship"}
        with self.assertRaises(MissingPromptError):
            iterative_inpaint(self.image, [self.ship, self.buoy], prompts, recorder, self.config)
        self.assertEqual(recorder.calls, [])

    def test_shape_errors(self):
        """Test mismatched masks and resized outputs are rejected"""
        small = box_mask((5, 5), slice(0, 2), slice(0, 2), 4)
        with self.assertRaises(InpaintShapeError):
            iterative_inpaint(self.image, [small], DEFAULT_PROMPTS, IdentityInpainter(), self.config)
        with self.assertRaises(InpaintShapeError):
            iterative_inpaint(self.image, [self.ship], DEFAULT_PROMPTS, ShrinkingInpainter(), self.config)

    def test_config_validation(self):
        with self.assertRaises(InpaintError):
            InpaintConfig(guidance_scale=0.0)
        with self.assertRaises(InpaintError):
            InpaintConfig(inference_steps=0)


class TestMaskSelection(unittest.TestCase):
    """Mask extraction and ordering"""

    def test_ordering_largest_first_then_class(self):
        """Test masks are sorted by area, then class index, then first pixel"""
        big = box_mask((6, 6), slice(0, 3), slice(0, 3), 6)
        small_a = box_mask((6, 6), slice(4, 5), slice(4, 6), 3)
        small_b = box_mask((6, 6), slice(5, 6), slice(0, 2), 1)
        small_c = box_mask((6, 6), slice(3, 4), slice(4, 6), 3)
        ordered = mask_ordering([small_a, big, small_b, small_c])
        self.assertEqual(ordered[0].class_index, 6)
        self.assertEqual(ordered[1].class_index, 1)
        self.assertIs(ordered[2], small_c)
        self.assertIs(ordered[3], small_a)

    def test_masks_from_stack_object_channels_only(self):
        """Test one mask per non-empty object channel, water and background ignored"""
        channels = np.zeros((NUM_CLASSES, 4, 4))
        channels[0] = 1.0
        channels[8] = 1.0
        channels[3, 0, 0] = 0.7
        channels[5, 1, 1] = 0.5
        channels[6, 2, 2] = 0.49
        masks = masks_from_stack(MaskStack(channels))
        self.assertEqual([m.class_index for m in masks], [3, 5])
        self.assertEqual([m.area for m in masks], [1, 1])


class TestPromptTable(unittest.TestCase):

    def test_default_table_covers_objects(self):
        """Test the built-in table has a prompt for every object class"""
        table = load_prompt_table()
        self.assertEqual(set(table), {"pier", "buoy", "sailor", "ship", "boat", "vessel", "kayak"})

    def test_yaml_table_and_errors(self):
        """Test YAML tables load and malformed ones are rejected"""
        with tempfile.TemporaryDirectory() as temp_dir:
            good = Path(temp_dir) / "prompts.yaml"
            good.write_text("ship: a ferry\nbuoy: a red buoy\n", encoding="utf-8")
            self.assertEqual(load_prompt_table(good), {"ship": "a ferry", "buoy": "a red buoy"})
            bad = Path(temp_dir) / "bad.yaml"
            bad.write_text("- a\n- b\n", encoding="utf-8")
            with self.assertRaises(InpaintError):
                load_prompt_table(bad)
            with self.assertRaises(InpaintError):
                load_prompt_table(Path(temp_dir) / "missing.yaml")
            broken = Path(temp_dir) / "broken.yaml"
            broken.write_text("ship: [unclosed\n", encoding="utf-8")
            with self.assertRaises(InpaintError) as ctx:
                load_prompt_table(broken)
            self.assertIn("YAML parsing error", str(ctx.exception))


if __name__ == '__main__':
    unittest.main()
