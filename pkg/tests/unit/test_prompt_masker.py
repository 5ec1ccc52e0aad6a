#!/usr/bin/env python3
"""
Test module for the prompt masker implementations
"""

import sys
import unittest
from pathlib import Path

import numpy as np
from scipy import ndimage

# Add src directory to path for imports
sys.path.append(str(Path(__file__).parent.parent.parent / "src"))

from prompt_masker import (
    FOUR_CONNECTED, EmptyMasker, MaskerError, RegionGrowMasker, prompt_pixel,
)


def two_tone_image():
    """Dark 8×8 image with a bright 3×4 rectangle at rows 2-4, cols 1-4"""
    image = np.full((8, 8, 3), 0.1)
    image[2:5, 1:5] = (0.9, 0.8, 0.2)
    return image


class TestPromptPixel(unittest.TestCase):

    def test_floor_and_bounds(self):
        """Test prompts map to floor(v), floor(u) and out-of-bounds gives None"""
        self.assertEqual(prompt_pixel(3.7, 1.2, 4, 5), (1, 3))
        self.assertIsNone(prompt_pixel(5.0, 0.0, 4, 5))
        self.assertIsNone(prompt_pixel(-0.1, 0.0, 4, 5))
        self.assertIsNone(prompt_pixel(float("nan"), 1.0, 4, 5))


class TestRegionGrowMasker(unittest.TestCase):
    """Region growing from prompt points"""

    def setUp(self):
        self.masker = RegionGrowMasker(color_tolerance=0.1, max_region_fraction=0.9)
        self.image = two_tone_image()

    def test_recovers_uniform_region(self):
        """Test a prompt inside the rectangle returns exactly the rectangle"""
        result = self.masker.masks_for_prompts(self.image, [(2.5, 3.5)])
        self.assertEqual(len(result.masks), 1)
        expected = np.zeros((8, 8), dtype=np.uint8)
        expected[2:5, 1:5] = 1
        np.testing.assert_array_equal(result.masks[0].data, expected)
        self.assertIsNone(result.masks[0].class_index)
        self.assertEqual(result.masks[0].provenance, (0,))

    def test_one_mask_per_in_bounds_prompt(self):
        """Test masks follow prompt order and out-of-bounds prompts are skipped"""
        prompts = [(0.5, 0.5), (100.0, 2.0), (3.0, 3.0), (float("nan"), 1.0)]
        result = self.masker.masks_for_prompts(self.image, prompts)
        self.assertEqual([m.provenance for m in result.masks], [(0,), (2,)])
        self.assertEqual([s.index for s in result.skipped], [1, 3])
        self.assertTrue(all(m.shape == (8, 8) for m in result.masks))

    def test_deterministic(self):
        """Test identical inputs give identical masks"""
        image = np.random.default_rng(0).uniform(size=(16, 16, 3))
        prompts = [(4.2, 7.9), (11.0, 3.0)]
        first = self.masker.masks_for_prompts(image, prompts)
        second = RegionGrowMasker(0.1, 0.9).masks_for_prompts(image, prompts)
        for a, b in zip(first.masks, second.masks):
            np.testing.assert_array_equal(a.data, b.data)

    def test_region_cap_keeps_connected_pixels_near_prompt(self):
        """Test capped regions hold exactly the cap and stay connected"""
        masker = RegionGrowMasker(color_tolerance=0.1, max_region_fraction=0.25)
        image = np.full((8, 8, 3), 0.5)
        mask = masker.masks_for_prompts(image, [(4.0, 4.0)]).masks[0].data
        self.assertEqual(mask.sum(), 16)
        self.assertEqual(mask[4, 4], 1)
        _, count = ndimage.label(mask, structure=FOUR_CONNECTED)
        self.assertEqual(count, 1)

    def test_capped_region_is_shared_by_prompts(self):
        """Test two prompts in one region get the same mask when the cap tightens the tolerance"""
        image = np.full((8, 8, 3), 0.95)
        image[:, :4] = 1.0
        masker = RegionGrowMasker(color_tolerance=0.1, max_region_fraction=0.5)
        first, second = masker.masks_for_prompts(image, [(0.5, 0.5), (3.5, 7.5)]).masks
        expected = np.zeros((8, 8), dtype=np.uint8)
        expected[:, :4] = 1
        np.testing.assert_array_equal(first.data, expected)
        np.testing.assert_array_equal(second.data, expected)

    def test_lower_tolerance_never_grows_capped_mask(self):
        """Test masks are nested across increasing tolerances while the cap binds"""
        rows, cols = np.mgrid[0:16, 0:16]
        image = np.stack([cols / 15.0, rows / 15.0, np.full((16, 16), 0.3)], axis=2)
        previous = None
        for tolerance in (0.0, 0.05, 0.1, 0.2, 0.4, 0.8):
            masker = RegionGrowMasker(color_tolerance=tolerance, max_region_fraction=0.1)
            mask = masker.masks_for_prompts(image, [(7.5, 7.5)]).masks[0].data
            self.assertLessEqual(mask.sum(), 25)
            self.assertEqual(mask[7, 7], 1)
            if previous is not None:
                self.assertFalse(np.any(previous & ~mask), tolerance)
            previous = mask

    def test_overflow_at_zero_tolerance_ignores_tolerance(self):
        """Test a region over the cap at tolerance 0 gives one mask for every tolerance"""
        image = np.zeros((8, 8, 3))
        image[:, 4:] = 0.1
        low = RegionGrowMasker(0.05, 0.25).masks_for_prompts(image, [(3.5, 0.5)]).masks[0].data
        high = RegionGrowMasker(0.2, 0.25).masks_for_prompts(image, [(3.5, 0.5)]).masks[0].data
        np.testing.assert_array_equal(low, high)
        self.assertEqual(low.sum(), 16)

    def test_prompt_pixel_always_in_mask(self):
        """Test the prompt pixel belongs to its own mask"""
        image = np.random.default_rng(3).uniform(size=(12, 12, 3))
        prompts = [(float(u) + 0.5, float(v) + 0.5) for u, v in [(0, 0), (5, 7), (11, 11)]]
        for (u, v), mask in zip(prompts, self.masker.masks_for_prompts(image, prompts).masks):
            self.assertTrue(mask.contains(u, v))

    def test_rejects_bad_configuration_and_images(self):
        with self.assertRaises(MaskerError):
            RegionGrowMasker(color_tolerance=-1.0)
        with self.assertRaises(MaskerError):
            RegionGrowMasker(max_region_fraction=0.0)
        with self.assertRaises(MaskerError):
            self.masker.masks_for_prompts(np.zeros((4, 4)), [(1, 1)])


class TestEmptyMasker(unittest.TestCase):

    def test_returns_nothing(self):
        """Test the empty masker yields no masks and no skips"""
        result = EmptyMasker().masks_for_prompts(two_tone_image(), [(1.0, 1.0)])
        self.assertEqual(result.masks, [])
        self.assertEqual(result.skipped, [])


if __name__ == '__main__':
    unittest.main()
