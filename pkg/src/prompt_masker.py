#!/usr/bin/env python3
"""
Prompt Masker Module for Harborsight
Seam for promptable instance segmenters: given an image and 2D prompt points,
produce one binary mask per in-bounds prompt. Ships a deterministic
region-growing implementation and an always-empty stub.
"""

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np
from scipy import ndimage

from mask_ops import BinaryMask

logger = logging.getLogger(__name__)

FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


class MaskerError(Exception):
    """Base exception for prompt masker failures"""
    pass


@dataclass
class SkippedPrompt:
    """A prompt that produced no mask and why"""
    index: int
    u: float
    v: float
    reason: str


@dataclass
class MaskerResult:
    masks: List[BinaryMask] = field(default_factory=list)
    skipped: List[SkippedPrompt] = field(default_factory=list)


def _check_image(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise MaskerError(f"Masker needs an (H, W, 3) image, got {image.shape}")
    return image


def prompt_pixel(u: float, v: float, height: int, width: int):
    """(row, col) of a prompt or None when it falls outside the image"""
    if not (np.isfinite(u) and np.isfinite(v)):
        return None
    row, col = int(np.floor(v)), int(np.floor(u))
    if 0 <= row < height and 0 <= col < width:
        return row, col
    return None


def _component(distance: np.ndarray, row: int, col: int, tolerance: float) -> np.ndarray:
    labels, _ = ndimage.label(distance <= tolerance, structure=FOUR_CONNECTED)
    return labels == labels[row, col]


class PromptMaskerInterface(ABC):
    """
    Contract: masks have the image's (H, W), one per in-bounds prompt in prompt
    order, and identical inputs give identical outputs. Implementations must be
    safe to call concurrently on distinct images.
    """

    name = "masker"

    @abstractmethod
    def masks_for_prompts(self, image: np.ndarray,
                          prompts: Sequence[Tuple[float, float]]) -> MaskerResult:
        """Produce class-less binary masks for a batch of prompts on one image"""
        raise NotImplementedError

    def _skip(self, index: int, u: float, v: float, reason: str) -> SkippedPrompt:
        logger.warning(f"Skipping prompt {index} at ({u:.1f}, {v:.1f}): {reason}")
        return SkippedPrompt(index, float(u), float(v), reason)


class RegionGrowMasker(PromptMaskerInterface):
    """
    Grows a 4-connected region of pixels within color_tolerance (Euclidean RGB)
    of the prompt pixel's colour.

    Regions larger than max_region_fraction of the image are grown again at the
    largest lower tolerance whose component fits, so the capped mask depends
    only on the seed colour and shrinks with the tolerance. A component that
    still overflows at tolerance 0 is cut back to the pixels closest to the
    prompt in breadth-first order, filling the last partial ring in row-major
    order, so the result stays connected.
    """

    name = "region_grow"

    def __init__(self, color_tolerance: float = 0.08, max_region_fraction: float = 0.5):
        if color_tolerance < 0:
            raise MaskerError(f"color_tolerance must be non-negative → {color_tolerance}")
        if not 0 < max_region_fraction <= 1:
            raise MaskerError(f"max_region_fraction must be in (0, 1] → {max_region_fraction}")
        self.color_tolerance = color_tolerance
        self.max_region_fraction = max_region_fraction

    def masks_for_prompts(self, image: np.ndarray,
                          prompts: Sequence[Tuple[float, float]]) -> MaskerResult:
        image = _check_image(image)
        height, width = image.shape[:2]
        result = MaskerResult()
        grown: Dict[Tuple[int, int], np.ndarray] = {}
        for index, (u, v) in enumerate(prompts):
            pixel = prompt_pixel(u, v, height, width)
            if pixel is None:
                result.skipped.append(self._skip(index, u, v, "outside image bounds"))
                continue
            if pixel not in grown:
                grown[pixel] = self.grow_region(image, *pixel)
            result.masks.append(BinaryMask(grown[pixel].copy(), None, (index,)))
        return result

    def grow_region(self, image: np.ndarray, row: int, col: int) -> np.ndarray:
        """uint8 mask of the capped similar-colour component around (row, col)"""
        distance = np.linalg.norm(image - image[row, col][None, None, :], axis=2)
        cap = max(1, int(np.floor(self.max_region_fraction * image.shape[0] * image.shape[1])))

        component = _component(distance, row, col, self.color_tolerance)
        if component.sum() <= cap:
            return component.astype(np.uint8)

        # component size only changes at the distances present in the image
        levels = np.unique(distance[distance <= self.color_tolerance])
        fitting = self.effective_level(distance, row, col, levels, cap)
        if fitting is None:
            logger.debug(f"Region at ({row}, {col}) overflows the cap at tolerance 0")
            return self._truncate(_component(distance, row, col, 0.0), row, col, cap).astype(np.uint8)
        return _component(distance, row, col, fitting).astype(np.uint8)

    @staticmethod
    def effective_level(distance: np.ndarray, row: int, col: int, levels: np.ndarray, cap: int):
        """Largest level whose component fits under cap, or None when none does"""
        low, high = 0, len(levels) - 1
        best = None
        while low <= high:
            middle = (low + high) // 2
            if _component(distance, row, col, levels[middle]).sum() <= cap:
                best = float(levels[middle])
                low = middle + 1
            else:
                high = middle - 1
        return best

    @staticmethod
    def _truncate(component: np.ndarray, row: int, col: int, cap: int) -> np.ndarray:
        region = np.zeros_like(component)
        region[row, col] = True
        size = 1
        while size < cap:
            ring = ndimage.binary_dilation(region, structure=FOUR_CONNECTED) & component & ~region
            ring_size = int(ring.sum())
            if ring_size == 0:
                break
            if size + ring_size <= cap:
                region |= ring
                size += ring_size
                continue
            rows, cols = np.nonzero(ring)
            take = cap - size
            region[rows[:take], cols[:take]] = True
            size = cap
        return region


class EmptyMasker(PromptMaskerInterface):
    """Produces no masks at all; the pipeline must still return valid output"""

    name = "empty"

    def masks_for_prompts(self, image: np.ndarray,
                          prompts: Sequence[Tuple[float, float]]) -> MaskerResult:
        _check_image(image)
        return MaskerResult()
