#!/usr/bin/env python3
"""
Inpaint Orchestrator Module for Harborsight
Iterative mask-conditioned inpainting: fold an inpainter over an ordered list of
classified masks, threading the image through every call.

Inpainters are pluggable (InpainterInterface). The built-in MockTextureInpainter
fills a mask with a seeded, class-keyed texture and leaves every other pixel
bit-identical.
"""

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import yaml

from mask_ops import DEFAULT_LEGEND, BinaryMask, MaskStack, binarize
from synth_scenes import CLASS_COLORS

logger = logging.getLogger(__name__)

DEFAULT_PROMPTS: Dict[str, str] = {
    "pier": "a wooden pier on the water",
    "buoy": "an orange buoy floating on the water",
    "sailor": "a sailor standing on the water",
    "ship": "a large grey ship on the water",
    "boat": "a small white boat on the water",
    "vessel": "a blue vessel on the water",
    "kayak": "a green kayak on the water",
}


class InpaintError(Exception):
    """Base exception for inpainting orchestration errors"""
    pass


class MissingPromptError(InpaintError):
    """Exception raised when a mask class has no text prompt"""
    pass


class InpaintShapeError(InpaintError):
    """Exception for masks or outputs whose size differs from the image"""
    pass


@dataclass(frozen=True)
class InpaintConfig:
    """Generation controls carried by every request"""
    guidance_scale: float = 7.0
    inference_steps: int = 50
    rng_seed: int = 0

    def __post_init__(self):
        if not self.guidance_scale > 0:
            raise InpaintError(f"guidance_scale must be positive → {self.guidance_scale}")
        if self.inference_steps < 1:
            raise InpaintError(f"inference_steps must be ≥ 1 → {self.inference_steps}")


@dataclass
class InpaintRequest:
    image: np.ndarray
    mask: BinaryMask
    prompt: str
    config: InpaintConfig

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[:2] != self.mask.shape:
            raise InpaintShapeError(
                f"Mask {self.mask.shape} does not match image {self.image.shape}")


class InpainterInterface(ABC):
    """Contract: same-size output, unchanged outside the mask, deterministic per seed"""

    name = "inpainter"

    @abstractmethod
    def inpaint(self, request: InpaintRequest) -> np.ndarray:
        raise NotImplementedError


class MockTextureInpainter(InpainterInterface):
    """
    Fills masked pixels with the class base colour plus seeded noise of
    amplitude noise_amplitude / guidance_scale. The noise field covers the full
    image and depends only on (rng_seed, class), so fills of disjoint masks do
    not depend on their order.
    """

    name = "mock_texture"

    def __init__(self, base_colors: Sequence[Tuple[float, float, float]] = CLASS_COLORS,
                 noise_amplitude: float = 0.35):
        self.base_colors = np.asarray(base_colors, dtype=np.float64)
        self.noise_amplitude = noise_amplitude

    def texture(self, height: int, width: int, class_index: int, config: InpaintConfig) -> np.ndarray:
        rng = np.random.default_rng([int(config.rng_seed), int(class_index)])
        noise = rng.standard_normal((height, width, 3))
        amplitude = self.noise_amplitude / config.guidance_scale
        return np.clip(self.base_colors[class_index][None, None, :] + amplitude * noise, 0.0, 1.0)

    def inpaint(self, request: InpaintRequest) -> np.ndarray:
        image = request.image
        if request.mask.area == 0:
            return image.copy()
        class_index = request.mask.class_index if request.mask.class_index is not None else 0
        height, width = image.shape[:2]
        fill = self.texture(height, width, class_index, request.config)
        inside = request.mask.data.astype(bool)[:, :, None]
        return np.where(inside, fill, image)


class IdentityInpainter(InpainterInterface):
    name = "identity"

    def inpaint(self, request: InpaintRequest) -> np.ndarray:
        return request.image.copy()


def mask_ordering(masks: Sequence[BinaryMask]) -> List[BinaryMask]:
    """Largest area first; ties by class index, then by first set pixel in row-major order"""
    def key(mask: BinaryMask):
        class_index = mask.class_index if mask.class_index is not None else -1
        return (-mask.area, class_index, mask.top_left())
    return sorted(masks, key=key)


def masks_from_stack(m_nr: MaskStack, threshold: float = 0.5) -> List[BinaryMask]:
    """One binary mask per non-empty object channel of a noise-reduced stack"""
    masks = []
    for class_index in m_nr.object_indices:
        data = binarize(m_nr.channels[class_index], threshold).astype(np.uint8)
        if data.any():
            masks.append(BinaryMask(data, class_index))
    return masks


def resolve_prompt(prompts: Mapping[str, str], class_index: int,
                   legend: Sequence[str] = DEFAULT_LEGEND) -> str:
    if class_index is None or not 0 <= class_index < len(legend):
        raise MissingPromptError(f"Mask has no usable class → {class_index}")
    name = legend[class_index]
    if name not in prompts:
        raise MissingPromptError(f"No prompt for class '{name}'")
    return prompts[name]


def iterative_inpaint(image: np.ndarray, masks: Sequence[BinaryMask], prompts: Mapping[str, str],
                      inpainter: InpainterInterface, config: Optional[InpaintConfig] = None,
                      legend: Sequence[str] = DEFAULT_LEGEND) -> np.ndarray:
    """
    Thread the image through one inpainter call per mask, in the given order

    Args:
        image: (H, W, 3) image in [0, 1]
        masks: Classified masks, already ordered
        prompts: Class name → prompt text
        inpainter: Any InpainterInterface
        config: Generation controls

    Returns:
        The inpainted image

    Raises:
        MissingPromptError: If a mask class has no prompt
        InpaintShapeError: If a mask or an inpainter output differs in size from the image
    """
    config = config or InpaintConfig()
    image = np.asarray(image, dtype=np.float64)
    texts = []
    for mask in masks:
        if mask.shape != image.shape[:2]:
            raise InpaintShapeError(f"Mask {mask.shape} does not match image {image.shape}")
        texts.append(resolve_prompt(prompts, mask.class_index, legend))

    current = image
    for mask, text in zip(masks, texts):
        output = np.asarray(inpainter.inpaint(InpaintRequest(current, mask, text, config)), dtype=np.float64)
        if output.shape != current.shape:
            raise InpaintShapeError(f"{inpainter.name} returned {output.shape}, expected {current.shape}")
        current = output
    logger.debug(f"Inpainted {len(masks)} masks with {inpainter.name}")
    return current


def load_prompt_table(path: Optional[Path] = None) -> Dict[str, str]:
    """
    Read the class → prompt YAML table; the built-in table when path is None

    Raises:
        InpaintError: If the file is missing or not a flat string mapping
    """
    if path is None:
        return dict(DEFAULT_PROMPTS)
    path = Path(path)
    if not path.is_file():
        raise InpaintError(f"Prompt table not found → {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            table = yaml.safe_load(f) or {}
    except yaml.YAMLError as e:
        raise InpaintError(f"YAML parsing error → {path}: {e}")
    if not isinstance(table, dict) or not all(isinstance(v, str) for v in table.values()):
        raise InpaintError(f"Prompt table must map class names to strings → {path}")
    return {str(k): v for k, v in table.items()}
