#!/usr/bin/env python3
"""
Mask Operations Module for Harborsight
MaskStack algebra: channel conventions, noise reduction of prompted
pseudo-masks against the stage-1 prediction, class assignment and
rasterization of binary masks, plus the maskstack file format.

Channel convention: index 0 is background, index C-1 is water (waterline /
drivable area), everything in between is an object class.
"""

import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

DEFAULT_LEGEND: Tuple[str, ...] = (
    "background", "pier", "buoy", "sailor", "ship", "boat", "vessel", "kayak", "water",
)
NUM_CLASSES = len(DEFAULT_LEGEND)
BACKGROUND_INDEX = 0
WATER_INDEX = NUM_CLASSES - 1
OBJECT_INDICES: Tuple[int, ...] = tuple(range(1, NUM_CLASSES - 1))

# RGB colors for the indexed PNG export
DISPLAY_PALETTE: Tuple[Tuple[int, int, int], ...] = (
    (0, 0, 0), (153, 102, 51), (255, 140, 0), (220, 20, 60), (128, 128, 128),
    (255, 255, 255), (70, 70, 160), (0, 200, 120), (30, 110, 200),
)

MASKSTACK_MAGIC = b"HSMK"
MASKSTACK_VERSION = 1
_VALUE_TOLERANCE = 1e-9


class MaskError(Exception):
    """Base exception for mask stack errors"""
    pass


class LegendMismatchError(MaskError):
    """Exception for stacks combined with different channel legends"""
    pass


class UnclassifiableMaskError(MaskError):
    """Exception raised when no prompt point lies inside a binary mask"""
    pass


class MaskFormatError(MaskError):
    """Exception for malformed maskstack files"""
    pass


@dataclass
class MaskStack:
    """Per-class soft masks, channels shaped (C, H, W) with values in [0, 1]"""
    channels: np.ndarray
    legend: Tuple[str, ...] = DEFAULT_LEGEND

    def __post_init__(self):
        channels = np.asarray(self.channels, dtype=np.float64)
        if channels.ndim != 3:
            raise MaskError(f"MaskStack needs (C, H, W) channels, got shape {channels.shape}")
        self.legend = tuple(self.legend)
        if len(self.legend) != channels.shape[0]:
            raise MaskError(
                f"Legend length {len(self.legend)} does not match channel count {channels.shape[0]}")
        if channels.size:
            low, high = channels.min(), channels.max()
            if not np.isfinite(low) or not np.isfinite(high):
                raise MaskError("MaskStack contains non-finite values")
            if low < -_VALUE_TOLERANCE or high > 1.0 + _VALUE_TOLERANCE:
                raise MaskError(f"MaskStack values outside [0, 1] → min {low}, max {high}")
            channels = np.clip(channels, 0.0, 1.0)
        self.channels = channels

    @property
    def num_classes(self) -> int:
        return int(self.channels.shape[0])

    @property
    def height(self) -> int:
        return int(self.channels.shape[1])

    @property
    def width(self) -> int:
        return int(self.channels.shape[2])

    @property
    def water_index(self) -> int:
        return self.num_classes - 1

    @property
    def object_indices(self) -> Tuple[int, ...]:
        return tuple(range(1, self.num_classes - 1))

    def argmax(self) -> np.ndarray:
        """Label map (H, W); ties resolve to the lowest channel index"""
        return np.argmax(self.channels, axis=0).astype(np.int64)

    def copy(self) -> "MaskStack":
        return MaskStack(self.channels.copy(), self.legend)

    @classmethod
    def zeros(cls, height: int, width: int, legend: Sequence[str] = DEFAULT_LEGEND) -> "MaskStack":
        return cls(np.zeros((len(legend), height, width)), tuple(legend))

    @classmethod
    def from_labels(cls, labels: np.ndarray, legend: Sequence[str] = DEFAULT_LEGEND) -> "MaskStack":
        """One-hot stack from an (H, W) label map"""
        labels = np.asarray(labels, dtype=np.int64)
        count = len(legend)
        if labels.size and (labels.min() < 0 or labels.max() >= count):
            raise MaskError(f"Label map values outside [0, {count})")
        channels = (labels[None, :, :] == np.arange(count)[:, None, None]).astype(np.float64)
        return cls(channels, tuple(legend))


@dataclass
class BinaryMask:
    """Strictly binary (H, W) mask with optional class and the prompts that produced it"""
    data: np.ndarray
    class_index: Optional[int] = None
    provenance: Tuple[int, ...] = field(default_factory=tuple)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2:
            raise MaskError(f"BinaryMask needs (H, W) data, got shape {data.shape}")
        if data.dtype != np.uint8:
            if not np.all((data == 0) | (data == 1)):
                raise MaskError("BinaryMask values must be 0 or 1")
            data = data.astype(np.uint8)
        elif data.size and data.max() > 1:
            raise MaskError("BinaryMask values must be 0 or 1")
        self.data = data
        self.provenance = tuple(self.provenance)

    @property
    def shape(self) -> Tuple[int, int]:
        return tuple(self.data.shape)

    @property
    def area(self) -> int:
        return int(self.data.sum())

    def top_left(self) -> Tuple[int, int]:
        """First set pixel in row-major order; (H, W) for an empty mask"""
        flat = np.flatnonzero(self.data)
        if flat.size == 0:
            return self.shape
        row, col = divmod(int(flat[0]), self.shape[1])
        return (row, col)

    def contains(self, u: float, v: float) -> bool:
        row, col = int(np.floor(v)), int(np.floor(u))
        height, width = self.shape
        return 0 <= row < height and 0 <= col < width and bool(self.data[row, col])

    def with_class(self, class_index: int) -> "BinaryMask":
        return replace(self, class_index=int(class_index))


def binarize(values: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """1.0 where values ≥ threshold, else 0.0"""
    return (np.asarray(values) >= threshold).astype(np.float64)


def extract_noise_mask(m_init: MaskStack, threshold: float = 0.5) -> np.ndarray:
    """
    Noise region of a stage-1 prediction: binarized background plus binarized water

    Args:
        m_init: Stage-1 mask stack
        threshold: Binarization threshold applied to both channels before summing

    Returns:
        (H, W) array in [0, 1]
    """
    background = binarize(m_init.channels[0], threshold)
    water = binarize(m_init.channels[m_init.water_index], threshold)
    return np.clip(background + water, 0.0, 1.0)


def noise_reduce(m_sam: MaskStack, m_init: MaskStack, threshold: float = 0.5) -> MaskStack:
    """
    Remove pseudo-mask pixels lying on background/water and merge with M_init

    Per object channel c:
        M_nr[c] = clamp01(relu(M_sam[c] - M_noise) + M_init[c])
    Background and water channels are copied from M_init.

    Raises:
        LegendMismatchError: If the two stacks use different legends
        MaskError: If the stacks differ in shape
    """
    if m_sam.legend != m_init.legend:
        raise LegendMismatchError(f"Legend mismatch → {m_sam.legend} vs {m_init.legend}")
    if m_sam.channels.shape != m_init.channels.shape:
        raise MaskError(f"Stack shape mismatch → {m_sam.channels.shape} vs {m_init.channels.shape}")

    noise = extract_noise_mask(m_init, threshold)
    merged = m_init.channels.copy()
    objects = list(m_init.object_indices)
    if objects:
        denoised = np.maximum(m_sam.channels[objects] - noise[None, :, :], 0.0)
        merged[objects] = np.clip(denoised + m_init.channels[objects], 0.0, 1.0)
    return MaskStack(merged, m_init.legend)


def assign_class(binary: BinaryMask,
                 prompt_labels: Sequence[Tuple[Tuple[float, float], np.ndarray]]) -> BinaryMask:
    """
    Label a pseudo-mask with the argmax of the mean class probabilities of its prompts

    Background never wins; ties go to the lowest class index.

    Args:
        binary: Mask without a class
        prompt_labels: ((u, v), probability vector) per candidate prompt

    Raises:
        UnclassifiableMaskError: If no prompt lies inside the mask
    """
    inside = [np.asarray(probs, dtype=np.float64)
              for (u, v), probs in prompt_labels if binary.contains(u, v)]
    if not inside:
        raise UnclassifiableMaskError(
            f"No prompt inside mask (area {binary.area}, provenance {binary.provenance})")
    mean_probs = np.mean(np.stack(inside), axis=0)
    class_index = 1 + int(np.argmax(mean_probs[1:]))
    return binary.with_class(class_index)


def rasterize(binaries: Sequence[BinaryMask], legend: Sequence[str] = DEFAULT_LEGEND,
              shape: Optional[Tuple[int, int]] = None) -> MaskStack:
    """
    Union of classified binary masks per channel

    Args:
        binaries: Masks carrying a class_index
        legend: Channel legend of the result
        shape: (H, W); required only when binaries is empty
    """
    if binaries:
        shape = binaries[0].shape
    elif shape is None:
        raise MaskError("rasterize needs a shape when no masks are given")
    channels = np.zeros((len(legend),) + tuple(shape), dtype=np.float64)
    for mask in binaries:
        if mask.shape != tuple(shape):
            raise MaskError(f"Binary mask shape {mask.shape} differs from {tuple(shape)}")
        if mask.class_index is None or not 0 <= mask.class_index < len(legend):
            raise MaskError(f"Class index {mask.class_index} outside legend of {len(legend)}")
        np.maximum(channels[mask.class_index], mask.data, out=channels[mask.class_index])
    return MaskStack(channels, tuple(legend))


# ---------------------------------------------------------------- file formats

def save_maskstack(stack: MaskStack, path: Path) -> Path:
    """Write the HSMK binary layout (see docs/FORMATS.md)"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    c, h, w = stack.channels.shape
    parts = [MASKSTACK_MAGIC, struct.pack("<HIII", MASKSTACK_VERSION, c, h, w)]
    for name in stack.legend:
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
    parts.append(stack.channels.astype("<f4").tobytes(order="C"))
    path.write_bytes(b"".join(parts))
    return path


def load_maskstack(path: Path) -> MaskStack:
    """
    Read an HSMK file

    Raises:
        MaskFormatError: On bad magic, unknown version or truncated data
    """
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != MASKSTACK_MAGIC:
        raise MaskFormatError(f"Not a maskstack file → {path}")
    try:
        version, c, h, w = struct.unpack_from("<HIII", blob, 4)
        if version != MASKSTACK_VERSION:
            raise MaskFormatError(f"Unsupported maskstack version {version} → {path}")
        offset = 4 + struct.calcsize("<HIII")
        legend: List[str] = []
        for _ in range(c):
            (length,) = struct.unpack_from("<H", blob, offset)
            offset += 2
            legend.append(blob[offset:offset + length].decode("utf-8"))
            offset += length
        expected = c * h * w * 4
        if len(blob) - offset != expected:
            raise MaskFormatError(f"Plane data is {len(blob) - offset} bytes, expected {expected} → {path}")
        planes = np.frombuffer(blob, dtype="<f4", count=c * h * w, offset=offset)
    except struct.error as e:
        raise MaskFormatError(f"Truncated maskstack → {path}: {e}")
    return MaskStack(planes.reshape(c, h, w).astype(np.float64), tuple(legend))


def export_indexed_png(stack: MaskStack, path: Path,
                       palette: Sequence[Tuple[int, int, int]] = DISPLAY_PALETTE) -> Path:
    """Save the argmax label map as an 8-bit palette PNG for inspection"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    labels = np.ascontiguousarray(stack.argmax().astype(np.uint8))
    image = Image.frombytes("P", (stack.width, stack.height), labels.tobytes())
    flat_palette = [channel for color in palette for channel in color]
    image.putpalette(flat_palette + [0] * (768 - len(flat_palette)))
    image.save(path, format="PNG")
    return path
