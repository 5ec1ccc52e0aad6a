#!/usr/bin/env python3
"""
Radar Module for Harborsight
Radar point sets: sampling/padding, pinhole projection, shared-MLP point
encoder and the per-point classification head.

Radar frame text format (one point per line, single-space separated):
    frame_id x y z rcs doppler label
Lines starting with '#' are comments; label -1 marks an unlabeled point.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from mask_ops import NUM_CLASSES
from numerics import (
    Tensor, add_row, matmul, mul, relu, softmax_rows, xavier_uniform, zeros,
)

logger = logging.getLogger(__name__)

RADAR_FORMAT_HEADER = "# harborsight radar v1"
RADAR_COLUMNS = "# frame_id x y z rcs doppler label"

# x, y, z (m), rcs (dBsm), doppler (m/s) brought to roughly unit range before the MLP
FEATURE_SCALE = (0.05, 0.2, 0.02, 0.05, 0.2)
DEFAULT_Z_MIN = 0.1


class RadarError(Exception):
    """Base exception for radar data errors"""
    pass


class RadarFormatError(RadarError):
    """Exception for malformed radar text files"""
    pass


@dataclass
class RadarPoint:
    """One radar return in the camera-aligned world frame"""
    x: float
    y: float
    z: float
    rcs: float
    doppler: float

    def __post_init__(self):
        values = (self.x, self.y, self.z, self.rcs, self.doppler)
        if not all(math.isfinite(v) for v in values):
            raise RadarError(f"Radar point has non-finite component → {values}")

    def as_row(self) -> Tuple[float, float, float, float, float]:
        return (self.x, self.y, self.z, self.rcs, self.doppler)


@dataclass
class RadarFrame:
    """Variable-length radar point set with optional per-point class labels"""
    points: List[RadarPoint]
    labels: Optional[List[int]] = None
    frame_id: str = "frame"

    def __post_init__(self):
        if self.labels is not None:
            if len(self.labels) != len(self.points):
                raise RadarError(
                    f"Label count {len(self.labels)} does not match point count {len(self.points)}")
            bad = [label for label in self.labels if not 0 <= label < NUM_CLASSES]
            if bad:
                raise RadarError(f"Radar labels out of range [0, {NUM_CLASSES}) → {bad[:5]}")
        if any(ch.isspace() for ch in self.frame_id):
            raise RadarError(f"frame_id must not contain whitespace → {self.frame_id!r}")

    def __len__(self) -> int:
        return len(self.points)

    def as_matrix(self) -> np.ndarray:
        """(N_p × 5) matrix of x, y, z, rcs, doppler"""
        if not self.points:
            return np.zeros((0, 5), dtype=np.float64)
        return np.array([p.as_row() for p in self.points], dtype=np.float64)

    @classmethod
    def from_matrix(cls, matrix: np.ndarray, labels: Optional[Sequence[int]] = None,
                    frame_id: str = "frame") -> "RadarFrame":
        points = [RadarPoint(*map(float, row)) for row in np.asarray(matrix).reshape(-1, 5)]
        return cls(points=points, labels=None if labels is None else [int(v) for v in labels],
                   frame_id=frame_id)


@dataclass
class SampledPoints:
    """Fixed-size radar input: sampled or zero-padded rows plus validity flags"""
    matrix: np.ndarray
    valid: np.ndarray
    source_indices: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.source_indices is None:
            self.source_indices = np.where(self.valid, np.arange(len(self.valid)), -1)

    @property
    def target_count(self) -> int:
        return int(self.matrix.shape[0])

    @property
    def valid_count(self) -> int:
        return int(self.valid.sum())

    def labels_from(self, frame: RadarFrame) -> np.ndarray:
        """Per-row class labels looked up via source_indices; -1 for padding or unlabeled"""
        labels = np.full(self.target_count, -1, dtype=np.int64)
        if frame.labels is None:
            return labels
        source = np.asarray(frame.labels, dtype=np.int64)
        rows = np.nonzero(self.valid)[0]
        labels[rows] = source[self.source_indices[rows]]
        return labels


@dataclass
class CameraModel:
    """Pinhole intrinsics in pixels"""
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise RadarError(f"Focal lengths must be positive → fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise RadarError(
                f"Principal point ({self.cx}, {self.cy}) outside image {self.width}x{self.height}")

    @classmethod
    def for_image(cls, width: int, height: int, focal_factor: float = 1.0) -> "CameraModel":
        focal = focal_factor * width
        return cls(fx=focal, fy=focal, cx=width / 2.0, cy=height / 2.0, width=width, height=height)

    def back_project(self, u: float, v: float, z: float) -> Tuple[float, float]:
        """Inverse of the pinhole model at known depth z"""
        return ((u - self.cx) * z / self.fx, (v - self.cy) * z / self.fy)

    def to_dict(self) -> Dict[str, float]:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}


class ProjectedPoint(NamedTuple):
    u: float
    v: float
    in_view: bool


def sample_or_pad(frame: RadarFrame, target_count: int, rng_seed: int) -> SampledPoints:
    """
    Bring a frame to exactly target_count rows

    Frames larger than target_count are sampled uniformly without replacement
    (selected rows kept in source order); smaller frames keep every point in
    order followed by zero rows marked invalid.

    Args:
        frame: Radar frame of N_p points
        target_count: Number of rows in the result (≥ 1)
        rng_seed: Seed for the sampling draw

    Returns:
        SampledPoints with count(valid) == min(N_p, target_count)
    """
    if target_count < 1:
        raise RadarError(f"target_count must be ≥ 1 → {target_count}")
    source = frame.as_matrix()
    n_points = source.shape[0]
    matrix = np.zeros((target_count, 5), dtype=np.float64)
    valid = np.zeros(target_count, dtype=bool)
    indices = np.full(target_count, -1, dtype=np.int64)

    if n_points > target_count:
        rng = np.random.default_rng(rng_seed)
        chosen = np.sort(rng.choice(n_points, size=target_count, replace=False))
        matrix[:] = source[chosen]
        valid[:] = True
        indices[:] = chosen
    else:
        matrix[:n_points] = source
        valid[:n_points] = True
        indices[:n_points] = np.arange(n_points)
    return SampledPoints(matrix=matrix, valid=valid, source_indices=indices)


def project_array(xyz: np.ndarray, cam: CameraModel,
                  z_min: float = DEFAULT_Z_MIN) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorised pinhole projection; u, v are NaN for points at or behind z_min"""
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    z = xyz[:, 2]
    in_front = z > z_min
    safe_z = np.where(in_front, z, 1.0)
    u = np.where(in_front, cam.cx + cam.fx * xyz[:, 0] / safe_z, np.nan)
    v = np.where(in_front, cam.cy + cam.fy * xyz[:, 1] / safe_z, np.nan)
    with np.errstate(invalid="ignore"):
        inside = (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
    return u, v, in_front & inside


def project_points(frame: RadarFrame, cam: CameraModel,
                   z_min: float = DEFAULT_Z_MIN) -> List[ProjectedPoint]:
    """
    Project every radar point through the pinhole model

    Args:
        frame: Radar frame
        cam: Camera intrinsics
        z_min: Depth cutoff; points with z ≤ z_min are flagged out of view

    Returns:
        One (u, v, in_view) per point, in frame order
    """
    matrix = frame.as_matrix()
    u, v, in_view = project_array(matrix[:, :3], cam, z_min)
    return [ProjectedPoint(float(a), float(b), bool(c)) for a, b, c in zip(u, v, in_view)]


# ---------------------------------------------------------------- point encoder

def init_point_encoder(widths: Sequence[int], rng: np.random.Generator) -> Dict[str, Tensor]:
    """Shared per-point MLP 5 → widths[0] → ... → widths[-1], Xavier weights, zero bias"""
    params: Dict[str, Tensor] = {}
    fan_in = 5
    for level, width in enumerate(widths, start=1):
        params[f"point.l{level}.w"] = xavier_uniform(fan_in, width, rng, name=f"point.l{level}.w")
        params[f"point.l{level}.b"] = zeros((width,), requires_grad=True, name=f"point.l{level}.b")
        fan_in = width
    return params


def encoder_levels(params: Dict[str, Tensor], prefix: str) -> int:
    return sum(1 for name in params if name.startswith(prefix) and name.endswith(".w"))


def encode_points(sampled: SampledPoints, params: Dict[str, Tensor],
                  feature_scale: Sequence[float] = FEATURE_SCALE) -> List[Tensor]:
    """
    Per-point radar features F_radar^i for every encoder level

    Padded rows are zeroed after every layer so they can never leak signal.

    Returns:
        List of (target_count × C^i) tensors, one per level
    """
    inputs = Tensor(sampled.matrix * np.asarray(feature_scale, dtype=np.float64)[None, :])
    valid_col = sampled.valid.astype(np.float64)[:, None]
    features: List[Tensor] = []
    hidden = inputs
    for level in range(1, encoder_levels(params, "point.l") + 1):
        weight = params[f"point.l{level}.w"]
        bias = params[f"point.l{level}.b"]
        hidden = relu(add_row(matmul(hidden, weight), bias))
        keep = Tensor(np.repeat(valid_col, weight.shape[1], axis=1))
        hidden = mul(hidden, keep)
        features.append(hidden)
    return features


# ---------------------------------------------------------------- classification head

def init_point_classifier(in_width: int, hidden: int, num_classes: int = NUM_CLASSES,
                          rng: Optional[np.random.Generator] = None,
                          zero: bool = False) -> Dict[str, Tensor]:
    """Two-layer MLP head; zero=True gives the all-zero initialization"""
    rng = rng or np.random.default_rng(0)
    if zero:
        return {
            "cls.h.w": zeros((in_width, hidden), requires_grad=True, name="cls.h.w"),
            "cls.h.b": zeros((hidden,), requires_grad=True, name="cls.h.b"),
            "cls.out.w": zeros((hidden, num_classes), requires_grad=True, name="cls.out.w"),
            "cls.out.b": zeros((num_classes,), requires_grad=True, name="cls.out.b"),
        }
    return {
        "cls.h.w": xavier_uniform(in_width, hidden, rng, name="cls.h.w"),
        "cls.h.b": zeros((hidden,), requires_grad=True, name="cls.h.b"),
        "cls.out.w": xavier_uniform(hidden, num_classes, rng, name="cls.out.w"),
        "cls.out.b": zeros((num_classes,), requires_grad=True, name="cls.out.b"),
    }


def classify_points(point_features: Tensor, params: Dict[str, Tensor],
                    valid: Optional[np.ndarray] = None) -> Tensor:
    """
    Per-point class probabilities (target_count × C_cls)

    Invalid rows get zero logits and therefore the uniform distribution.
    """
    hidden = relu(add_row(matmul(point_features, params["cls.h.w"]), params["cls.h.b"]))
    logits = add_row(matmul(hidden, params["cls.out.w"]), params["cls.out.b"])
    if valid is not None:
        keep = np.repeat(np.asarray(valid, dtype=np.float64)[:, None], logits.shape[1], axis=1)
        logits = mul(logits, Tensor(keep))
    return softmax_rows(logits)


# ---------------------------------------------------------------- text IO

def save_radar_frame(frame: RadarFrame, path: Path) -> Path:
    """Write a frame in the documented line-delimited text format"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    labels = frame.labels if frame.labels is not None else [-1] * len(frame.points)
    lines = [RADAR_FORMAT_HEADER, RADAR_COLUMNS]
    for point, label in zip(frame.points, labels):
        lines.append(" ".join([frame.frame_id] + [repr(float(v)) for v in point.as_row()] + [str(int(label))]))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def load_radar_frame(path: Path, frame_id: Optional[str] = None) -> RadarFrame:
    """
    Read a radar text file

    Raises:
        RadarFormatError: If a line has the wrong field count, bad or non-finite numbers,
            or an out-of-range label
    """
    path = Path(path)
    points: List[RadarPoint] = []
    labels: List[int] = []
    seen_id = frame_id
    for line_number, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split(" ")
        if len(fields) != 7:
            raise RadarFormatError(f"Expected 7 fields → {path}:{line_number}, got {len(fields)}")
        try:
            values = [float(v) for v in fields[1:6]]
            label = int(fields[6])
        except ValueError as e:
            raise RadarFormatError(f"Bad number → {path}:{line_number}: {e}")
        seen_id = seen_id or fields[0]
        try:
            points.append(RadarPoint(*values))
        except RadarError as e:
            raise RadarFormatError(f"Bad point → {path}:{line_number}: {e}")
        labels.append(label)
    labeled = [label for label in labels if label >= 0]
    if labeled and len(labeled) != len(labels):
        raise RadarFormatError(f"Mixed labeled and unlabeled points → {path}")
    try:
        return RadarFrame(points=points, labels=labels if labeled else None,
                          frame_id=seen_id or path.parent.name or "frame")
    except RadarError as e:
        raise RadarFormatError(f"Bad frame → {path}: {e}")
