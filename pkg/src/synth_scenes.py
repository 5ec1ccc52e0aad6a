#!/usr/bin/env python3
"""
Synthetic Scene Module for Harborsight
Deterministic water scenes: a sky/water split at the horizon, flat-shaded
objects resting on the water plane, exact ground-truth masks, radar returns
with mislocation/dropout/clutter noise and adverse-weather image corruptions.

Geometry: a level pinhole camera sits camera_height metres above a flat water
plane (camera y axis points down). The horizon is the principal point row, so a
water pixel at row v lies at depth fy * camera_height / (v - cy).
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image, ImageDraw
from scipy import ndimage

from mask_ops import BACKGROUND_INDEX, DEFAULT_LEGEND, NUM_CLASSES, WATER_INDEX, MaskStack
from radar import CameraModel, RadarFrame

logger = logging.getLogger(__name__)

CORRUPTION_MODES = ("none", "fog", "droplets", "blur", "strong_light")
ADVERSE_MODES = CORRUPTION_MODES[1:]

# Base RGB per class, indexed like DEFAULT_LEGEND
CLASS_COLORS: Tuple[Tuple[float, float, float], ...] = (
    (0.78, 0.84, 0.90),  # background (sky)
    (0.55, 0.38, 0.22),  # pier
    (0.95, 0.50, 0.10),  # buoy
    (0.85, 0.15, 0.20),  # sailor
    (0.50, 0.52, 0.55),  # ship
    (0.96, 0.96, 0.94),  # boat
    (0.15, 0.22, 0.55),  # vessel
    (0.20, 0.75, 0.35),  # kayak
    (0.10, 0.35, 0.55),  # water
)

# (width m, height m, shape) per object class
OBJECT_GEOMETRY: Dict[int, Tuple[float, float, str]] = {
    1: (6.0, 1.0, "rect"),
    2: (0.8, 1.0, "ellipse"),
    3: (0.6, 1.8, "rect"),
    4: (12.0, 5.0, "rect"),
    5: (4.0, 1.5, "ellipse"),
    6: (8.0, 3.0, "rect"),
    7: (3.0, 0.5, "ellipse"),
}
OBJECT_RCS = {1: 10.0, 2: 0.0, 3: -5.0, 4: 25.0, 5: 12.0, 6: 20.0, 7: 2.0}
STATIC_CLASSES = (1, 2)
DROPLET_TINT = (0.80, 0.85, 0.90)


class SceneConfigError(Exception):
    """Exception for invalid scene, radar noise or corruption settings"""
    pass


@dataclass
class SceneConfig:
    image_height: int = 64
    image_width: int = 64
    object_count_min: int = 1
    object_count_max: int = 4
    waterline_height: float = 0.45
    camera_height: float = 2.0
    focal_factor: float = 1.0
    depth_min: float = 8.0
    depth_max: float = 40.0
    color_jitter: float = 0.04
    texture_noise: float = 0.012
    rng_seed: int = 0

    def __post_init__(self):
        if self.image_height % 16 or self.image_width % 16 or min(self.image_height, self.image_width) <= 0:
            raise SceneConfigError(
                f"Image size must be positive multiples of 16 → {self.image_height}x{self.image_width}")
        if not 0 <= self.object_count_min <= self.object_count_max:
            raise SceneConfigError(
                f"Bad object count range → [{self.object_count_min}, {self.object_count_max}]")
        if not 0 < self.waterline_height < 1:
            raise SceneConfigError(f"waterline_height must be in (0, 1) → {self.waterline_height}")
        if not 0 < self.depth_min <= self.depth_max:
            raise SceneConfigError(f"Bad depth range → [{self.depth_min}, {self.depth_max}]")

    def camera(self) -> CameraModel:
        focal = self.focal_factor * self.image_width
        return CameraModel(fx=focal, fy=focal, cx=self.image_width / 2.0,
                           cy=float(self.horizon_row), width=self.image_width, height=self.image_height)

    @property
    def horizon_row(self) -> int:
        return int(round(self.waterline_height * self.image_height))


@dataclass
class RadarNoiseConfig:
    clutter_rate: float = 2.0
    mislocation_sigma: float = 0.1
    dropout_prob: float = 0.0
    points_per_object_min: int = 20
    points_per_object_max: int = 60

    def __post_init__(self):
        if min(self.clutter_rate, self.mislocation_sigma) < 0:
            raise SceneConfigError("clutter_rate and mislocation_sigma must be non-negative")
        if not 0 <= self.dropout_prob <= 1:
            raise SceneConfigError(f"dropout_prob must be in [0, 1] → {self.dropout_prob}")
        if not 0 <= self.points_per_object_min <= self.points_per_object_max:
            raise SceneConfigError("Bad points_per_object range")


@dataclass
class CorruptionConfig:
    mode: str = "none"
    severity: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.mode not in CORRUPTION_MODES:
            raise SceneConfigError(f"Unknown corruption mode '{self.mode}', expected one of {CORRUPTION_MODES}")
        if not 0 <= self.severity <= 1:
            raise SceneConfigError(f"severity must be in [0, 1] → {self.severity}")


@dataclass
class SceneObject:
    class_index: int
    depth: float
    center_x: float
    bbox: Tuple[int, int, int, int]


@dataclass
class Scene:
    """Corpus unit: corrupted and clean images, ground truth, radar frame and metadata"""
    scene_id: str
    image: np.ndarray
    clean_image: np.ndarray
    gt: MaskStack
    radar: RadarFrame
    camera: CameraModel
    corruption: CorruptionConfig
    seed: int
    objects: List[SceneObject] = field(default_factory=list)
    point_sources: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def is_adverse(self) -> bool:
        return self.corruption.mode != "none" and self.corruption.severity > 0

    def metadata(self) -> Dict:
        return {
            "scene_id": self.scene_id,
            "seed": int(self.seed),
            "camera": self.camera.to_dict(),
            "corruption": asdict(self.corruption),
            "objects": [{"class_index": o.class_index, "depth": float(o.depth),
                         "center_x": float(o.center_x), "bbox": list(o.bbox)} for o in self.objects],
            "point_sources": [int(s) for s in self.point_sources],
        }


# ---------------------------------------------------------------- rendering

def _place_objects(cfg: SceneConfig, cam: CameraModel, rng: np.random.Generator) -> List[SceneObject]:
    count = int(rng.integers(cfg.object_count_min, cfg.object_count_max + 1))
    objects = []
    for _ in range(count):
        class_index = int(rng.integers(1, NUM_CLASSES - 1))
        depth = float(rng.uniform(cfg.depth_min, cfg.depth_max))
        u_center = float(rng.uniform(0.1 * cfg.image_width, 0.9 * cfg.image_width))
        width_m, height_m, _ = OBJECT_GEOMETRY[class_index]
        half_w = max(1.0, 0.5 * cam.fx * width_m / depth)
        height_px = max(2.0, cam.fy * height_m / depth)
        bottom = cam.cy + cam.fy * cfg.camera_height / depth
        bbox = (int(round(u_center - half_w)), int(round(bottom - height_px)),
                int(round(u_center + half_w)), int(round(bottom)))
        center_x = (u_center - cam.cx) * depth / cam.fx
        objects.append(SceneObject(class_index, depth, center_x, bbox))
    return objects


def _render_label_maps(cfg: SceneConfig, objects: Sequence[SceneObject]) -> Tuple[np.ndarray, np.ndarray]:
    """Class label map and object-id map (0 = no object, k+1 = objects[k]); far objects first"""
    size = (cfg.image_width, cfg.image_height)
    labels = Image.new("L", size, BACKGROUND_INDEX)
    ids = Image.new("L", size, 0)
    draw_labels, draw_ids = ImageDraw.Draw(labels), ImageDraw.Draw(ids)
    draw_labels.rectangle([0, cfg.horizon_row, cfg.image_width, cfg.image_height], fill=WATER_INDEX)
    order = sorted(range(len(objects)), key=lambda k: -objects[k].depth)
    for k in order:
        obj = objects[k]
        shape = OBJECT_GEOMETRY[obj.class_index][2]
        draw = [draw_labels.ellipse, draw_ids.ellipse] if shape == "ellipse" else \
            [draw_labels.rectangle, draw_ids.rectangle]
        draw[0](list(obj.bbox), fill=obj.class_index)
        draw[1](list(obj.bbox), fill=k + 1)
    return np.array(labels, dtype=np.int64), np.array(ids, dtype=np.int64)


def _shade(cfg: SceneConfig, labels: np.ndarray, ids: np.ndarray, objects: Sequence[SceneObject],
           rng: np.random.Generator) -> np.ndarray:
    palette = np.asarray(CLASS_COLORS, dtype=np.float64)
    image = palette[labels].copy()
    for k in range(len(objects)):
        jitter = rng.uniform(-cfg.color_jitter, cfg.color_jitter, size=3)
        image[ids == k + 1] += jitter
    image += cfg.texture_noise * rng.standard_normal(image.shape)
    return np.clip(image, 0.0, 1.0)


def _object_points(cfg: SceneConfig, noise: RadarNoiseConfig, cam: CameraModel, ids: np.ndarray,
                   objects: Sequence[SceneObject], rng: np.random.Generator):
    rows_out, labels_out, sources = [], [], []
    for k, obj in enumerate(objects):
        n_points = int(rng.integers(noise.points_per_object_min, noise.points_per_object_max + 1))
        dropped = rng.random() < noise.dropout_prob
        speed = 0.0 if obj.class_index in STATIC_CLASSES else float(rng.uniform(-2.0, 2.0))
        pixels = np.argwhere(ids == k + 1)
        if dropped or n_points == 0 or pixels.size == 0:
            continue
        picks = pixels[rng.integers(0, len(pixels), size=n_points)]
        u = picks[:, 1] + rng.random(n_points)
        v = picks[:, 0] + rng.random(n_points)
        limit = 3.0 * noise.mislocation_sigma
        offset = np.clip(noise.mislocation_sigma * rng.standard_normal((n_points, 2)), -limit, limit)
        x = (u - cam.cx) * obj.depth / cam.fx + offset[:, 0]
        y = (v - cam.cy) * obj.depth / cam.fy + offset[:, 1]
        z = np.full(n_points, obj.depth)
        rcs = OBJECT_RCS[obj.class_index] + 2.0 * rng.standard_normal(n_points)
        doppler = speed + 0.1 * rng.standard_normal(n_points)
        rows_out.append(np.column_stack([x, y, z, rcs, doppler]))
        labels_out.extend([obj.class_index] * n_points)
        sources.extend([k] * n_points)
    return rows_out, labels_out, sources


def _clutter_points(cfg: SceneConfig, noise: RadarNoiseConfig, cam: CameraModel, labels: np.ndarray,
                    rng: np.random.Generator) -> np.ndarray:
    count = int(rng.poisson(noise.clutter_rate)) if noise.clutter_rate > 0 else 0
    water = np.argwhere((labels == WATER_INDEX) & (np.arange(labels.shape[0])[:, None] > cfg.horizon_row))
    if count == 0 or water.size == 0:
        return np.zeros((0, 5))
    picks = water[rng.integers(0, len(water), size=count)]
    u = picks[:, 1] + rng.random(count)
    v = picks[:, 0] + rng.random(count)
    z = cam.fy * cfg.camera_height / (v - cam.cy)
    x = (u - cam.cx) * z / cam.fx
    y = np.full(count, cfg.camera_height)
    rcs = rng.uniform(-15.0, 0.0, size=count)
    doppler = rng.uniform(-0.5, 0.5, size=count)
    return np.column_stack([x, y, z, rcs, doppler])


def generate_scene(scene_cfg: SceneConfig, radar_cfg: RadarNoiseConfig,
                   corruption_cfg: CorruptionConfig, scene_id: Optional[str] = None) -> Scene:
    """
    Render one scene, its exact ground truth and its radar frame

    Objects are drawn far to near so nearer objects occlude; radar returns are
    sampled only from visible object pixels, back-projected at the object's
    depth and displaced by truncated Gaussian mislocation. Clutter lands on the
    water plane and is labelled water. Corruption touches the image only.
    """
    rng = np.random.default_rng(scene_cfg.rng_seed)
    cam = scene_cfg.camera()
    scene_id = scene_id or f"scene_{scene_cfg.rng_seed:08d}"

    objects = _place_objects(scene_cfg, cam, rng)
    labels, ids = _render_label_maps(scene_cfg, objects)
    clean = _shade(scene_cfg, labels, ids, objects, rng)

    rows, point_labels, sources = _object_points(scene_cfg, radar_cfg, cam, ids, objects, rng)
    clutter = _clutter_points(scene_cfg, radar_cfg, cam, labels, rng)
    rows.append(clutter)
    point_labels.extend([WATER_INDEX] * len(clutter))
    sources.extend([-1] * len(clutter))
    matrix = np.concatenate(rows, axis=0) if rows else np.zeros((0, 5))

    radar = RadarFrame.from_matrix(matrix, labels=point_labels, frame_id=scene_id)
    image = corrupt(clean, corruption_cfg)
    return Scene(scene_id=scene_id, image=image, clean_image=clean,
                 gt=MaskStack.from_labels(labels, DEFAULT_LEGEND), radar=radar, camera=cam,
                 corruption=corruption_cfg, seed=scene_cfg.rng_seed, objects=objects,
                 point_sources=np.asarray(sources, dtype=np.int64))


# ---------------------------------------------------------------- corruptions

def droplet_discs(height: int, width: int, severity: float, rng_seed: int) -> List[Tuple[float, float, float]]:
    """Seeded (row, col, radius) droplets; count and size grow with severity"""
    if severity <= 0:
        return []
    rng = np.random.default_rng([int(rng_seed), 1])
    count = int(np.ceil(severity * max(1.0, height * width / 512.0)))
    max_radius = 1.5 + 0.08 * min(height, width)
    discs = []
    for _ in range(count):
        discs.append((float(rng.uniform(0, height)), float(rng.uniform(0, width)),
                      float(rng.uniform(1.5, max_radius))))
    return discs


def disc_union(height: int, width: int, discs: Sequence[Tuple[float, float, float]]) -> np.ndarray:
    rows, cols = np.mgrid[0:height, 0:width]
    covered = np.zeros((height, width), dtype=bool)
    for row, col, radius in discs:
        covered |= (rows - row) ** 2 + (cols - col) ** 2 <= radius ** 2
    return covered


def _blur(image: np.ndarray, sigma: float) -> np.ndarray:
    out = ndimage.gaussian_filter1d(image, sigma, axis=0, mode="nearest")
    return ndimage.gaussian_filter1d(out, sigma, axis=1, mode="nearest")


def corrupt(image: np.ndarray, cfg: CorruptionConfig) -> np.ndarray:
    """
    Apply one adverse-weather corruption; severity 0 is the identity for every mode

    fog blends toward mid-gray, droplets blur and tint seeded discs, blur is a
    separable Gaussian with sigma 3·severity and strong_light adds a seeded
    radial glare that saturates highlights.
    """
    image = np.asarray(image, dtype=np.float64)
    if cfg.mode == "none" or cfg.severity == 0:
        return image.copy()
    height, width = image.shape[:2]
    if cfg.mode == "fog":
        return (1.0 - cfg.severity) * image + cfg.severity * 0.5
    if cfg.mode == "blur":
        return np.clip(_blur(image, 3.0 * cfg.severity), 0.0, 1.0)
    if cfg.mode == "droplets":
        covered = disc_union(height, width, droplet_discs(height, width, cfg.severity, cfg.rng_seed))
        drops = 0.6 * _blur(image, 2.0) + 0.4 * np.asarray(DROPLET_TINT)[None, None, :]
        return np.where(covered[:, :, None], np.clip(drops, 0.0, 1.0), image)
    rng = np.random.default_rng([int(cfg.rng_seed), 2])
    center_row, center_col = rng.uniform(0, height), rng.uniform(0, width)
    rows, cols = np.mgrid[0:height, 0:width]
    spread = 0.5 * width
    glare = 1.2 * cfg.severity * np.exp(-((rows - center_row) ** 2 + (cols - center_col) ** 2) / (2 * spread ** 2))
    return np.clip(image + glare[:, :, None], 0.0, 1.0)


# ---------------------------------------------------------------- corpus planning

@dataclass
class CorpusConfig:
    count: int = 20
    seed: int = 0
    adverse_fraction: float = 0.5
    adverse_only: bool = False
    severity_min: float = 0.3
    severity_max: float = 0.9
    train_fraction: float = 0.7
    val_fraction: float = 0.2

    def __post_init__(self):
        if self.count < 0:
            raise SceneConfigError(f"count must be non-negative → {self.count}")
        if not 0 <= self.severity_min <= self.severity_max <= 1:
            raise SceneConfigError("Bad severity range")
        if not 0 <= self.adverse_fraction <= 1:
            raise SceneConfigError(f"adverse_fraction must be in [0, 1] → {self.adverse_fraction}")
        if self.severity_max == 0 and (self.adverse_only or self.adverse_fraction > 0):
            raise SceneConfigError("Adverse scenes need severity_max > 0")
        if self.train_fraction + self.val_fraction > 1 or min(self.train_fraction, self.val_fraction) < 0:
            raise SceneConfigError("Split fractions must be non-negative and sum to at most 1")


@dataclass
class ScenePlan:
    scene_id: str
    seed: int
    split: str
    corruption: CorruptionConfig


def assign_splits(count: int, seed: int, train_fraction: float = 0.7,
                  val_fraction: float = 0.2) -> List[str]:
    """Seeded 70/20/10 train/val/test partition; the train split is never empty when count > 0"""
    order = np.random.default_rng([int(seed), 3]).permutation(count)
    n_val = int(np.floor(val_fraction * count))
    n_test = int(np.floor((1.0 - train_fraction - val_fraction) * count + 1e-9))
    splits = ["train"] * count
    for rank, index in enumerate(order):
        if rank < n_val:
            splits[index] = "val"
        elif rank < n_val + n_test:
            splits[index] = "test"
    return splits


def plan_corpus(cfg: CorpusConfig) -> List[ScenePlan]:
    """Scene ids, seeds, splits and corruptions for a whole corpus"""
    rng = np.random.default_rng([int(cfg.seed), 4])
    splits = assign_splits(cfg.count, cfg.seed, cfg.train_fraction, cfg.val_fraction)
    plans = []
    for index in range(cfg.count):
        scene_seed = int(rng.integers(0, 2 ** 31 - 1))
        adverse = cfg.adverse_only or rng.random() < cfg.adverse_fraction
        mode = str(rng.choice(ADVERSE_MODES)) if adverse else "none"
        severity = float(rng.uniform(cfg.severity_min, cfg.severity_max)) if adverse else 0.0
        plans.append(ScenePlan(scene_id=f"s{index:05d}", seed=scene_seed, split=splits[index],
                               corruption=CorruptionConfig(mode, severity, scene_seed)))
    return plans


def scene_from_plan(plan: ScenePlan, scene_cfg: SceneConfig, radar_cfg: RadarNoiseConfig) -> Scene:
    cfg = SceneConfig(**{**asdict(scene_cfg), "rng_seed": plan.seed})
    return generate_scene(cfg, radar_cfg, plan.corruption, scene_id=plan.scene_id)
