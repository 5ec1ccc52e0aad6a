#!/usr/bin/env python3
"""
Corpus IO for Harborsight
On-disk corpus layout:

    <corpus>/manifest.txt
    <corpus>/scenes/<id>/image.png      corrupted render, 8-bit RGB
    <corpus>/scenes/<id>/clean.png      uncorrupted render
    <corpus>/scenes/<id>/gt.maskstack   one-hot ground truth
    <corpus>/scenes/<id>/radar.txt      labeled radar frame
    <corpus>/scenes/<id>/meta.yaml      camera, corruption, seed, objects
"""

import json
import logging
import math
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence

import numpy as np
import yaml
from PIL import Image

from mask_ops import load_maskstack, save_maskstack
from radar import CameraModel, load_radar_frame, save_radar_frame
from synth_scenes import (
    CorruptionConfig, RadarNoiseConfig, Scene, SceneConfig, ScenePlan, SceneObject, scene_from_plan,
)

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.txt"
MANIFEST_FORMAT = "harborsight-corpus-v1"
MANIFEST_COLUMNS = ("scene_id", "split", "seed", "corruption", "severity", "n_points")


class CorpusError(Exception):
    """Base exception for corpus IO"""
    pass


class CorpusLocationError(CorpusError):
    """Exception for missing, unwritable or occupied corpus paths"""
    pass


class CorpusFormatError(CorpusError):
    """Exception for malformed manifest or scene files"""
    pass


@dataclass
class ManifestEntry:
    scene_id: str
    split: str
    seed: int
    corruption: str
    severity: float
    n_points: int

    @property
    def is_adverse(self) -> bool:
        return self.corruption != "none" and self.severity > 0

    def to_line(self) -> str:
        return f"{self.scene_id} {self.split} {self.seed} {self.corruption} {self.severity!r} {self.n_points}"


@dataclass
class CorpusManifest:
    header: Dict[str, str] = field(default_factory=dict)
    entries: List[ManifestEntry] = field(default_factory=list)

    def select(self, split: Optional[str] = None, adverse_only: bool = False) -> List[ManifestEntry]:
        return [e for e in self.entries
                if (split is None or e.split == split) and (not adverse_only or e.is_adverse)]


# ---------------------------------------------------------------- images

def save_png(image: np.ndarray, path: Path) -> Path:
    pixels = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(pixels).save(path, format="PNG")
    return path


def load_png(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0


# ---------------------------------------------------------------- scenes

def jsonable(value: Any) -> Any:
    """Replace non-finite floats with None, recursing into dicts, lists and tuples"""
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {k: jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [jsonable(v) for v in value]
    return value


def write_jsonl(records: Sequence[Dict[str, Any]], path: Path) -> Path:
    """One JSON object per line, keys sorted, non-finite floats as null"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for record in records:
            f.write(json.dumps(jsonable(record), sort_keys=True) + "\n")
    return path


def save_scene(scene: Scene, scene_dir: Path) -> Path:
    scene_dir = Path(scene_dir)
    scene_dir.mkdir(parents=True, exist_ok=True)
    save_png(scene.image, scene_dir / "image.png")
    save_png(scene.clean_image, scene_dir / "clean.png")
    save_maskstack(scene.gt, scene_dir / "gt.maskstack")
    save_radar_frame(scene.radar, scene_dir / "radar.txt")
    with open(scene_dir / "meta.yaml", "w", encoding="utf-8") as f:
        yaml.safe_dump(scene.metadata(), f, sort_keys=True)
    return scene_dir


def load_scene(scene_dir: Path) -> Scene:
    """
    Read one scene directory

    Raises:
        CorpusLocationError: If the directory or one of its files is missing
        CorpusFormatError: If meta.yaml is malformed
    """
    scene_dir = Path(scene_dir)
    required = ("image.png", "clean.png", "gt.maskstack", "radar.txt", "meta.yaml")
    for name in required:
        if not (scene_dir / name).is_file():
            raise CorpusLocationError(f"Missing scene file → {scene_dir / name}")
    with open(scene_dir / "meta.yaml", "r", encoding="utf-8") as f:
        meta = yaml.safe_load(f) or {}
    try:
        camera = CameraModel(**meta["camera"])
        corruption = CorruptionConfig(**meta["corruption"])
        objects = [SceneObject(o["class_index"], o["depth"], o["center_x"], tuple(o["bbox"]))
                   for o in meta.get("objects", [])]
        scene_id, seed = meta["scene_id"], int(meta["seed"])
    except (KeyError, TypeError) as e:
        raise CorpusFormatError(f"Malformed meta.yaml → {scene_dir}: {e}")
    return Scene(scene_id=scene_id, image=load_png(scene_dir / "image.png"),
                 clean_image=load_png(scene_dir / "clean.png"),
                 gt=load_maskstack(scene_dir / "gt.maskstack"),
                 radar=load_radar_frame(scene_dir / "radar.txt", frame_id=scene_id),
                 camera=camera, corruption=corruption, seed=seed, objects=objects,
                 point_sources=np.asarray(meta.get("point_sources", []), dtype=np.int64))


# ---------------------------------------------------------------- manifest

def write_manifest(path: Path, manifest: CorpusManifest) -> Path:
    lines = [f"# {key}={value}" for key, value in sorted(manifest.header.items())]
    lines.append("# " + " ".join(MANIFEST_COLUMNS))
    lines.extend(entry.to_line() for entry in manifest.entries)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return Path(path)


def read_manifest(corpus_dir: Path) -> CorpusManifest:
    path = Path(corpus_dir) / MANIFEST_NAME
    if not path.is_file():
        raise CorpusLocationError(f"Corpus manifest not found → {path}")
    manifest = CorpusManifest()
    for line_number, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if "=" in body:
                key, value = body.split("=", 1)
                manifest.header[key.strip()] = value.strip()
            continue
        fields = line.split()
        if len(fields) != len(MANIFEST_COLUMNS):
            raise CorpusFormatError(f"Expected {len(MANIFEST_COLUMNS)} fields → {path}:{line_number}")
        try:
            manifest.entries.append(ManifestEntry(fields[0], fields[1], int(fields[2]), fields[3],
                                                  float(fields[4]), int(fields[5])))
        except ValueError as e:
            raise CorpusFormatError(f"Bad manifest value → {path}:{line_number}: {e}")
    if manifest.header.get("format") != MANIFEST_FORMAT:
        raise CorpusFormatError(f"Unknown corpus format {manifest.header.get('format')!r} → {path}")
    return manifest


def prepare_output_dir(path: Path, force: bool = False) -> Path:
    """
    Create path, refusing to reuse a non-empty directory unless force is set

    Raises:
        CorpusLocationError: If path is a file, is occupied, or cannot be created
    """
    path = Path(path)
    if path.exists() and not path.is_dir():
        raise CorpusLocationError(f"Output path is not a directory → {path}")
    if path.is_dir() and any(path.iterdir()):
        if not force:
            raise CorpusLocationError(f"Output directory is not empty (use --force) → {path}")
        shutil.rmtree(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise CorpusLocationError(f"Cannot create output directory → {path}: {e}")
    return path


def write_corpus(corpus_dir: Path, plans: Sequence[ScenePlan], scene_cfg: SceneConfig,
                 radar_cfg: RadarNoiseConfig, header: Optional[Dict[str, str]] = None,
                 force: bool = False) -> CorpusManifest:
    """Render and persist every planned scene, then the manifest"""
    corpus_dir = prepare_output_dir(corpus_dir, force)
    manifest = CorpusManifest(header={"format": MANIFEST_FORMAT, "count": str(len(plans)),
                                      **{f"scene.{k}": str(v) for k, v in asdict(scene_cfg).items()
                                         if k != "rng_seed"},
                                      **{f"radar_noise.{k}": str(v) for k, v in asdict(radar_cfg).items()},
                                      **(header or {})})
    for plan in plans:
        scene = scene_from_plan(plan, scene_cfg, radar_cfg)
        save_scene(scene, corpus_dir / "scenes" / plan.scene_id)
        manifest.entries.append(ManifestEntry(plan.scene_id, plan.split, plan.seed, plan.corruption.mode,
                                              plan.corruption.severity, len(scene.radar)))
    write_manifest(corpus_dir / MANIFEST_NAME, manifest)
    logger.info(f"Wrote {len(plans)} scenes → {corpus_dir}")
    return manifest


class Corpus:
    """Read access to a corpus directory"""

    def __init__(self, corpus_dir: Path):
        self.root = Path(corpus_dir)
        if not self.root.is_dir():
            raise CorpusLocationError(f"Corpus directory not found → {self.root}")
        self.manifest = read_manifest(self.root)

    def __len__(self) -> int:
        return len(self.manifest.entries)

    def entries(self, split: Optional[str] = None, adverse_only: bool = False) -> List[ManifestEntry]:
        return self.manifest.select(split, adverse_only)

    def load(self, entry: ManifestEntry) -> Scene:
        return load_scene(self.root / "scenes" / entry.scene_id)

    def scenes(self, split: Optional[str] = None, adverse_only: bool = False) -> Iterator[Scene]:
        for entry in self.entries(split, adverse_only):
            yield self.load(entry)
