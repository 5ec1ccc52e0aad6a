#!/usr/bin/env python3
"""
Run Configuration Module for Harborsight
Loads YAML run configuration files, layers them over built-in defaults and
validates every key.

Precedence (lowest → highest): built-in defaults → config file → environment
(HARBORSIGHT_WORKERS, HARBORSIGHT_LOG_LEVEL, optionally from .env) →
command-line `section.key=value` overrides.
"""

import copy
import logging
import os
from dataclasses import asdict
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence

import yaml

from inpaint_orchestrator import IdentityInpainter, InpaintConfig, load_prompt_table
from line_protocol import create_inpainter, create_masker
from pipeline import ABLATIONS, STAGE3_VARIANTS, ModelConfig, Stage2Settings, TrainConfig
from prompt_masker import EmptyMasker
from synth_scenes import CorpusConfig, RadarNoiseConfig, SceneConfig

try:
    from dotenv import load_dotenv
except ImportError:
    load_dotenv = None

logger = logging.getLogger(__name__)

RESOLVED_CONFIG_NAME = "resolved_config.yaml"

ENV_OVERRIDES = {
    "HARBORSIGHT_WORKERS": ("run", "workers"),
    "HARBORSIGHT_LOG_LEVEL": ("run", "log_level"),
}

_scene_defaults = {k: v for k, v in asdict(SceneConfig()).items() if k != "rng_seed"}
_train_defaults = asdict(TrainConfig())

DEFAULTS: Dict[str, Dict[str, Any]] = {
    "scene": _scene_defaults,
    "radar_noise": asdict(RadarNoiseConfig()),
    "corpus": asdict(CorpusConfig()),
    "radar": {"target_count": 1000, "z_min": 0.1},
    "model": {"widths": [16, 32, 64, 128], "decoder_width": 32, "classifier_hidden": 64, "use_radar": True},
    "train": _train_defaults,
    "stage3": {"variant": "concatenation", "epochs": 10, "batch_size": 4, "lr_initial": 5e-4,
               "lr_final": 1e-6, "weight_decay": 0.01, "lambda_seg": 1.0},
    "mask": {"noise_threshold": 0.5, "inpaint_threshold": 0.5},
    "inpaint": {"inpainter": "mock", "guidance_scale": 7.0, "inference_steps": 50, "seed": 0,
                "prompt_table": ""},
    "masker": {"kind": "region_grow", "color_tolerance": 0.08, "max_region_fraction": 0.5},
    "eval": {"split": "val", "subset": "all", "adverse_only": False},
    "ablation": {"kind": "sampling_counts", "seeds": [0, 1, 2]},
    "run": {"workers": 1, "log_level": "INFO"},
}

CHOICES = {
    ("stage3", "variant"): STAGE3_VARIANTS,
    ("ablation", "kind"): ABLATIONS,
    ("eval", "subset"): ("all", "targets", "drivable"),
    ("eval", "split"): ("train", "val", "test", "all"),
    ("masker", "kind"): ("region_grow", "empty", "external"),
    ("inpaint", "inpainter"): ("mock", "identity", "external"),
    ("run", "log_level"): ("DEBUG", "INFO", "WARNING", "ERROR"),
}


class ConfigError(Exception):
    """Base exception for run configuration errors"""
    pass


class ConfigLocationError(ConfigError):
    """Exception for missing configuration files"""
    pass


class ConfigValidationError(ConfigError):
    """Exception for unknown keys or values of the wrong type"""
    pass


def _coerce(section: str, key: str, value: Any, from_text: bool = False) -> Any:
    """Convert value to the type of the default for section.key"""
    default = DEFAULTS[section][key]
    where = f"{section}.{key}"
    if from_text and isinstance(value, str) and not isinstance(default, str):
        try:
            value = yaml.safe_load(value)
        except yaml.YAMLError as e:
            raise ConfigValidationError(f"Cannot parse value for {where} → {value!r}: {e}")
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigValidationError(f"{where} must be true or false → {value!r}")
        result = value
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigValidationError(f"{where} must be an integer → {value!r}")
        result = value
    elif isinstance(default, float):
        if isinstance(value, str):
            # YAML 1.1 reads "5e-4" as a string
            try:
                value = float(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigValidationError(f"{where} must be a number → {value!r}")
        result = float(value)
    elif isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigValidationError(f"{where} must be a list → {value!r}")
        result = list(value)
    else:
        result = "" if value is None else str(value)
    choices = CHOICES.get((section, key))
    if choices is not None and result not in choices:
        raise ConfigValidationError(f"{where} must be one of {choices} → {result!r}")
    return result


class RunConfig:
    """Resolved configuration tree plus builders for the typed settings objects"""

    def __init__(self, sections: Optional[Mapping[str, Mapping[str, Any]]] = None):
        self.sections: Dict[str, Dict[str, Any]] = copy.deepcopy(DEFAULTS)
        self.source: Optional[Path] = None
        if sections:
            self.merge(sections)

    def merge(self, sections: Mapping[str, Mapping[str, Any]], from_text: bool = False) -> "RunConfig":
        """
        Layer a section → key → value mapping over the current values

        Raises:
            ConfigValidationError: On unknown sections, unknown keys or bad values
        """
        if not isinstance(sections, Mapping):
            raise ConfigValidationError(f"Configuration root must be a mapping of sections → {type(sections).__name__}")
        for section, values in sections.items():
            if section not in DEFAULTS:
                raise ConfigValidationError(f"Unknown configuration section → {section}")
            if values is None:
                continue
            if not isinstance(values, Mapping):
                raise ConfigValidationError(f"Section {section} must be a mapping")
            for key, value in values.items():
                if key not in DEFAULTS[section]:
                    raise ConfigValidationError(f"Unknown configuration key → {section}.{key}")
                self.sections[section][key] = _coerce(section, key, value, from_text)
        return self

    def set(self, assignment: str) -> "RunConfig":
        """Apply one 'section.key=value' override"""
        if "=" not in assignment or "." not in assignment.split("=", 1)[0]:
            raise ConfigValidationError(f"Override must look like section.key=value → {assignment!r}")
        path, value = assignment.split("=", 1)
        section, key = path.strip().split(".", 1)
        return self.merge({section: {key: value.strip()}}, from_text=True)

    def get(self, section: str, key: str) -> Any:
        return self.sections[section][key]

    # ---------------------------------------------------------------- builders

    def scene_config(self) -> SceneConfig:
        return SceneConfig(**self.sections["scene"], rng_seed=self.get("corpus", "seed"))

    def radar_noise_config(self) -> RadarNoiseConfig:
        return RadarNoiseConfig(**self.sections["radar_noise"])

    def corpus_config(self) -> CorpusConfig:
        return CorpusConfig(**self.sections["corpus"])

    def model_config(self) -> ModelConfig:
        model = self.sections["model"]
        return ModelConfig(widths=tuple(model["widths"]), decoder_width=model["decoder_width"],
                           classifier_hidden=model["classifier_hidden"],
                           target_count=self.get("radar", "target_count"),
                           use_radar=model["use_radar"], z_min=self.get("radar", "z_min"))

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.sections["train"])

    def stage3_train_config(self) -> TrainConfig:
        stage3 = {k: v for k, v in self.sections["stage3"].items() if k != "variant"}
        return TrainConfig(**{**self.sections["train"], **stage3, "lambda_cls": 0.0})

    def stage2_settings(self) -> Stage2Settings:
        inpaint = self.sections["inpaint"]
        table = inpaint["prompt_table"]
        return Stage2Settings(
            noise_threshold=self.get("mask", "noise_threshold"),
            mask_threshold=self.get("mask", "inpaint_threshold"),
            inpaint=InpaintConfig(inpaint["guidance_scale"], inpaint["inference_steps"], inpaint["seed"]),
            prompts=load_prompt_table(Path(table) if table else None))

    def masker(self):
        masker = self.sections["masker"]
        if masker["kind"] == "empty":
            return EmptyMasker()
        return create_masker(masker["kind"], masker["color_tolerance"], masker["max_region_fraction"])

    def inpainter(self):
        kind = self.get("inpaint", "inpainter")
        if kind == "identity":
            return IdentityInpainter()
        return create_inpainter(kind)

    # ---------------------------------------------------------------- persistence

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.sections, sort_keys=True, default_flow_style=False)

    def write_resolved(self, directory: Path) -> Path:
        """Echo the resolved configuration next to a command's outputs"""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / RESOLVED_CONFIG_NAME
        path.write_text(self.to_yaml(), encoding="utf-8")
        return path


def read_config_file(path: Path) -> Dict[str, Any]:
    """
    Parse one YAML configuration file

    Raises:
        ConfigLocationError: If the file does not exist
        ConfigValidationError: If the YAML cannot be parsed
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigLocationError(f"Configuration file not found → {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            return yaml.safe_load(f) or {}
    except yaml.YAMLError as e:
        raise ConfigValidationError(f"YAML parsing error → {path}: {e}")


def load_run_config(path: Optional[Path] = None, overrides: Sequence[str] = (),
                    environ: Optional[Mapping[str, str]] = None, use_dotenv: bool = True) -> RunConfig:
    """
    Resolve defaults, file, environment and overrides into one RunConfig

    Args:
        path: Optional YAML configuration file
        overrides: 'section.key=value' strings, applied last
        environ: Environment mapping (os.environ when None)
        use_dotenv: Load a .env file from the working directory first
    """
    if use_dotenv and environ is None and load_dotenv is not None:
        load_dotenv()
    environ = os.environ if environ is None else environ
    config = RunConfig()
    if path is not None:
        config.merge(read_config_file(path))
        config.source = Path(path)
    for variable, (section, key) in ENV_OVERRIDES.items():
        if environ.get(variable):
            config.merge({section: {key: environ[variable]}}, from_text=True)
    for assignment in overrides:
        config.set(assignment)
    logger.debug(f"Resolved configuration from {path or 'defaults'} with {len(overrides)} overrides")
    return config
