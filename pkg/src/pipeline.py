#!/usr/bin/env python3
"""
Pipeline Module for Harborsight
Three-stage orchestration:

    stage 1  image + radar → cross-attention fusion → M_init, point class probabilities
    stage 2  radar prompts → pseudo-masks → class assignment → M_sam → noise reduction → M_nr
    stage 3  iterative inpainting of M_nr regions → dual-encoder fusion → final mask M

plus training loops, corpus evaluation and the ablation / comparison drivers.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from checkpoint import load_checkpoint, save_checkpoint
from corpus_io import jsonable, write_jsonl
from fusion_attention import (
    DEFAULT_DECODER_WIDTH, DEFAULT_WIDTHS, ModelShapeError, count_parameters, cross_attention_fuse,
    decode_masks, encode_image, init_cross_attention, init_decoder, init_image_encoder,
    query_projection, to_maskstack, pointwise_linear,
)
from inpaint_orchestrator import (
    InpaintConfig, InpainterInterface, MockTextureInpainter, iterative_inpaint, load_prompt_table,
    mask_ordering, masks_from_stack,
)
from losses_metrics import (
    DRIVABLE_SUBSET, TARGET_SUBSET, ClassWeights, IoUAccumulator, alpha_from_frequencies,
    dice_loss, focal_loss,
)
from mask_ops import (
    DEFAULT_LEGEND, NUM_CLASSES, BinaryMask, MaskStack, UnclassifiableMaskError, assign_class, noise_reduce,
    rasterize,
)
from numerics import (
    AdamW, ComputationTape, NonFiniteError, Tensor, add, concat, linear_decay, mul_row, no_grad,
    scale, shift, sigmoid, xavier_uniform, zeros,
)
from prompt_masker import MaskerResult, PromptMaskerInterface, RegionGrowMasker
from radar import (
    DEFAULT_Z_MIN, SampledPoints, classify_points, encode_points, init_point_classifier,
    init_point_encoder, project_array, sample_or_pad,
)
from synth_scenes import Scene

logger = logging.getLogger(__name__)

FUSION_VARIANTS = ("addition", "gated", "concatenation")
STAGE3_VARIANTS = FUSION_VARIANTS + ("inpaint_only",)
ABLATIONS = ("sampling_counts", "fusion_variants", "no_inpaint_fusion")
SAMPLING_COUNTS = (100, 200, 1000)


class PipelineError(Exception):
    """Base exception for pipeline orchestration"""
    pass


class TrainingDivergenceError(PipelineError):
    """Exception raised when a loss or gradient becomes non-finite"""

    def __init__(self, step: int, message: str):
        super().__init__(f"Training diverged at step {step}: {message}")
        self.step = step


# ---------------------------------------------------------------- configuration

@dataclass
class ModelConfig:
    widths: Tuple[int, ...] = DEFAULT_WIDTHS
    decoder_width: int = DEFAULT_DECODER_WIDTH
    classifier_hidden: int = 64
    target_count: int = 1000
    use_radar: bool = True
    z_min: float = DEFAULT_Z_MIN

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if len(self.widths) != 4 or min(self.widths) < 1:
            raise ModelShapeError(f"Four positive encoder widths required → {self.widths}")
        if self.target_count < 1:
            raise ModelShapeError(f"target_count must be ≥ 1 → {self.target_count}")


@dataclass
class TrainConfig:
    lr_initial: float = 5e-4
    lr_final: float = 1e-6
    batch_size: int = 4
    epochs: int = 10
    lambda_seg: float = 1.0
    lambda_cls: float = 1.0
    weight_decay: float = 0.01
    focal_gamma: float = 2.0
    rng_seed: int = 0

    def __post_init__(self):
        if not (self.lr_initial > 0 and self.lr_final > 0 and self.lr_initial >= self.lr_final):
            raise PipelineError(f"Learning rates must be positive with initial ≥ final → "
                                f"{self.lr_initial}, {self.lr_final}")
        if self.batch_size < 1 or self.epochs < 0:
            raise PipelineError("batch_size must be ≥ 1 and epochs ≥ 0")
        if min(self.lambda_seg, self.lambda_cls, self.weight_decay) < 0:
            raise PipelineError("Loss weights and weight decay must be non-negative")


@dataclass
class Stage2Settings:
    """Stage-2 / stage-3 input settings shared by inference and stage-3 training"""
    noise_threshold: float = 0.5
    mask_threshold: float = 0.5
    inpaint: InpaintConfig = field(default_factory=InpaintConfig)
    prompts: Dict[str, str] = field(default_factory=load_prompt_table)


# ---------------------------------------------------------------- stage 1

@dataclass
class Stage1Model:
    params: Dict[str, Tensor]
    config: ModelConfig
    legend: Tuple[str, ...] = DEFAULT_LEGEND

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int = 0,
                   legend: Sequence[str] = DEFAULT_LEGEND) -> "Stage1Model":
        """Xavier weights and zero biases drawn from a per-seed generator"""
        rng = np.random.default_rng([int(seed), 0])
        params = init_image_encoder(config.widths, rng, "img")
        params.update(init_cross_attention(config.widths, rng, "caf", query_only=not config.use_radar))
        if config.use_radar:
            params.update(init_point_encoder(config.widths, rng))
            params.update(init_point_classifier(config.widths[-1], config.classifier_hidden,
                                                len(legend), rng))
        params.update(init_decoder(config.widths, rng, config.decoder_width, len(legend), "dec"))
        return cls(params, config, tuple(legend))

    @property
    def parameter_count(self) -> int:
        return count_parameters(self.params)

    def metadata(self) -> Dict:
        return {"kind": "stage1", "model": {**asdict(self.config), "widths": list(self.config.widths)},
                "legend": list(self.legend), "parameter_count": self.parameter_count}

    def save(self, path: Path) -> Path:
        return save_checkpoint(self.params, path, self.metadata())

    @classmethod
    def load(cls, path: Path) -> "Stage1Model":
        params, meta = load_checkpoint(path)
        if meta.get("kind") != "stage1":
            raise PipelineError(f"Checkpoint is not a stage-1 model → {path}")
        return cls(params, ModelConfig(**meta["model"]), tuple(meta["legend"]))


@dataclass
class Stage1Output:
    probs: Tensor
    point_probs: Optional[Tensor]
    sampled: Optional[SampledPoints]

    @property
    def m_init(self) -> MaskStack:
        return to_maskstack(self.probs)


def sample_scene_points(scene: Scene, config: ModelConfig) -> SampledPoints:
    return sample_or_pad(scene.radar, config.target_count, rng_seed=scene.seed)


def stage1_forward(scene: Scene, model: Stage1Model) -> Stage1Output:
    """
    Encode the image, fuse every pyramid level with the radar features, decode M_init
    and classify the sampled radar points

    The camera-only model (use_radar false) and frames without valid points both
    use F = Q_img at every level.
    """
    params, cfg = model.params, model.config
    height, width = scene.image.shape[:2]
    pyramid = encode_image(scene.image, params, "img")

    if not cfg.use_radar:
        fused = [query_projection(level_map, params, level) for level, level_map in enumerate(pyramid, start=1)]
        return Stage1Output(decode_masks(fused, params, height, width), None, None)

    sampled = sample_scene_points(scene, cfg)
    point_features = encode_points(sampled, params)
    fused = [cross_attention_fuse(level_map, point_features[level - 1], params, level, valid=sampled.valid)
             for level, level_map in enumerate(pyramid, start=1)]
    probs = decode_masks(fused, params, height, width)
    point_probs = classify_points(point_features[-1], params, valid=sampled.valid)
    return Stage1Output(probs, point_probs, sampled)


def point_class_weights(scenes: Sequence[Scene], gamma: float = 2.0,
                        num_classes: int = NUM_CLASSES) -> ClassWeights:
    counts = np.zeros(num_classes)
    for scene in scenes:
        if scene.radar.labels:
            counts += np.bincount(np.asarray(scene.radar.labels), minlength=num_classes)[:num_classes]
    if counts.sum() == 0:
        return ClassWeights.uniform(num_classes, gamma)
    return ClassWeights(alpha_from_frequencies(counts), gamma)


def stage1_losses(scene: Scene, model: Stage1Model, weights: ClassWeights) -> Tuple[Tensor, Optional[Tensor]]:
    """(L_seg, L_cls) for one scene; L_cls is None for the camera-only model"""
    out = stage1_forward(scene, model)
    seg = dice_loss(out.probs, scene.gt)
    if out.point_probs is None:
        return seg, None
    targets = out.sampled.labels_from(scene.radar)
    return seg, focal_loss(out.point_probs, targets, weights, out.sampled.valid)


@dataclass
class TrainingLog:
    records: List[Dict] = field(default_factory=list)

    def add(self, **record) -> None:
        self.records.append(record)

    def epoch_records(self) -> List[Dict]:
        return [r for r in self.records if r.get("kind") == "epoch"]

    def write_jsonl(self, path: Path) -> Path:
        return write_jsonl(self.records, path)


def _batches(count: int, batch_size: int, seed: int, epoch: int) -> List[np.ndarray]:
    order = np.random.default_rng([int(seed), 1, int(epoch)]).permutation(count)
    return [order[i:i + batch_size] for i in range(0, count, batch_size)]


def _optimize(params: Dict[str, Tensor], scenes: Sequence, cfg: TrainConfig,
              scene_loss: Callable[[object], Tuple[Tensor, Dict[str, float]]],
              log: TrainingLog, validate: Optional[Callable[[], float]] = None,
              stage: str = "stage1") -> None:
    """Shared mini-batch AdamW loop; per-scene gradients are averaged over each batch"""
    optimizer = AdamW(params, lr=cfg.lr_initial, weight_decay=cfg.weight_decay)
    steps_per_epoch = math.ceil(len(scenes) / cfg.batch_size)
    total_steps = steps_per_epoch * cfg.epochs
    step = 0

    for epoch in range(cfg.epochs):
        epoch_terms: Dict[str, List[float]] = {}

        for batch in _batches(len(scenes), cfg.batch_size, cfg.rng_seed, epoch):
            lr = linear_decay(step, total_steps, cfg.lr_initial, cfg.lr_final)
            optimizer.zero_grad()
            batch_terms: Dict[str, List[float]] = {}

            # Accumulate averaged gradients over the batch
            try:
                for index in batch:
                    with ComputationTape() as tape:
                        loss, terms = scene_loss(scenes[index])
                        if loss.requires_grad:
                            tape.backward(scale(loss, 1.0 / len(batch)))
                    if not math.isfinite(loss.item()):
                        raise TrainingDivergenceError(step, "non-finite loss")
                    for name, value in terms.items():
                        batch_terms.setdefault(name, []).append(value)
            except NonFiniteError as e:
                raise TrainingDivergenceError(step, str(e)) from e

            optimizer.step(lr)

            # Record the step
            means = {name: float(np.mean(values)) for name, values in batch_terms.items()}
            log.add(kind="step", stage=stage, epoch=epoch, step=step, lr=lr, val_mIoU=None, **means)
            for name, value in means.items():
                epoch_terms.setdefault(name, []).append(value)
            step += 1

        # Validate and summarize the epoch
        val = validate() if validate is not None else float("nan")
        summary = {name: float(np.mean(values)) for name, values in epoch_terms.items()}
        last_lr = linear_decay(max(step - 1, 0), total_steps, cfg.lr_initial, cfg.lr_final)
        log.add(kind="epoch", stage=stage, epoch=epoch, step=step, lr=last_lr, val_mIoU=val, **summary)
        logger.info(f"{stage} epoch {epoch + 1}/{cfg.epochs}: " +
                    ", ".join(f"{k}={v:.4f}" for k, v in summary.items()) + f", val mIoU={val:.4f}")


def train_stage1(train_scenes: Sequence[Scene], train_cfg: TrainConfig,
                 model_cfg: Optional[ModelConfig] = None,
                 val_scenes: Optional[Sequence[Scene]] = None,
                 model: Optional[Stage1Model] = None) -> Tuple[Stage1Model, TrainingLog]:
    """
    Minimize λ_seg·L_seg + λ_cls·L_cls with AdamW and a linearly decaying learning rate

    L_seg is the dice loss of M_init against ground truth, L_cls the focal loss
    of the per-point classifier with class-frequency α. A zero loss weight drops
    that term from the graph entirely.

    Raises:
        PipelineError: If the training split is empty
        TrainingDivergenceError: If a loss or gradient becomes non-finite
    """
    if not train_scenes:
        raise PipelineError("Training split is empty")
    model = model or Stage1Model.initialize(model_cfg or ModelConfig(), seed=train_cfg.rng_seed)
    weights = point_class_weights(train_scenes, train_cfg.focal_gamma, len(model.legend))
    log = TrainingLog()


    def scene_loss(scene: Scene):
        seg, cls_loss = stage1_losses(scene, model, weights)
        terms = {"L_seg": seg.item()}
        total = None
        if train_cfg.lambda_seg > 0:
            total = scale(seg, train_cfg.lambda_seg)
        if cls_loss is not None:
            terms["L_cls"] = cls_loss.item()
            if train_cfg.lambda_cls > 0:
                weighted = scale(cls_loss, train_cfg.lambda_cls)
                total = weighted if total is None else add(total, weighted)
        return (total if total is not None else Tensor(0.0)), terms

    validate = None
    if val_scenes:
        validate = lambda: evaluate_scenes(val_scenes, Stage1Predictor(model)).total.mean()
    _optimize(model.params, train_scenes, train_cfg, scene_loss, log, validate, "stage1")
    return model, log


# ---------------------------------------------------------------- stage 2

@dataclass
class Stage2Result:
    m_init: MaskStack
    m_sam: MaskStack
    m_nr: MaskStack
    skipped: List = field(default_factory=list)
    prompt_count: int = 0


def stage2_run(scene: Scene, model: Stage1Model, masker: PromptMaskerInterface,
               noise_threshold: float = 0.5, stage1_output: Optional[Stage1Output] = None) -> Stage2Result:
    """
    Radar-prompted pseudo-masks, classified by the point head and denoised against M_init

    Every valid sampled point is projected and used as a prompt; identical masks
    from different prompts are merged before class assignment.
    """
    if stage1_output is None:
        with no_grad():
            stage1_output = stage1_forward(scene, model)
    m_init = stage1_output.m_init
    shape = (m_init.height, m_init.width)

    if stage1_output.sampled is None or not stage1_output.sampled.valid.any():
        empty = rasterize([], m_init.legend, shape)
        return Stage2Result(m_init, empty, noise_reduce(empty, m_init, noise_threshold))

    # Project the valid sampled points into prompts
    sampled = stage1_output.sampled
    rows = np.nonzero(sampled.valid)[0]
    u, v, in_view = project_array(sampled.matrix[rows, :3], scene.camera, model.config.z_min)
    u = np.where(in_view, u, np.nan)
    v = np.where(in_view, v, np.nan)
    probs = stage1_output.point_probs.data[rows]
    result: MaskerResult = masker.masks_for_prompts(scene.image, list(zip(u.tolist(), v.tolist())))

    # Merge identical masks from different prompts
    unique: Dict[bytes, List[int]] = {}
    for mask in result.masks:
        unique.setdefault(mask.data.tobytes(), []).extend(mask.provenance)

    prompt_rows = np.floor(np.nan_to_num(v, nan=-1.0)).astype(np.int64)
    prompt_cols = np.floor(np.nan_to_num(u, nan=-1.0)).astype(np.int64)
    on_image = (prompt_rows >= 0) & (prompt_rows < shape[0]) & (prompt_cols >= 0) & (prompt_cols < shape[1])

    # Label each mask from the prompts it contains
    classified = []
    for key, provenance in unique.items():
        data = np.frombuffer(key, dtype=np.uint8).reshape(shape)
        inside = np.zeros(len(rows), dtype=bool)
        inside[on_image] = data[prompt_rows[on_image], prompt_cols[on_image]] == 1
        candidates = [((u[j], v[j]), probs[j]) for j in np.nonzero(inside)[0]]
        try:
            classified.append(assign_class(BinaryMask(data.copy(), None, tuple(provenance)), candidates))
        except UnclassifiableMaskError as e:
            logger.warning(f"{scene.scene_id}: dropping mask → {e}")

    if not classified:
        logger.warning(f"{scene.scene_id}: no pseudo-masks from {len(rows)} prompts; M_nr falls back to M_init")

    m_sam = rasterize(classified, m_init.legend, shape)
    return Stage2Result(m_init, m_sam, noise_reduce(m_sam, m_init, noise_threshold),
                        result.skipped, len(rows))


# ---------------------------------------------------------------- stage 3

@dataclass
class Stage3Model:
    params: Dict[str, Tensor]
    variant: str
    config: ModelConfig
    legend: Tuple[str, ...] = DEFAULT_LEGEND

    def __post_init__(self):
        if self.variant not in STAGE3_VARIANTS:
            raise PipelineError(f"Unknown stage-3 variant '{self.variant}', expected one of {STAGE3_VARIANTS}")

    @classmethod
    def initialize(cls, config: ModelConfig, variant: str = "concatenation", seed: int = 0,
                   legend: Sequence[str] = DEFAULT_LEGEND) -> "Stage3Model":
        """Independent initialization of both encoders and the fusion layers"""
        if variant not in STAGE3_VARIANTS:
            raise PipelineError(f"Unknown stage-3 variant '{variant}', expected one of {STAGE3_VARIANTS}")
        rng = np.random.default_rng([int(seed), 3])
        params: Dict[str, Tensor] = {}
        if variant != "inpaint_only":
            params.update(init_image_encoder(config.widths, rng, "img"))
        params.update(init_image_encoder(config.widths, rng, "inp"))
        for level, width in enumerate(config.widths, start=1):
            if variant == "gated":
                params[f"gate.l{level}"] = zeros((width,), requires_grad=True, name=f"gate.l{level}")
            elif variant == "concatenation":
                params[f"fuse.l{level}.w"] = xavier_uniform(2 * width, width, rng, name=f"fuse.l{level}.w")
                params[f"fuse.l{level}.b"] = zeros((width,), requires_grad=True, name=f"fuse.l{level}.b")
        params.update(init_decoder(config.widths, rng, config.decoder_width, len(legend), "dec"))
        return cls(params, variant, config, tuple(legend))

    @property
    def parameter_count(self) -> int:
        return count_parameters(self.params)

    def metadata(self) -> Dict:
        return {"kind": "stage3", "variant": self.variant,
                "model": {**asdict(self.config), "widths": list(self.config.widths)},
                "legend": list(self.legend), "parameter_count": self.parameter_count}

    def save(self, path: Path) -> Path:
        return save_checkpoint(self.params, path, self.metadata())

    @classmethod
    def load(cls, path: Path) -> "Stage3Model":
        params, meta = load_checkpoint(path)
        if meta.get("kind") != "stage3":
            raise PipelineError(f"Checkpoint is not a stage-3 model → {path}")
        return cls(params, meta["variant"], ModelConfig(**meta["model"]), tuple(meta["legend"]))


def fuse_branches(f_a: Tensor, f_b: Tensor, params: Dict[str, Tensor], variant: str, level: int) -> Tensor:
    """Combine original-image and inpainted-image features of one level"""
    if variant == "addition":
        return add(f_a, f_b)
    if variant == "gated":
        gate = sigmoid(params[f"gate.l{level}"])
        return add(mul_row(f_a, gate), mul_row(f_b, shift(scale(gate, -1.0), 1.0)))
    if variant == "concatenation":
        return pointwise_linear(concat([f_a, f_b], axis=-1), params[f"fuse.l{level}.w"],
                                 params[f"fuse.l{level}.b"])
    raise PipelineError(f"Variant '{variant}' has no branch fusion")


def stage3_predict(image: np.ndarray, inpainted: np.ndarray, model: Stage3Model) -> Tensor:
    """Final per-pixel class probabilities from the original and inpainted images"""
    height, width = image.shape[:2]
    inpainted_pyramid = encode_image(inpainted, model.params, "inp")
    if model.variant == "inpaint_only":
        return decode_masks(inpainted_pyramid, model.params, height, width)
    image_pyramid = encode_image(image, model.params, "img")
    fused = [fuse_branches(a, b, model.params, model.variant, level)
             for level, (a, b) in enumerate(zip(image_pyramid, inpainted_pyramid), start=1)]
    return decode_masks(fused, model.params, height, width)


def inpaint_scene(scene: Scene, m_nr: MaskStack, inpainter: InpainterInterface,
                  settings: Stage2Settings) -> np.ndarray:
    """I_inp: one request per non-empty object channel of M_nr, largest region first"""
    masks = mask_ordering(masks_from_stack(m_nr, settings.mask_threshold))
    return iterative_inpaint(scene.image, masks, settings.prompts, inpainter, settings.inpaint, m_nr.legend)


def stage3_forward(scene: Scene, m_nr: MaskStack, inpainter: InpainterInterface,
                   settings: Stage2Settings, model: Stage3Model) -> Tuple[Tensor, np.ndarray]:
    """(final probabilities, inpainted image)"""
    inpainted = inpaint_scene(scene, m_nr, inpainter, settings)
    return stage3_predict(scene.image, inpainted, model), inpainted


@dataclass
class Stage3Sample:
    scene: Scene
    inpainted: np.ndarray


def precompute_stage3_inputs(scenes: Sequence[Scene], stage1: Stage1Model, masker: PromptMaskerInterface,
                             inpainter: InpainterInterface, settings: Stage2Settings) -> List[Stage3Sample]:
    """Run the frozen stage-1 model, stage 2 and inpainting once per scene"""
    samples = []
    for scene in scenes:
        m_nr = stage2_run(scene, stage1, masker, settings.noise_threshold).m_nr
        samples.append(Stage3Sample(scene, inpaint_scene(scene, m_nr, inpainter, settings)))
    return samples


def train_stage3(samples: Sequence[Stage3Sample], train_cfg: TrainConfig, variant: str = "concatenation",
                 model_cfg: Optional[ModelConfig] = None,
                 val_samples: Optional[Sequence[Stage3Sample]] = None) -> Tuple[Stage3Model, TrainingLog]:
    """Dice-loss training of a stage-3 model on precomputed (image, inpainted) pairs"""
    if not samples:
        raise PipelineError("Training split is empty")
    model = Stage3Model.initialize(model_cfg or ModelConfig(), variant, seed=train_cfg.rng_seed)
    log = TrainingLog()


    def scene_loss(sample: Stage3Sample):
        seg = dice_loss(stage3_predict(sample.scene.image, sample.inpainted, model), sample.scene.gt)
        return scale(seg, train_cfg.lambda_seg), {"L_seg": seg.item()}

    validate = None
    if val_samples:
        validate = lambda: evaluate_samples(val_samples, model).total.mean()
    _optimize(model.params, samples, train_cfg, scene_loss, log, validate, "stage3")
    return model, log


# ---------------------------------------------------------------- evaluation

@dataclass
class EvaluationResult:
    """Dataset-level accumulators over all scenes and over the adverse subset"""
    total: IoUAccumulator = field(default_factory=IoUAccumulator)
    adverse: IoUAccumulator = field(default_factory=IoUAccumulator)
    scene_count: int = 0
    adverse_count: int = 0

    def merge(self, other: "EvaluationResult") -> "EvaluationResult":
        return EvaluationResult(self.total.merge(other.total), self.adverse.merge(other.adverse),
                                self.scene_count + other.scene_count, self.adverse_count + other.adverse_count)

    def summary(self, subset: str = "total") -> Dict[str, float]:
        acc = self.total if subset == "total" else self.adverse
        return {"mIoU": acc.mean(), "mIoU_t": acc.mean(TARGET_SUBSET), "mIoU_d": acc.mean(DRIVABLE_SUBSET)}


class Stage1Predictor:
    def __init__(self, model: Stage1Model):
        self.model = model

    def __call__(self, scene: Scene) -> MaskStack:
        with no_grad():
            return stage1_forward(scene, self.model).m_init


class FullPipelinePredictor:
    """Stage 1 → stage 2 → inpainting → stage 3 for one scene"""

    def __init__(self, stage1: Stage1Model, stage3: Stage3Model, masker: PromptMaskerInterface,
                 inpainter: InpainterInterface, settings: Stage2Settings):
        self.stage1, self.stage3 = stage1, stage3
        self.masker, self.inpainter, self.settings = masker, inpainter, settings

    def run(self, scene: Scene) -> Tuple[MaskStack, Stage2Result, np.ndarray]:
        with no_grad():
            stage2 = stage2_run(scene, self.stage1, self.masker, self.settings.noise_threshold)
            probs, inpainted = stage3_forward(scene, stage2.m_nr, self.inpainter, self.settings, self.stage3)
        return to_maskstack(probs, self.stage3.legend), stage2, inpainted

    def __call__(self, scene: Scene) -> MaskStack:
        return self.run(scene)[0]


def _score(scene: Scene, prediction: MaskStack) -> EvaluationResult:
    acc = IoUAccumulator(scene.gt.num_classes).update_stacks(prediction, scene.gt)
    result = EvaluationResult(total=acc, adverse=IoUAccumulator(scene.gt.num_classes), scene_count=1)
    if scene.is_adverse:
        result.adverse = IoUAccumulator(acc.num_classes, acc.intersection.copy(), acc.union.copy())
        result.adverse_count = 1
    return result


def evaluate_scenes(scenes: Sequence[Scene], predictor: Callable[[Scene], MaskStack],
                    workers: int = 1) -> EvaluationResult:
    """Scene-parallel evaluation; per-scene accumulators are merged in scene order"""

    def score(scene: Scene) -> EvaluationResult:
        return _score(scene, predictor(scene))

    if workers > 1 and len(scenes) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(score, scenes))
    else:
        parts = [score(scene) for scene in scenes]

    # Merge in scene order
    result = EvaluationResult()
    for part in parts:
        result = result.merge(part)
    return result


def evaluate_samples(samples: Sequence[Stage3Sample], model: Stage3Model, workers: int = 1) -> EvaluationResult:
    lookup = {id(s.scene): s.inpainted for s in samples}

    def predict(scene: Scene) -> MaskStack:
        with no_grad():
            return to_maskstack(stage3_predict(scene.image, lookup[id(scene)], model), model.legend)

    return evaluate_scenes([s.scene for s in samples], predict, workers)


# ---------------------------------------------------------------- experiments

@dataclass
class ArmResult:
    arm: str
    seed: int
    mIoU: float
    mIoU_t: float
    mIoU_d: float
    parameter_count: int
    adverse_mIoU: float = float("nan")

    def record(self) -> Dict:
        return jsonable(asdict(self))


@dataclass
class ExperimentReport:
    kind: str
    arms: List[ArmResult] = field(default_factory=list)
    baseline: Optional[str] = None

    def arm_names(self) -> List[str]:
        names: List[str] = []
        for result in self.arms:
            if result.arm not in names:
                names.append(result.arm)
        return names

    def summary(self) -> List[Dict]:
        """Mean ± sample sd of val mIoU per arm, with the margin over the baseline arm"""
        rows = []
        means = {}
        for name in self.arm_names():
            values = np.array([r.mIoU for r in self.arms if r.arm == name], dtype=np.float64)
            sd = float(values.std(ddof=1)) if values.size > 1 else 0.0
            means[name] = float(values.mean())
            params = [r.parameter_count for r in self.arms if r.arm == name][0]
            rows.append({"arm": name, "mean": means[name], "sd": sd, "runs": int(values.size),
                         "parameter_count": params})
        for row in rows:
            row["margin"] = row["mean"] - means[self.baseline] if self.baseline in means else float("nan")
        return rows


@dataclass
class ExperimentInputs:
    """Scenes and settings shared by every arm of an experiment"""
    train: List[Scene]
    val: List[Scene]
    model: ModelConfig
    train_cfg: TrainConfig
    stage3_train_cfg: TrainConfig
    settings: Stage2Settings
    masker: PromptMaskerInterface = field(default_factory=RegionGrowMasker)
    inpainter: InpainterInterface = field(default_factory=MockTextureInpainter)
    workers: int = 1


def _arm(name: str, seed: int, result: EvaluationResult, params: int) -> ArmResult:
    summary = result.summary("total")
    return ArmResult(name, seed, summary["mIoU"], summary["mIoU_t"], summary["mIoU_d"], params,
                     result.adverse.mean())


def _seeded(cfg: TrainConfig, seed: int) -> TrainConfig:
    return replace(cfg, rng_seed=int(seed))


def _fusion_stage1(inputs: ExperimentInputs, seed: int) -> Stage1Model:
    model, _ = train_stage1(inputs.train, _seeded(inputs.train_cfg, seed), inputs.model)
    return model


def _stage3_arms(inputs: ExperimentInputs, stage1: Stage1Model, seed: int,
                 variants: Sequence[Tuple[str, str]]) -> List[ArmResult]:
    train_samples = precompute_stage3_inputs(inputs.train, stage1, inputs.masker, inputs.inpainter, inputs.settings)
    val_samples = precompute_stage3_inputs(inputs.val, stage1, inputs.masker, inputs.inpainter, inputs.settings)

    arms = []
    for arm_name, variant in variants:
        stage3, _ = train_stage3(train_samples, _seeded(inputs.stage3_train_cfg, seed), variant, inputs.model)
        result = evaluate_samples(val_samples, stage3, inputs.workers)
        arms.append(_arm(arm_name, seed, result, stage1.parameter_count + stage3.parameter_count))
    return arms


def run_ablation(inputs: ExperimentInputs, ablation: str, seeds: Sequence[int]) -> ExperimentReport:
    """
    Train and evaluate every arm of one ablation, identically except for the ablated factor

    sampling_counts      stage-1 models with 100, 200 and 1000 sampled radar points
    fusion_variants      stage-3 addition, gated and concatenation fusion on one stage-1 model
    no_inpaint_fusion    concatenation fusion against a single encoder fed only I_inp
    """
    if ablation not in ABLATIONS:
        raise PipelineError(f"Unknown ablation '{ablation}', expected one of {ABLATIONS}")
    if not inputs.val:
        raise PipelineError("Ablations need a non-empty validation split")

    report = ExperimentReport(ablation)
    for seed in seeds:
        logger.info(f"Ablation {ablation}, seed {seed}")

        if ablation == "sampling_counts":
            report.baseline = f"points_{SAMPLING_COUNTS[0]}"
            for count in SAMPLING_COUNTS:
                model_cfg = replace(inputs.model, target_count=count, use_radar=True)
                model, _ = train_stage1(inputs.train, _seeded(inputs.train_cfg, seed), model_cfg)
                result = evaluate_scenes(inputs.val, Stage1Predictor(model), inputs.workers)
                report.arms.append(_arm(f"points_{count}", seed, result, model.parameter_count))

        elif ablation == "fusion_variants":
            report.baseline = "addition"
            stage1 = _fusion_stage1(inputs, seed)
            report.arms.extend(_stage3_arms(inputs, stage1, seed, [(v, v) for v in FUSION_VARIANTS]))

        else:
            report.baseline = "inpaint_only"
            stage1 = _fusion_stage1(inputs, seed)
            report.arms.extend(_stage3_arms(inputs, stage1, seed,
                                            [("inpaint_only", "inpaint_only"), ("fusion", "concatenation")]))
    return report


def run_comparison(inputs: ExperimentInputs, seeds: Sequence[int],
                   variant: str = "concatenation") -> ExperimentReport:
    """Camera-only, camera-radar fusion and fusion + inpainting, trained on the same scenes per seed"""
    if not inputs.val:
        raise PipelineError("The comparison needs a non-empty validation split")

    report = ExperimentReport("comparison", baseline="camera_only")
    for seed in seeds:
        logger.info(f"Comparison run, seed {seed}")

        # Camera-only stage 1
        camera_only, _ = train_stage1(inputs.train, _seeded(inputs.train_cfg, seed),
                                      replace(inputs.model, use_radar=False))
        result = evaluate_scenes(inputs.val, Stage1Predictor(camera_only), inputs.workers)
        report.arms.append(_arm("camera_only", seed, result, camera_only.parameter_count))

        # Camera-radar stage 1, then stage 3 on top of it
        fusion = _fusion_stage1(inputs, seed)
        result = evaluate_scenes(inputs.val, Stage1Predictor(fusion), inputs.workers)
        report.arms.append(_arm("fusion", seed, result, fusion.parameter_count))

        report.arms.extend(_stage3_arms(inputs, fusion, seed, [("fusion_inpainting", variant)]))
    return report
