#!/usr/bin/env python3
"""
Harborsight - Main Orchestration Script
Camera-radar fusion segmentation with radar-prompted inpainting

Commands:
    gen     render a seeded synthetic corpus
    train   train stage 1 and stage 3 (or run the camera-only / fusion / inpainting comparison)
    infer   run the three-stage pipeline and persist masks and inpainted images
    eval    score predictions against ground truth (per-class IoU, mIoU, mIoU_t, mIoU_d)
    ablate  train and evaluate the arms of one ablation

Exit codes: 0 success, 2 configuration error, 3 IO or missing input, 4 numerical divergence, 1 other.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Callable, List, Optional, Sequence

from rich.console import Console
from rich.logging import RichHandler
from rich.markup import escape

# Add src directory to path for imports
sys.path.append(str(Path(__file__).parent / "src"))

from checkpoint import CheckpointError
from corpus_io import (
    Corpus, CorpusError, CorpusLocationError, prepare_output_dir, save_png, write_corpus, write_jsonl,
)
from fusion_attention import ModelShapeError
from inpaint_orchestrator import InpaintError
from line_protocol import AdapterConnectionError, AdapterProtocolError
from mask_ops import MaskError, MaskStack, export_indexed_png, load_maskstack, save_maskstack
from pipeline import (
    ExperimentInputs, FullPipelinePredictor, PipelineError, Stage1Model, Stage3Model,
    TrainingDivergenceError, evaluate_scenes, precompute_stage3_inputs, run_ablation,
    run_comparison, train_stage1, train_stage3,
)
from radar import RadarError
from report_generator import ReportGenerator
from run_config import ConfigError, ConfigValidationError, RunConfig, load_run_config
from synth_scenes import SceneConfigError, plan_corpus

console = Console()
logger = logging.getLogger("harborsight")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DIVERGENCE = 4

STAGE1_CHECKPOINT = "stage1.ckpt"
STAGE3_CHECKPOINT = "stage3.ckpt"
PREDICTION_NAME = "prediction.maskstack"


def rprint(text: str = "") -> None:
    console.print(text, highlight=False)


def setup_logging(level: str) -> None:
    logging.basicConfig(level=getattr(logging, level, logging.INFO), format="%(message)s", datefmt="[%X]",
                        handlers=[RichHandler(console=Console(stderr=True), show_path=False)], force=True)


def exit_code_for(error: BaseException) -> int:
    """Map an exception to the documented process exit code"""
    if isinstance(error, TrainingDivergenceError):
        return EXIT_DIVERGENCE
    if isinstance(error, ConfigError):
        return EXIT_CONFIG
    if isinstance(error, (CorpusError, CheckpointError, MaskError, RadarError, OSError,
                          AdapterConnectionError, AdapterProtocolError)):
        return EXIT_IO
    return EXIT_FAILURE


def _typed(build: Callable):
    """Run a settings builder, reporting invalid values as configuration errors"""
    try:
        return build()
    except (SceneConfigError, PipelineError, ModelShapeError, InpaintError) as e:
        raise ConfigValidationError(str(e)) from e


def _split(config: RunConfig) -> Optional[str]:
    split = config.get("eval", "split")
    return None if split == "all" else split


def _load_scenes(corpus: Corpus, split: Optional[str], adverse_only: bool = False) -> List:
    entries = corpus.entries(split, adverse_only)
    rprint(f"📂 {len(entries)} scenes from {corpus.root} (split: {split or 'all'}"
           f"{', adverse only' if adverse_only else ''})")
    return [corpus.load(entry) for entry in entries]


def _require_file(path: Path) -> Path:
    if not Path(path).is_file():
        raise CorpusLocationError(f"Required input not found → {path}")
    return Path(path)


def _experiment_inputs(config: RunConfig, corpus: Corpus) -> ExperimentInputs:
    train = _load_scenes(corpus, "train")
    val = _load_scenes(corpus, "val")
    return ExperimentInputs(
        train=train, val=val,
        model=_typed(config.model_config),
        train_cfg=_typed(config.train_config),
        stage3_train_cfg=_typed(config.stage3_train_config),
        settings=_typed(config.stage2_settings),
        masker=config.masker(), inpainter=config.inpainter(),
        workers=config.get("run", "workers"))


# ---------------------------------------------------------------- commands

def cmd_gen(args: argparse.Namespace, config: RunConfig) -> int:
    rprint("\n[yellow]📋 Step 1: Planning corpus...[/yellow]")
    scene_cfg = _typed(config.scene_config)
    radar_cfg = _typed(config.radar_noise_config)
    corpus_cfg = _typed(config.corpus_config)
    plans = plan_corpus(corpus_cfg)
    adverse = sum(1 for p in plans if p.corruption.mode != "none")
    rprint(f"✅ Planned {len(plans)} scenes ({adverse} adverse), seed {corpus_cfg.seed}")

    rprint("\n[yellow]🌊 Step 2: Rendering scenes and radar frames...[/yellow]")
    header = {"seed": str(corpus_cfg.seed), "adverse_only": str(corpus_cfg.adverse_only).lower()}
    manifest = write_corpus(args.corpus, plans, scene_cfg, radar_cfg, header, force=args.force)
    config.write_resolved(args.corpus)
    splits = {s: len(manifest.select(s)) for s in ("train", "val", "test")}
    rprint(f"✅ Corpus written → {args.corpus} "
           f"(train {splits['train']}, val {splits['val']}, test {splits['test']})")
    return EXIT_OK


def cmd_train(args: argparse.Namespace, config: RunConfig) -> int:
    corpus = Corpus(args.corpus)
    out_dir = prepare_output_dir(args.out, force=args.force)
    config.write_resolved(out_dir)

    if args.experiment == "comparison":
        rprint("\n[yellow]📊 Comparison: camera-only vs fusion vs fusion + inpainting[/yellow]")
        inputs = _experiment_inputs(config, corpus)
        report = run_comparison(inputs, config.get("ablation", "seeds"),
                                config.get("stage3", "variant"))
        return _finish_experiment(report, out_dir)

    rprint("\n[yellow]🧠 Step 1: Training stage 1 (cross-attention fusion)...[/yellow]")
    model_cfg = _typed(config.model_config)
    train_cfg = _typed(config.train_config)
    train = _load_scenes(corpus, "train")
    val = _load_scenes(corpus, "val")
    stage1, log1 = train_stage1(train, train_cfg, model_cfg, val)
    stage1.save(out_dir / STAGE1_CHECKPOINT)
    rprint(f"✅ Stage 1 saved → {out_dir / STAGE1_CHECKPOINT} ({stage1.parameter_count:,} parameters)")

    rprint("\n[yellow]🎭 Step 2: Precomputing pseudo-masks and inpainted images...[/yellow]")
    settings = _typed(config.stage2_settings)
    masker, inpainter = config.masker(), config.inpainter()
    train_samples = precompute_stage3_inputs(train, stage1, masker, inpainter, settings)
    val_samples = precompute_stage3_inputs(val, stage1, masker, inpainter, settings)
    rprint(f"✅ Prepared {len(train_samples)} training and {len(val_samples)} validation samples")

    variant = config.get("stage3", "variant")
    rprint(f"\n[yellow]🔀 Step 3: Training stage 3 ({variant} fusion)...[/yellow]")
    stage3, log3 = train_stage3(train_samples, _typed(config.stage3_train_config), variant, model_cfg,
                                val_samples)
    stage3.save(out_dir / STAGE3_CHECKPOINT)
    rprint(f"✅ Stage 3 saved → {out_dir / STAGE3_CHECKPOINT} ({stage3.parameter_count:,} parameters)")

    log1.records.extend(log3.records)
    log1.write_jsonl(out_dir / "train_log.jsonl")
    rprint(f"\n📁 Training log: {out_dir / 'train_log.jsonl'}")
    return EXIT_OK


def _load_predictor(checkpoints: Path, config: RunConfig) -> FullPipelinePredictor:
    stage1 = Stage1Model.load(_require_file(Path(checkpoints) / STAGE1_CHECKPOINT))
    stage3 = Stage3Model.load(_require_file(Path(checkpoints) / STAGE3_CHECKPOINT))
    rprint(f"✅ Loaded stage 1 ({stage1.parameter_count:,}) and stage 3 "
           f"({stage3.variant}, {stage3.parameter_count:,}) parameters")
    return FullPipelinePredictor(stage1, stage3, config.masker(), config.inpainter(),
                                 _typed(config.stage2_settings))


def cmd_infer(args: argparse.Namespace, config: RunConfig) -> int:
    corpus = Corpus(args.corpus)
    rprint("\n[yellow]📦 Step 1: Loading checkpoints...[/yellow]")
    predictor = _load_predictor(args.checkpoints, config)
    out_dir = prepare_output_dir(args.out, force=args.force)
    config.write_resolved(out_dir)

    rprint("\n[yellow]🔍 Step 2: Running the three-stage pipeline...[/yellow]")
    scenes = _load_scenes(corpus, _split(config), args.adverse_only)
    records = []
    for scene in scenes:
        prediction, stage2, inpainted = predictor.run(scene)
        scene_dir = out_dir / scene.scene_id
        save_maskstack(prediction, scene_dir / PREDICTION_NAME)
        export_indexed_png(prediction, scene_dir / "prediction.png")
        save_maskstack(stage2.m_init, scene_dir / "m_init.maskstack")
        save_maskstack(stage2.m_nr, scene_dir / "m_nr.maskstack")
        save_png(inpainted, scene_dir / "inpainted.png")
        records.append({"scene_id": scene.scene_id, "prompts": stage2.prompt_count,
                        "skipped": len(stage2.skipped), "corruption": scene.corruption.mode})
        if stage2.skipped:
            rprint(f"   ⚠️ {scene.scene_id}: {len(stage2.skipped)} of {stage2.prompt_count} prompts skipped")
    write_jsonl(records, out_dir / "infer_records.jsonl")
    rprint(f"✅ Wrote predictions for {len(scenes)} scenes → {out_dir}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace, config: RunConfig) -> int:
    corpus = Corpus(args.corpus)
    subset = config.get("eval", "subset")
    adverse_only = args.adverse_only or config.get("eval", "adverse_only")
    scenes = _load_scenes(corpus, _split(config), adverse_only)
    parameter_count = None

    if args.predictions is not None:
        root = Path(args.predictions)

        def predictor(scene) -> MaskStack:
            return load_maskstack(_require_file(root / scene.scene_id / args.mask_name))
        rprint(f"\n[yellow]📏 Scoring stored masks from {root}...[/yellow]")
    else:
        rprint("\n[yellow]📏 Scoring the three-stage pipeline...[/yellow]")
        predictor = _load_predictor(args.checkpoints, config)
        parameter_count = predictor.stage1.parameter_count + predictor.stage3.parameter_count

    result = evaluate_scenes(scenes, predictor, config.get("run", "workers"))
    out_dir = prepare_output_dir(args.out, force=args.force)
    config.write_resolved(out_dir)
    generator = ReportGenerator(out_dir)
    paths = generator.export_evaluation(result, subset, title=f"Evaluation of {corpus.root}",
                                        parameter_count=parameter_count)
    console.print(generator.evaluation_table(result, subset))
    headline = generator.evaluation_summary(result, subset)["total"]["headline"]
    rprint(f"\n🎯 mIoU ({subset}): {headline:.4f} over {result.scene_count} scenes "
           f"({result.adverse_count} adverse)")
    rprint(f"📁 Report: {paths['text']}")
    return EXIT_OK


def _finish_experiment(report, out_dir: Path) -> int:
    generator = ReportGenerator(out_dir)
    paths = generator.export_experiment(report)
    console.print(generator.experiment_table(report))
    rprint(f"📁 Report: {paths['text']}")
    rprint(f"📁 Records: {paths['records']}")
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace, config: RunConfig) -> int:
    corpus = Corpus(args.corpus)
    out_dir = prepare_output_dir(args.out, force=args.force)
    config.write_resolved(out_dir)
    kind = config.get("ablation", "kind")
    seeds = config.get("ablation", "seeds")
    rprint(f"\n[yellow]🧪 Ablation {kind} over seeds {seeds}...[/yellow]")
    report = run_ablation(_experiment_inputs(config, corpus), kind, seeds)
    return _finish_experiment(report, out_dir)


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval, "ablate": cmd_ablate}


# ---------------------------------------------------------------- argument parsing

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Harborsight: camera-radar fusion segmentation with radar-prompted inpainting",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  python main.py gen corpus/ --set corpus.count=40 --set corpus.seed=7
  python main.py train --corpus corpus/ --out runs/a
  python main.py infer --corpus corpus/ --checkpoints runs/a --out runs/a/pred
  python main.py eval --corpus corpus/ --predictions runs/a/pred --subset targets --out runs/a/eval
  python main.py ablate --corpus corpus/ --kind sampling_counts --out runs/ablation
        """)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML run configuration")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="Override one configuration key (repeatable)")
    common.add_argument("--force", action="store_true", help="Replace a non-empty output directory")
    common.add_argument("--workers", type=int, help="Scene-parallel evaluation workers")

    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", parents=[common], help="Render a synthetic corpus")
    gen.add_argument("corpus", type=Path, help="Output corpus directory")
    gen.add_argument("--count", type=int, help="Number of scenes (corpus.count)")
    gen.add_argument("--seed", type=int, help="Corpus seed (corpus.seed)")
    gen.add_argument("--adverse-only", action="store_true", help="Corrupt every scene")

    train = sub.add_parser("train", parents=[common], help="Train stage 1 and stage 3")
    train.add_argument("--corpus", type=Path, required=True)
    train.add_argument("--out", type=Path, required=True, help="Checkpoint and log directory")
    train.add_argument("--experiment", choices=["comparison"],
                       help="Run the camera-only / fusion / fusion + inpainting comparison instead")

    infer = sub.add_parser("infer", parents=[common], help="Predict masks for a corpus split")
    infer.add_argument("--corpus", type=Path, required=True)
    infer.add_argument("--checkpoints", type=Path, required=True)
    infer.add_argument("--out", type=Path, required=True)
    infer.add_argument("--split", choices=["train", "val", "test", "all"])
    infer.add_argument("--adverse-only", action="store_true")

    evaluate = sub.add_parser("eval", parents=[common], help="Score predictions against ground truth")
    evaluate.add_argument("--corpus", type=Path, required=True)
    source = evaluate.add_mutually_exclusive_group(required=True)
    source.add_argument("--predictions", type=Path, help="Directory of <scene_id>/<mask-name> files")
    source.add_argument("--checkpoints", type=Path, help="Run the pipeline from these checkpoints")
    evaluate.add_argument("--mask-name", default=PREDICTION_NAME)
    evaluate.add_argument("--out", type=Path, required=True)
    evaluate.add_argument("--split", choices=["train", "val", "test", "all"])
    evaluate.add_argument("--subset", choices=["all", "targets", "drivable"])
    evaluate.add_argument("--adverse-only", action="store_true")

    ablate = sub.add_parser("ablate", parents=[common], help="Run one ablation")
    ablate.add_argument("--corpus", type=Path, required=True)
    ablate.add_argument("--out", type=Path, required=True)
    ablate.add_argument("--kind", choices=["sampling_counts", "fusion_variants", "no_inpaint_fusion"])
    ablate.add_argument("--seeds", type=int, nargs="+")
    return parser


def flag_overrides(args: argparse.Namespace) -> List[str]:
    """Translate command flags into section.key=value overrides (applied after --set)"""
    flags = {
        "workers": "run.workers", "count": "corpus.count", "seed": "corpus.seed",
        "split": "eval.split", "subset": "eval.subset", "kind": "ablation.kind",
    }
    overrides = [f"{key}={getattr(args, name)}" for name, key in flags.items()
                 if getattr(args, name, None) is not None]
    if args.command == "gen" and args.adverse_only:
        overrides.append("corpus.adverse_only=true")
    if getattr(args, "seeds", None):
        overrides.append(f"ablation.seeds=[{', '.join(str(s) for s in args.seeds)}]")
    return overrides


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_run_config(args.config, list(args.overrides) + flag_overrides(args))
        setup_logging(config.get("run", "log_level"))
        rprint(f"\n[bold blue]🌊 Harborsight {args.command}[/bold blue]")
        return COMMANDS[args.command](args, config)
    except Exception as e:
        code = exit_code_for(e)
        rprint(f"[red]❌ {type(e).__name__}: {escape(str(e))}[/red]")
        if code == EXIT_FAILURE:
            logger.exception("Unexpected failure")
        return code


if __name__ == "__main__":
    sys.exit(main())
