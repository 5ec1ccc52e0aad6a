#!/usr/bin/env python3
"""
Report Generator Module for Harborsight
Renders evaluation tables and experiment/ablation reports as text (Jinja2
templates under templates/), as line-delimited JSON records and as rich tables
for the console.

Reports carry no timestamps so that identical runs produce identical files.
"""

import logging
import math
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from jinja2 import Environment, FileSystemLoader, StrictUndefined, TemplateNotFound
from rich.table import Table

from corpus_io import write_jsonl
from losses_metrics import DRIVABLE_SUBSET, SUBSETS, TARGET_SUBSET, IoUAccumulator
from mask_ops import DEFAULT_LEGEND
from pipeline import EvaluationResult, ExperimentReport

logger = logging.getLogger(__name__)

TEMPLATE_DIR = Path(__file__).parent.parent / "templates"
EVAL_TEMPLATE = "eval_report.txt.j2"
EXPERIMENT_TEMPLATE = "experiment_report.txt.j2"


class ReportGeneratorError(Exception):
    """Custom exception for report generation errors"""
    pass


def format_score(value: Optional[float], digits: int = 4) -> str:
    """Fixed-point score, 'n/a' for NaN or None"""
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return "n/a"
    return f"{value:.{digits}f}"


class ReportGenerator:
    """
    Text, JSONL and console renderings of evaluation and experiment results
    """

    def __init__(self, output_dir: Path = Path("output"), template_dir: Path = TEMPLATE_DIR,
                 legend: Sequence[str] = DEFAULT_LEGEND):
        self.output_dir = Path(output_dir)
        self.legend = tuple(legend)
        self.template_dir = Path(template_dir)
        self.env = Environment(loader=FileSystemLoader(str(self.template_dir)),
                               undefined=StrictUndefined, keep_trailing_newline=True,
                               trim_blocks=True, lstrip_blocks=True)
        self.env.filters["score"] = format_score

    def _render(self, template_name: str, **context) -> str:
        try:
            template = self.env.get_template(template_name)
        except TemplateNotFound:
            raise ReportGeneratorError(f"Report template not found → {self.template_dir / template_name}")
        return template.render(**context)

    # ---------------------------------------------------------------- evaluation

    def class_rows(self, accumulator: IoUAccumulator) -> List[Dict[str, Any]]:
        ious = accumulator.iou()
        rows = []
        for index, name in enumerate(self.legend):
            group = "target" if index in TARGET_SUBSET else "drivable" if index in DRIVABLE_SUBSET else "other"
            rows.append({"index": index, "name": name, "group": group, "iou": float(ious[index]),
                         "intersection": int(accumulator.intersection[index]),
                         "union": int(accumulator.union[index])})
        return rows

    def evaluation_summary(self, result: EvaluationResult, subset: str = "all") -> Dict[str, Any]:
        """
        Scores of the total split and of the adverse subset

        Args:
            result: Accumulated evaluation
            subset: 'all', 'targets' or 'drivable'; selects the headline mean
        """
        if subset not in SUBSETS:
            raise ReportGeneratorError(f"Unknown class subset '{subset}', expected one of {tuple(SUBSETS)}")
        sections = {}
        for name, accumulator, count in (("total", result.total, result.scene_count),
                                         ("adverse", result.adverse, result.adverse_count)):
            sections[name] = {
                "scene_count": count,
                "headline": accumulator.mean(SUBSETS[subset]),
                "mIoU": accumulator.mean(),
                "mIoU_t": accumulator.mean(TARGET_SUBSET),
                "mIoU_d": accumulator.mean(DRIVABLE_SUBSET),
                "classes": self.class_rows(accumulator),
            }
        return {"subset": subset, **sections}

    def evaluation_text(self, result: EvaluationResult, subset: str = "all",
                        title: str = "Evaluation", parameter_count: Optional[int] = None) -> str:
        summary = self.evaluation_summary(result, subset)
        return self._render(EVAL_TEMPLATE, title=title, summary=summary, parameter_count=parameter_count)

    def evaluation_records(self, result: EvaluationResult, subset: str = "all") -> List[Dict[str, Any]]:
        """One record per (split part, class) plus one summary record per split part"""
        summary = self.evaluation_summary(result, subset)
        records = []
        for part in ("total", "adverse"):
            section = summary[part]
            records.append({"kind": "summary", "part": part, "subset": subset,
                            "scene_count": section["scene_count"], "headline": section["headline"],
                            "mIoU": section["mIoU"], "mIoU_t": section["mIoU_t"], "mIoU_d": section["mIoU_d"]})
            for row in section["classes"]:
                records.append({"kind": "class", "part": part, **row})
        return records

    def evaluation_table(self, result: EvaluationResult, subset: str = "all") -> Table:
        summary = self.evaluation_summary(result, subset)
        table = Table(title=f"Per-class IoU (subset: {subset})")
        table.add_column("Class")
        table.add_column("Group")
        table.add_column("IoU (total)", justify="right")
        table.add_column("IoU (adverse)", justify="right")
        for total, adverse in zip(summary["total"]["classes"], summary["adverse"]["classes"]):
            table.add_row(total["name"], total["group"], format_score(total["iou"]), format_score(adverse["iou"]))
        for key in ("mIoU", "mIoU_t", "mIoU_d"):
            table.add_row(f"[bold]{key}[/bold]", "", format_score(summary["total"][key]),
                          format_score(summary["adverse"][key]))
        return table

    def export_evaluation(self, result: EvaluationResult, subset: str = "all",
                          title: str = "Evaluation", parameter_count: Optional[int] = None) -> Dict[str, Path]:
        self.output_dir.mkdir(parents=True, exist_ok=True)
        text_path = self.output_dir / "eval_report.txt"
        text_path.write_text(self.evaluation_text(result, subset, title, parameter_count), encoding="utf-8")
        records_path = write_jsonl(self.evaluation_records(result, subset), self.output_dir / "eval_records.jsonl")
        logger.info(f"Evaluation report → {text_path}")
        return {"text": text_path, "records": records_path}

    # ---------------------------------------------------------------- experiments

    def experiment_text(self, report: ExperimentReport) -> str:
        return self._render(EXPERIMENT_TEMPLATE, report=report, summary=report.summary(),
                            runs=[arm.record() for arm in report.arms])

    def experiment_table(self, report: ExperimentReport) -> Table:
        table = Table(title=f"Experiment: {report.kind}")
        for column in ("Arm", "Runs", "Mean mIoU", "SD", f"Margin vs {report.baseline}", "Parameters"):
            table.add_column(column, justify="left" if column == "Arm" else "right")
        for row in report.summary():
            table.add_row(row["arm"], str(row["runs"]), format_score(row["mean"]), format_score(row["sd"]),
                          format_score(row["margin"]), f"{row['parameter_count']:,}")
        return table

    def export_experiment(self, report: ExperimentReport) -> Dict[str, Path]:
        self.output_dir.mkdir(parents=True, exist_ok=True)
        text_path = self.output_dir / f"{report.kind}_report.txt"
        text_path.write_text(self.experiment_text(report), encoding="utf-8")
        records = [{"kind": "run", **arm.record()} for arm in report.arms]
        records.extend({"kind": "summary", "experiment": report.kind, **row} for row in report.summary())
        records_path = write_jsonl(records, self.output_dir / f"{report.kind}_records.jsonl")
        logger.info(f"Experiment report → {text_path}")
        return {"text": text_path, "records": records_path}
