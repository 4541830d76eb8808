"""
Multi-run experiments built from train + evaluate: component ablation,
the fixed-versus-random step size study and one-parameter sweeps.

Every run inside an experiment shares the data, the template and the master
seed, so rows differ only in the setting under study.
"""

import logging
import pathlib
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel

from aroface import adversary
from aroface import data as data_io
from aroface.adversary import AttackContext
from aroface.constraint import COMPONENTS, LandmarkTemplate
from aroface.data import Dataset
from aroface.errors import ConfigError
from aroface.harness import reports
from aroface.harness.config import RunConfig
from aroface.harness.evaluation import EvaluationReport, evaluate, format_evaluation
from aroface.harness.training import (AdversarialStats, TrainMode, TrainResult, prepare_data,
                                      train)
from aroface.recognizer import Recognizer

logger = logging.getLogger(__name__)

EVALUATION_NAME = "evaluation"
SWEEP_PARAMETERS = ("budget.max_rotation", "budget.max_translation", "budget.max_scale_deviation", "k")

Data = Tuple[Dataset, Dataset, LandmarkTemplate]


@dataclass
class RunOutcome:
    result: TrainResult
    evaluation: EvaluationReport


class ExperimentRow(BaseModel):
    label: str
    mode: TrainMode
    aligned_accuracy: float
    perturbed_accuracy: float
    accuracy_gap: float
    aligned_rank1: float
    perturbed_rank1: float
    perturbed_tar: Optional[float]
    tar_far: Optional[float]


class ExperimentTable(BaseModel):
    kind: str
    rows: List[ExperimentRow]


class AlphaArm(BaseModel):
    rule: str
    alpha_mean: float
    alpha_std: float
    adversarial: Optional[AdversarialStats]
    row: ExperimentRow


class AlphaStudyReport(BaseModel):
    fixed: AlphaArm
    random: AlphaArm


def _row(label: str, mode: TrainMode, ev: EvaluationReport) -> ExperimentRow:
    reliable = [t for t in ev.perturbed.tar if t.reliable]
    tar = reliable[-1] if reliable else None
    return ExperimentRow(
        label=label,
        mode=mode,
        aligned_accuracy=ev.aligned.accuracy,
        perturbed_accuracy=ev.perturbed.accuracy,
        accuracy_gap=ev.gaps["accuracy"],
        aligned_rank1=ev.aligned.rank1,
        perturbed_rank1=ev.perturbed.rank1,
        perturbed_tar=None if tar is None else tar.tar,
        tar_far=None if tar is None else tar.far,
    )


def run_and_evaluate(cfg: RunConfig, mode: Union[TrainMode, str], data: Optional[Data] = None,
                     output_dir: Optional[pathlib.Path] = None, workers: Optional[int] = None) -> RunOutcome:
    train_set, test_set, template = data or prepare_data(cfg)
    result = train(cfg, mode, train_set=train_set, template=template, output_dir=output_dir, workers=workers)
    model = Recognizer(result.params, result.config.margin)
    ev = evaluate(model, test_set, cfg.eval.perturb, cfg.eval.far_list, cfg.eval.seed,
                  workers=workers or cfg.workers, gallery_fraction=cfg.eval.gallery_fraction)
    if output_dir is not None:
        reports.write_report(ev, output_dir, EVALUATION_NAME, format_evaluation(ev))
    return RunOutcome(result, ev)


def parse_subset(text: str) -> Optional[List[str]]:
    """'none' -> None (baseline row); 'all' -> every component; else '+'- or ','-separated names."""
    text = text.strip().lower()
    if text == "none":
        return None
    if text == "all":
        return list(COMPONENTS)
    names = [t.strip() for t in text.replace(",", "+").split("+") if t.strip()]
    unknown = [n for n in names if n not in COMPONENTS]
    if not names or unknown:
        raise ConfigError(f"bad component subset {text!r}; use 'none', 'all' or names from {list(COMPONENTS)}")
    return [c for c in COMPONENTS if c in names]


def _subdir(output_dir: Optional[pathlib.Path], name: str) -> Optional[pathlib.Path]:
    return None if output_dir is None else pathlib.Path(output_dir) / name


def ablate(cfg: RunConfig, subsets: Sequence[str], output_dir: Optional[pathlib.Path] = None,
           workers: Optional[int] = None) -> ExperimentTable:
    """One run per subset with only the listed components attacked; 'none' is the baseline row."""
    if not subsets:
        raise ConfigError("ablation needs at least one component subset")
    parsed = [parse_subset(s) for s in subsets]
    data = prepare_data(cfg)
    rows = []
    for components in parsed:
        label = "none" if components is None else "+".join(components)
        if components is None:
            mode, run_cfg = TrainMode.BASELINE, cfg
        else:
            mode, run_cfg = TrainMode.AROFACE, cfg.updated({"pgd.components": components})
        logger.info("ablation row %s", label)
        outcome = run_and_evaluate(run_cfg, mode, data, _subdir(output_dir, f"ablate_{label}"), workers)
        rows.append(_row(label, mode, outcome.evaluation))
    table = ExperimentTable(kind="ablation", rows=rows)
    if output_dir is not None:
        reports.write_report(table, output_dir, "ablation", format_experiment(table))
    return table


def alpha_study(cfg: RunConfig, output_dir: Optional[pathlib.Path] = None,
                workers: Optional[int] = None) -> AlphaStudyReport:
    """Fixed alpha = mean versus alpha ~ N(mean, std^2), everything else equal."""
    data = prepare_data(cfg)
    arms = {}
    for rule, random_alpha in (("fixed", False), ("random", True)):
        run_cfg = cfg.updated({"pgd.random_alpha": random_alpha})
        outcome = run_and_evaluate(run_cfg, TrainMode.AROFACE, data, _subdir(output_dir, f"alpha_{rule}"), workers)
        arms[rule] = AlphaArm(
            rule=rule,
            alpha_mean=cfg.pgd.alpha_mean,
            alpha_std=cfg.pgd.alpha_std,
            adversarial=outcome.result.report.adversarial,
            row=_row(rule, TrainMode.AROFACE, outcome.evaluation),
        )
    report = AlphaStudyReport(**arms)
    if output_dir is not None:
        reports.write_report(report, output_dir, "alpha_study", format_alpha_study(report))
    return report


def _sweep_overrides(parameter: str, value: float) -> dict:
    if parameter == "k":
        return {"pgd.k": int(value)}
    if parameter == "budget.max_translation":
        return {"pgd.budget.max_translation_u": value, "pgd.budget.max_translation_v": value}
    return {f"pgd.{parameter}": value}


def sweep(cfg: RunConfig, parameter: str, values: Sequence[float], output_dir: Optional[pathlib.Path] = None,
          workers: Optional[int] = None) -> ExperimentTable:
    """Adversarial training once per value of one budget component or of the step count k."""
    if parameter not in SWEEP_PARAMETERS:
        raise ConfigError(f"cannot sweep {parameter!r}; choose one of {list(SWEEP_PARAMETERS)}")
    if not values:
        raise ConfigError("sweep needs at least one value")
    data = prepare_data(cfg)
    rows = []
    for value in values:
        label = f"{parameter}={value:g}"
        run_cfg = cfg.updated(_sweep_overrides(parameter, value))
        outcome = run_and_evaluate(run_cfg, TrainMode.AROFACE, data, _subdir(output_dir, f"sweep_{value:g}"), workers)
        rows.append(_row(label, TrainMode.AROFACE, outcome.evaluation))
    table = ExperimentTable(kind=f"sweep {parameter}", rows=rows)
    if output_dir is not None:
        reports.write_report(table, output_dir, "sweep", format_experiment(table))
    return table


def format_experiment(table: ExperimentTable) -> str:
    rows = [(r.label, r.mode.value, r.aligned_accuracy, r.perturbed_accuracy, r.accuracy_gap,
             r.aligned_rank1, r.perturbed_rank1, r.perturbed_tar) for r in table.rows]
    headers = ("run", "mode", "acc", "acc_perturbed", "gap", "rank1", "rank1_perturbed", "tar_perturbed")
    return reports.format_table(headers, rows, title=table.kind)


def format_alpha_study(report: AlphaStudyReport) -> str:
    rows = []
    for arm in (report.fixed, report.random):
        stats = arm.adversarial
        rows.append((arm.rule, arm.row.aligned_accuracy, arm.row.perturbed_accuracy,
                     None if stats is None else stats.mean_step_deviation,
                     None if stats is None else stats.std_step_deviation))
    headers = ("alpha", "acc", "acc_perturbed", "step_dev_mean", "step_dev_std")
    title = f"step size study (mean {report.fixed.alpha_mean:g}, std {report.fixed.alpha_std:g})"
    return reports.format_table(headers, rows, title=title)


def preview_pairs(cfg: RunConfig, model: Recognizer, dataset: Dataset, template: LandmarkTemplate,
                  path: pathlib.Path, count: int = 8) -> pathlib.Path:
    """Contact sheet of benign images (even columns) next to their adversarial copies (odd columns)."""
    subset = dataset.subset(range(min(count, len(dataset))))
    ctx = AttackContext.build(cfg.pgd, template)
    warped, _ = adversary.augment_batch(model, subset.images(), subset.labels(), subset.ids(), ctx, cfg.seed)
    pairs = np.stack([subset.images(), warped], axis=1).reshape((-1,) + warped.shape[1:])
    return data_io.save_preview(pairs, path, columns=2 * min(4, len(subset)))
