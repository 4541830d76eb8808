"""
Outer minimisation.

`baseline` trains on benign batches only. `aroface` crafts an adversarial
copy of every batch and steps on the summed gradients of the adversarial
loss l1 and the benign loss l2. `random` replaces the crafted transforms with
projected random draws from the same initial distribution.
"""

import datetime
import enum
import logging
import math
import pathlib
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel

from aroface import adversary, constraint, data
from aroface.adversary import AdversarialResult, AttackContext
from aroface.constraint import LandmarkTemplate
from aroface.data import Dataset
from aroface.errors import ContractViolation, NumericalAbort
from aroface.geometry import GridShape
from aroface.harness import reports
from aroface.harness.config import RunConfig, write_config
from aroface.recognizer import SGD, ModelParams, Recognizer, backward, init_params, save_checkpoint
from aroface.utils import rng as rng_utils

logger = logging.getLogger(__name__)

MODEL_NAME = "model.bin"
REPORT_NAME = "training"

# Called once per iteration with (iteration, benign batch, batch the l1 term was computed on).
BatchHook = Callable[[int, np.ndarray, Optional[np.ndarray]], None]


class TrainMode(str, enum.Enum):
    BASELINE = "baseline"
    AROFACE = "aroface"
    RANDOM = "random"


class AdversarialStats(BaseModel):
    n_crafted: int
    loss_increase_fraction: float
    mean_alpha: float
    mean_step_deviation: float
    std_step_deviation: float
    mean_theta_deviation: float
    frozen_violations: int


class EpochSummary(BaseModel):
    epoch: int
    iterations: int
    lr_end: float
    mean_l1: Optional[float]
    mean_l2: float


class TrainingReport(BaseModel):
    mode: TrainMode
    epochs: int
    iterations: int
    n_train: int
    l1: List[Optional[float]]
    l2: List[float]
    per_epoch: List[EpochSummary]
    adversarial: Optional[AdversarialStats] = None


@dataclass
class TrainResult:
    params: ModelParams
    report: TrainingReport
    config: RunConfig


class _AttackLog:
    """Running record of crafted transforms for the adversarial statistics."""

    def __init__(self, mask: np.ndarray):
        self.mask = mask
        self.increased: List[bool] = []
        self.alphas: List[float] = []
        self.step_devs: List[float] = []
        self.theta_devs: List[float] = []
        self.frozen_violations = 0

    def add(self, results: List[AdversarialResult]) -> None:
        identity = np.array([0.0, 0.0, 0.0, 1.0])
        for r in results:
            self.increased.append(r.loss_after >= r.loss_before)
            self.alphas.append(r.alpha)
            self.step_devs.append(r.pre_projection_deviation())
            self.theta_devs.append(float(np.linalg.norm(r.theta_star.deviation())))
            frozen = r.theta_star.as_array()[self.mask == 0]
            if np.any(frozen != identity[self.mask == 0]):
                self.frozen_violations += 1

    def stats(self) -> Optional[AdversarialStats]:
        if not self.alphas:
            return None
        return AdversarialStats(
            n_crafted=len(self.alphas),
            loss_increase_fraction=float(np.mean(self.increased)),
            mean_alpha=float(np.mean(self.alphas)),
            mean_step_deviation=float(np.mean(self.step_devs)),
            std_step_deviation=float(np.std(self.step_devs)),
            mean_theta_deviation=float(np.mean(self.theta_devs)),
            frozen_violations=self.frozen_violations,
        )


def load_template(cfg: RunConfig, shape: GridShape) -> LandmarkTemplate:
    tpl = constraint.load_template(cfg.template)
    return tpl if tpl.shape == shape else tpl.rescaled(shape)


def prepare_data(cfg: RunConfig) -> Tuple[Dataset, Dataset, LandmarkTemplate]:
    """Train and test sets from disk when configured, synthetic otherwise, plus the matching template."""
    cfg.check_paths()
    if cfg.dataset is not None:
        train_set = data.load_dataset(cfg.dataset)
        test_set = data.load_dataset(cfg.test_dataset) if cfg.test_dataset is not None else train_set
        if test_set.shape != train_set.shape or test_set.channels != train_set.channels:
            raise ContractViolation("train and test datasets have different image dimensions")
        return train_set, test_set, load_template(cfg, train_set.shape)
    shape = GridShape(cfg.synthetic.height, cfg.synthetic.width)
    tpl = load_template(cfg, shape)
    train_set, test_set = data.synthetic_splits(cfg.synthetic, tpl)
    return train_set, test_set, tpl


def learning_rate(cfg: RunConfig, iteration: int, total: int) -> float:
    lr0 = cfg.optimizer.lr
    if cfg.optimizer.schedule == "constant":
        return lr0
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * iteration / total))


def _summed(a: Dict[str, np.ndarray], b: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
    return {name: a[name] + b[name] for name in a}


def train(cfg: RunConfig, mode: TrainMode = TrainMode.AROFACE, train_set: Optional[Dataset] = None,
          template: Optional[LandmarkTemplate] = None, output_dir: Optional[pathlib.Path] = None,
          workers: Optional[int] = None, on_batch: Optional[BatchHook] = None) -> TrainResult:
    """Train from `cfg.seed`; writes checkpoints and reports when `output_dir` is given."""
    mode = TrainMode(mode)
    started = datetime.datetime.now(datetime.timezone.utc)
    if train_set is None or template is None:
        loaded, _, tpl = prepare_data(cfg)
        train_set = loaded if train_set is None else train_set
        template = tpl if template is None else template
    if len(train_set) == 0:
        raise ContractViolation("training set is empty")
    cfg = cfg.with_data_dims(train_set)
    workers = workers or cfg.workers
    if output_dir is not None:
        output_dir = pathlib.Path(output_dir)
        write_config(cfg, output_dir)

    params = init_params(cfg.model, cfg.seed)
    opt = SGD(cfg.optimizer.lr, cfg.optimizer.momentum, cfg.optimizer.weight_decay)
    ctx = AttackContext.build(cfg.pgd, template)
    attack_log = _AttackLog(cfg.pgd.mask())

    images, labels, ids = train_set.images(), train_set.labels(), train_set.ids()
    n = len(train_set)
    per_epoch = math.ceil(n / cfg.batch_size)
    total = cfg.epochs * per_epoch
    l1_curve: List[Optional[float]] = []
    l2_curve: List[float] = []
    rows = []
    summaries = []
    iteration = 0
    logger.info("training %s: %d samples, %d epochs, %d iterations", mode.value, n, cfg.epochs, total)

    for epoch in range(cfg.epochs):
        order = rng_utils.stream(cfg.seed, "shuffle", epoch).permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            x, y, sid = images[idx], labels[idx], ids[idx]
            lr = learning_rate(cfg, iteration, total)
            try:
                benign = backward(params, x, y, cfg.margin)
                grads, l1, warped = benign.grads, None, None
                if mode is TrainMode.AROFACE:
                    model = Recognizer(params, cfg.margin)
                    warped, results = adversary.augment_batch(model, x, y, sid, ctx, cfg.seed, iteration, workers)
                    attack_log.add(results)
                elif mode is TrainMode.RANDOM:
                    warped, _ = adversary.random_batch(x, sid, ctx, cfg.seed, iteration)
                if warped is not None:
                    adv = backward(params, warped, y, cfg.margin)
                    grads, l1 = _summed(adv.grads, benign.grads), adv.loss
            except NumericalAbort as e:
                e.context.update(iteration=iteration, epoch=epoch)
                logger.exception("numerical abort at iteration %d", iteration)
                raise NumericalAbort("training aborted", e.context) from e
            if on_batch is not None:
                on_batch(iteration, x, warped)
            params = opt.step(params, grads, lr)
            l1_curve.append(l1)
            l2_curve.append(benign.loss)
            rows.append({"iteration": iteration, "epoch": epoch, "lr": lr, "l1": l1, "l2": benign.loss})
            logger.debug("iter %d lr %.5f l1 %s l2 %.5f", iteration, lr, l1, benign.loss)
            iteration += 1

        epoch_l1 = [v for v in l1_curve[-per_epoch:] if v is not None]
        summaries.append(EpochSummary(
            epoch=epoch,
            iterations=per_epoch,
            lr_end=learning_rate(cfg, iteration, total),
            mean_l1=float(np.mean(epoch_l1)) if epoch_l1 else None,
            mean_l2=float(np.mean(l2_curve[-per_epoch:])),
        ))
        logger.info("epoch %d done: mean l2 %.4f", epoch, summaries[-1].mean_l2)
        if output_dir is not None:
            save_checkpoint(params, output_dir / f"checkpoint_epoch{epoch + 1}.bin")

    report = TrainingReport(mode=mode, epochs=cfg.epochs, iterations=iteration, n_train=n, l1=l1_curve,
                            l2=l2_curve, per_epoch=summaries, adversarial=attack_log.stats())
    if output_dir is not None:
        save_checkpoint(params, output_dir / MODEL_NAME)
        reports.write_losses(rows, output_dir)
        reports.write_report(report, output_dir, REPORT_NAME, format_training(report))
        reports.write_run_info(output_dir, started, {"command": "train", "mode": mode.value, "workers": workers})
    return TrainResult(params, report, cfg)


def format_training(report: TrainingReport) -> str:
    rows = [(s.epoch, s.lr_end, s.mean_l1, s.mean_l2) for s in report.per_epoch]
    text = f"training ({report.mode.value}): {report.n_train} samples, {report.iterations} iterations\n\n"
    text += reports.format_table(("epoch", "lr_end", "mean_l1", "mean_l2"), rows)
    if report.adversarial is not None:
        a = report.adversarial
        text += "\n" + reports.format_table(("statistic", "value"), [
            ("crafted transforms", a.n_crafted),
            ("loss increased", a.loss_increase_fraction),
            ("mean alpha", a.mean_alpha),
            ("mean step deviation", a.mean_step_deviation),
            ("std step deviation", a.std_step_deviation),
            ("mean |theta* - id|", a.mean_theta_deviation),
            ("frozen violations", a.frozen_violations),
        ])
    return text
