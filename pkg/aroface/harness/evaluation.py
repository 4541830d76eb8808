"""
Robustness evaluation: the same metrics on aligned images and on
alignment-perturbed copies, plus the aligned-minus-perturbed gaps.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel

from aroface import data
from aroface.data import Dataset, PerturbSpec
from aroface.errors import ContractViolation
from aroface.harness import metrics, reports
from aroface.harness.metrics import EvalMetrics
from aroface.recognizer import Recognizer

logger = logging.getLogger(__name__)

# Embeddings are computed in chunks of this many samples regardless of worker count.
EMBED_CHUNK = 64


class EvaluationReport(BaseModel):
    aligned: EvalMetrics
    perturbed: EvalMetrics
    gaps: Dict[str, Optional[float]]
    perturb: PerturbSpec
    seed: int
    n_samples: int
    n_classes: int


def embed_all(model: Recognizer, images: np.ndarray) -> np.ndarray:
    chunks = [model.embed(images[i:i + EMBED_CHUNK]) for i in range(0, len(images), EMBED_CHUNK)]
    return np.concatenate([np.atleast_2d(c) for c in chunks])


def perturbed_copy(dataset: Dataset, spec: PerturbSpec, seed: int, workers: int = 1) -> Dataset:
    """Every sample warped by its own draw; the stream depends only on (seed, sample id)."""

    def perturb(s: data.Sample) -> data.Sample:
        return data.perturb_alignment(s, spec, data.perturb_stream(seed, s.sample_id))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            samples = list(pool.map(perturb, dataset.samples))
    else:
        samples = [perturb(s) for s in dataset.samples]
    return Dataset(samples, dataset.num_classes, dataset.channels, dataset.shape, dict(dataset.meta))


def _metrics(model: Recognizer, dataset: Dataset, gallery: np.ndarray, far_list: Sequence[float]) -> EvalMetrics:
    z = embed_all(model, dataset.images())
    logits = z @ model.params.classifier.T
    return metrics.summarize(logits, z, dataset.labels(), gallery, far_list)


def _gaps(aligned: EvalMetrics, perturbed: EvalMetrics) -> Dict[str, Optional[float]]:
    gaps: Dict[str, Optional[float]] = {
        "accuracy": aligned.accuracy - perturbed.accuracy,
        "rank1": aligned.rank1 - perturbed.rank1,
        "rank5": aligned.rank5 - perturbed.rank5,
    }
    for a, p in zip(aligned.tar, perturbed.tar):
        both = a.tar is not None and p.tar is not None
        gaps[f"tar@{a.far:g}"] = a.tar - p.tar if both else None
    return gaps


def evaluate(model: Recognizer, dataset: Dataset, spec: PerturbSpec, far_list: List[float], seed: int,
             workers: int = 1, gallery_fraction: float = 0.5) -> EvaluationReport:
    if len(dataset) == 0:
        raise ContractViolation("cannot evaluate on an empty dataset")
    bad = [f for f in far_list if not 0.0 < f < 1.0]
    if bad:
        raise ContractViolation(f"FAR values must lie in (0, 1), got {bad}")
    far_list = sorted(far_list, reverse=True)

    gallery = metrics.gallery_split(dataset.labels(), gallery_fraction)
    aligned = _metrics(model, dataset, gallery, far_list)
    perturbed = _metrics(model, perturbed_copy(dataset, spec, seed, workers), gallery, far_list)
    logger.info("aligned acc %.4f, perturbed acc %.4f", aligned.accuracy, perturbed.accuracy)
    return EvaluationReport(
        aligned=aligned,
        perturbed=perturbed,
        gaps=_gaps(aligned, perturbed),
        perturb=spec,
        seed=seed,
        n_samples=len(dataset),
        n_classes=dataset.num_classes,
    )


def format_evaluation(report: EvaluationReport) -> str:
    rows = [
        ("accuracy", report.aligned.accuracy, report.perturbed.accuracy, report.gaps["accuracy"]),
        ("rank-1", report.aligned.rank1, report.perturbed.rank1, report.gaps["rank1"]),
        ("rank-5", report.aligned.rank5, report.perturbed.rank5, report.gaps["rank5"]),
    ]
    for a, p in zip(report.aligned.tar, report.perturbed.tar):
        label = f"TAR@FAR={a.far:g}" + ("" if a.reliable else " (unreliable)")
        rows.append((label, a.tar, p.tar, report.gaps[f"tar@{a.far:g}"]))
    title = f"evaluation: {report.n_samples} samples, {report.n_classes} classes, seed {report.seed}"
    return reports.format_table(("metric", "aligned", "perturbed", "gap"), rows, title=title)
