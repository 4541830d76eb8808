"""
Identification and verification metrics over unit embeddings.

Identification ranks class centroids of a gallery by cosine similarity to
each probe. Verification scores every pair of samples by cosine similarity;
TAR at a FAR uses the ceil(FAR * N_impostor)-th largest impostor score as the
threshold and accepts genuine pairs scoring strictly above it. A FAR with
FAR * N_impostor < 1 cannot be resolved and is reported as unreliable.
"""

import logging
import math
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel

logger = logging.getLogger(__name__)


class TarEntry(BaseModel):
    far: float
    tar: Optional[float]
    threshold: Optional[float]
    reliable: bool


class EvalMetrics(BaseModel):
    accuracy: float
    rank1: float
    rank5: float
    tar: List[TarEntry]
    n_probes: int
    n_genuine: int
    n_impostor: int

    def tar_at(self, far: float) -> Optional[float]:
        for entry in self.tar:
            if math.isclose(entry.far, far):
                return entry.tar
        return None


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        return 0.0
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def class_centroids(embeddings: np.ndarray, labels: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Unit-normalised mean embedding per class present in `labels`."""
    classes = np.unique(labels)
    centroids = np.stack([embeddings[labels == c].mean(axis=0) for c in classes])
    norms = np.linalg.norm(centroids, axis=1, keepdims=True)
    return centroids / np.where(norms > 0, norms, 1.0), classes


def identification_rates(gallery: np.ndarray, gallery_labels: np.ndarray, probes: np.ndarray,
                         probe_labels: np.ndarray, ranks: Sequence[int] = (1, 5)) -> Dict[int, float]:
    """Fraction of probes whose class is among the k most similar centroids."""
    if len(probe_labels) == 0:
        return {k: 0.0 for k in ranks}
    centroids, classes = class_centroids(gallery, gallery_labels)
    sims = probes @ centroids.T
    position = {int(c): n for n, c in enumerate(classes)}
    rank = np.full(len(probe_labels), len(classes), dtype=np.int64)
    for n, label in enumerate(probe_labels):
        col = position.get(int(label))
        if col is not None:
            rank[n] = int(np.sum(sims[n] > sims[n, col]))
    return {k: float(np.mean(rank < k)) for k in ranks}


def pair_scores(embeddings: np.ndarray, labels: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Cosine scores of all pairs i < j, split into genuine and impostor."""
    sims = embeddings @ embeddings.T
    i, j = np.triu_indices(len(labels), k=1)
    same = labels[i] == labels[j]
    scores = sims[i, j]
    return scores[same], scores[~same]


def tar_at_far(genuine: np.ndarray, impostor: np.ndarray, far_list: Sequence[float]) -> List[TarEntry]:
    ranked = np.sort(impostor)[::-1]
    entries = []
    for far in far_list:
        expected = round(far * len(ranked), 9)
        # fewer than one impostor pair allowed above the threshold: FAR cannot be resolved
        if expected < 1 or len(genuine) == 0:
            logger.warning("FAR %.1e not resolvable with %d impostor pairs; entry flagged unreliable",
                           far, len(ranked))
            entries.append(TarEntry(far=far, tar=None, threshold=None, reliable=False))
            continue
        threshold = float(ranked[math.ceil(expected) - 1])
        entries.append(TarEntry(far=far, tar=float(np.mean(genuine > threshold)), threshold=threshold, reliable=True))
    return entries


def gallery_split(labels: np.ndarray, fraction: float) -> np.ndarray:
    """Boolean gallery mask: the first ceil(fraction * n_c) samples of every class, in dataset order.

    A class with a single sample keeps it in the gallery.
    """
    mask = np.zeros(len(labels), dtype=bool)
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        mask[members[:max(1, math.ceil(fraction * len(members)))]] = True
    return mask


def summarize(logits: np.ndarray, embeddings: np.ndarray, labels: np.ndarray, gallery: np.ndarray,
              far_list: Sequence[float]) -> EvalMetrics:
    """Accuracy over all samples, identification of probes against the gallery, verification over all pairs."""
    ranks = identification_rates(embeddings[gallery], labels[gallery], embeddings[~gallery], labels[~gallery])
    genuine, impostor = pair_scores(embeddings, labels)
    return EvalMetrics(
        accuracy=accuracy(logits, labels),
        rank1=ranks[1],
        rank5=ranks[5],
        tar=tar_at_far(genuine, impostor, far_list),
        n_probes=int(np.count_nonzero(~gallery)),
        n_genuine=int(len(genuine)),
        n_impostor=int(len(impostor)),
    )
