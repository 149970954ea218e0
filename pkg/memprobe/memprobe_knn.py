from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .memprobe import (
    EmptyStore,
    ExemplarStore,
    InvalidConfig,
    LabelTable,
    PredictionOutput,
    ProbabilityDistribution,
    ZeroVector,
    _cfg,
    normalize,
    softmax,
)
from .memprobe_index import ExemplarModel, FlatIndex

KNN_VARIANTS = ("mv", "avg", "wavg")


@dataclass
class KnnConfig:
    k: int = field(default_factory=lambda: _cfg("knn.k", 9, int))
    variant: str = field(default_factory=lambda: _cfg("knn.variant", "wavg", str))
    temperature: float = field(default_factory=lambda: _cfg("knn.temperature", 100.0, float))

    def __post_init__(self):
        self.variant = str(self.variant).lower()
        check_knn_config(self)


def check_knn_config(cfg: KnnConfig):
    if cfg.k < 1:
        raise InvalidConfig(f"'k' must be >= 1, got {cfg.k}")
    if cfg.variant not in KNN_VARIANTS:
        raise InvalidConfig(f"'variant' must be one of {KNN_VARIANTS}, got {cfg.variant!r}")
    if not cfg.temperature > 0:
        raise InvalidConfig(f"'temperature' must be > 0, got {cfg.temperature}")


def _vote(neighbor_labels: np.ndarray, k: int) -> ProbabilityDistribution:
    support, counts = np.unique(neighbor_labels, return_counts=True)
    return ProbabilityDistribution(support, counts / k)


def _neighbors(store: ExemplarStore, idx: FlatIndex, q, k: int):
    if len(store) == 0 or len(idx) == 0:
        raise EmptyStore("knn prediction on an empty exemplar store")
    hits = idx.search(q, k)
    return store.labels[hits.positions], hits.similarities


def _majority(neighbor_labels: np.ndarray, candidates=None) -> int:
    """Most frequent neighbour label, ties to the smallest label id.

    Agrees with the argmax of the vote distribution; with candidates the vote
    is taken over the neighbours whose label is a candidate, if any.
    """
    pool = neighbor_labels
    if candidates is not None:
        kept = neighbor_labels[np.isin(neighbor_labels, candidates)]
        if kept.size:
            pool = kept
    support, counts = np.unique(pool, return_counts=True)
    # np.unique sorts, so argmax picks the smallest tied label
    return int(support[np.argmax(counts)])


def _blend(labels: LabelTable, neighbor_labels, sims, cfg: KnnConfig, candidates=None) -> np.ndarray:
    if cfg.variant == "mv":
        return labels.text_embedding(_majority(neighbor_labels, candidates))
    texts = labels.text_embeddings_for(neighbor_labels).astype(np.float64)
    if cfg.variant == "avg":
        weights = np.full(len(neighbor_labels), 1.0 / len(neighbor_labels))
    else:
        weights = softmax(cfg.temperature * np.asarray(sims, dtype=np.float64))
    try:
        return normalize(weights @ texts)
    except ZeroVector:
        # opposite text embeddings cancelled out
        return labels.text_embedding(_majority(neighbor_labels))


def knn_predict_proba(store: ExemplarStore, idx: FlatIndex, q, cfg: Optional[KnnConfig] = None) -> ProbabilityDistribution:
    """Majority vote over the k nearest exemplars.

    Returns:
        counts / k over the labels among the neighbours, k clipped to the store size
    """
    cfg = cfg or KnnConfig()
    neighbor_labels, _ = _neighbors(store, idx, q, cfg.k)
    return _vote(neighbor_labels, len(neighbor_labels))


def knn_predict_embedding(store: ExemplarStore, labels: LabelTable, idx: FlatIndex, q,
                          cfg: Optional[KnnConfig] = None) -> np.ndarray:
    """Text-space prediction: MV, plain mean or similarity weighted mean of neighbour text embeddings"""
    cfg = cfg or KnnConfig()
    neighbor_labels, sims = _neighbors(store, idx, q, cfg.k)
    return _blend(labels, neighbor_labels, sims, cfg)


class KnnModel(ExemplarModel):
    """Nearest-neighbour exemplar model, nothing to train."""

    name = "knn"

    def __init__(self, labels: LabelTable, cfg: Optional[KnnConfig] = None):
        super().__init__(labels)
        self.cfg = cfg or KnnConfig()

    def predict_batch(self, queries, candidates: Optional[Sequence[int]] = None) -> list:
        if len(self.store) == 0:
            raise EmptyStore("knn prediction on an empty exemplar store")
        positions, sims = self.index.search_batch(queries, self.cfg.k)
        all_labels = self.store.labels
        out = []
        for pos, s in zip(positions, sims):
            neighbor_labels = all_labels[pos]
            dist = _vote(neighbor_labels, len(neighbor_labels))
            embedding = _blend(self.labels, neighbor_labels, s, self.cfg, candidates)
            label = _majority(neighbor_labels, candidates)
            out.append(PredictionOutput(label, dist, embedding))
        return out
