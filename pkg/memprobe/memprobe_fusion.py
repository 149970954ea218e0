from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, Optional, Sequence

import numpy as np

from .memprobe import (
    EmptyCoveredSet,
    InvalidConfig,
    LabelTable,
    PredictionOutput,
    ProbabilityDistribution,
    _cfg,
    normalize,
    softmax,
)

FUSION_MODES = ("zs", "exemplar", "avg-prob", "avg-emb", "aim-prob", "aim-emb")

# below this norm a blended embedding is treated as cancelled out
_BLEND_EPS = 1e-12


@dataclass
class ZeroShotConfig:
    temperature_tau: float = field(default_factory=lambda: _cfg("zeroshot.tau", 100.0, float))

    def __post_init__(self):
        if not self.temperature_tau > 0:
            raise InvalidConfig(f"'temperature_tau' must be > 0, got {self.temperature_tau}")


@dataclass
class FusionConfig:
    mode: str = field(default_factory=lambda: _cfg("fusion.mode", "aim-emb", str))
    alpha: float = field(default_factory=lambda: _cfg("fusion.alpha", 0.5, float))
    # labels treated as uncovered whatever the exemplar memory holds
    coverage_override: Optional[FrozenSet[int]] = None

    def __post_init__(self):
        self.mode = str(self.mode).lower()
        if self.coverage_override is not None:
            self.coverage_override = frozenset(int(x) for x in self.coverage_override)
        check_fusion_config(self)


def check_fusion_config(cfg: FusionConfig):
    if cfg.mode not in FUSION_MODES:
        raise InvalidConfig(f"'mode' must be one of {FUSION_MODES}, got {cfg.mode!r}")
    if not 0.0 <= cfg.alpha <= 1.0:
        raise InvalidConfig(f"'alpha' must be in [0, 1], got {cfg.alpha}")


class CandidateSet:
    """The label ids a query may be assigned to, with their text embeddings resolved."""

    __slots__ = ("label_ids", "text_embeddings")

    def __init__(self, label_ids: Sequence[int], label_table: LabelTable):
        ids = np.asarray(label_ids, dtype=np.int64).reshape(-1)
        if ids.size == 0:
            raise InvalidConfig("a candidate set needs at least one label")
        if np.unique(ids).size != ids.size:
            raise InvalidConfig("candidate set contains duplicate labels")
        self.label_ids = ids
        self.text_embeddings = label_table.text_embeddings_for(ids).astype(np.float64)

    def __len__(self):
        return self.label_ids.size


def _cosine_logits(Q: np.ndarray, cand: CandidateSet, tau: float) -> np.ndarray:
    T = cand.text_embeddings
    t_norms = np.linalg.norm(T, axis=1)
    q_norms = np.linalg.norm(Q, axis=1)
    return tau * (Q @ T.T) / (q_norms[:, None] * t_norms[None, :])


def zeroshot_logits(q, cand: CandidateSet, cfg: Optional[ZeroShotConfig] = None) -> np.ndarray:
    """tau * cosine(q, text embedding) for every candidate"""
    cfg = cfg or ZeroShotConfig()
    return _cosine_logits(np.asarray(q, dtype=np.float64).reshape(1, -1), cand, cfg.temperature_tau)[0]


def zeroshot_proba(q, cand: CandidateSet, cfg: Optional[ZeroShotConfig] = None) -> ProbabilityDistribution:
    return ProbabilityDistribution(cand.label_ids, softmax(zeroshot_logits(q, cand, cfg)))


def zeroshot_proba_matrix(queries, cand: CandidateSet, cfg: Optional[ZeroShotConfig] = None) -> np.ndarray:
    """(count, |cand|) zero-shot probabilities, columns in candidate order"""
    cfg = cfg or ZeroShotConfig()
    return softmax(_cosine_logits(np.asarray(queries, dtype=np.float64), cand, cfg.temperature_tau))


def zeroshot_predict_batch(queries, cand: CandidateSet, cfg: Optional[ZeroShotConfig] = None) -> np.ndarray:
    """Zero-shot label of every query; ties go to the smallest label id"""
    cfg = cfg or ZeroShotConfig()
    logits = _cosine_logits(np.asarray(queries, dtype=np.float64), cand, cfg.temperature_tau)
    order = np.argsort(cand.label_ids, kind="stable")
    # argmax returns the first maximum, so sort columns by label id first
    return cand.label_ids[order][np.argmax(logits[:, order], axis=1)]


def _effective_covered(covered: Iterable[int], masked: Optional[Iterable[int]]) -> FrozenSet[int]:
    live = frozenset(int(x) for x in covered)
    if masked is None:
        return live
    return live - frozenset(int(x) for x in masked)


def _covered_mask(cand: CandidateSet, covered: Iterable[int]) -> np.ndarray:
    return np.isin(cand.label_ids, np.fromiter((int(x) for x in covered), dtype=np.int64))


def _coverage_from(p_z: np.ndarray, mask: np.ndarray) -> float:
    if mask.all():
        return 1.0
    if not mask.any():
        return 0.0
    return float(np.clip(p_z[mask].sum(), 0.0, 1.0))


def coverage_probability(q, cand: CandidateSet, covered: Iterable[int],
                         cfg: Optional[ZeroShotConfig] = None,
                         coverage_override: Optional[Iterable[int]] = None) -> float:
    """Zero-shot probability mass on the covered candidates (the AIM weight).

    The softmax runs over every candidate; labels in coverage_override count
    as uncovered.
    """
    covered_set = _effective_covered(covered, coverage_override)
    p_z = softmax(zeroshot_logits(q, cand, cfg))
    return _coverage_from(p_z, _covered_mask(cand, covered_set))


def restrict_exemplar(dist: ProbabilityDistribution, cand: CandidateSet,
                      covered: Iterable[int]) -> Optional[ProbabilityDistribution]:
    """Exemplar distribution over the covered candidates, renormalized.

    Returns:
        None when no candidate is covered; uniform over the covered candidates
        when the exemplar model puts no mass on them.
    """
    keep = cand.label_ids[_covered_mask(cand, covered)]
    if keep.size == 0:
        return None
    lookup = dist.as_dict()
    probs = np.array([lookup.get(int(label), 0.0) for label in keep])
    total = probs.sum()
    if total <= 0.0:
        probs = np.full(keep.size, 1.0 / keep.size)
    else:
        probs = probs / total
    return ProbabilityDistribution(keep, probs)


def fuse_prob(p_z: ProbabilityDistribution, p_e: Optional[ProbabilityDistribution], w: float,
              mode: str, alpha: float = 0.5) -> ProbabilityDistribution:
    """Combine zero-shot and exemplar distributions over the candidate support of p_z.

    avg-prob: alpha * p_e + (1 - alpha) * p_z, p_e zero on uncovered labels.
    aim-prob: w * (p_z * p_e renormalized over covered labels) + (1 - w) * p_z.
    """
    support = p_z.support
    if mode == "zs":
        return p_z
    if mode == "exemplar":
        if p_e is None:
            return ProbabilityDistribution(support, np.full(support.size, 1.0 / support.size))
        return p_e.zero_extend(support)
    if mode == "avg-prob":
        if p_e is None:
            return p_z
        extended = p_e.zero_extend(support).probs
        return ProbabilityDistribution(support, alpha * extended + (1.0 - alpha) * p_z.probs)
    if mode == "aim-prob":
        if w == 0.0:
            return ProbabilityDistribution(support, p_z.probs.copy())
        if p_e is None:
            raise EmptyCoveredSet(f"coverage weight {w:.3g} > 0 but no candidate label is covered")
        extended = p_e.zero_extend(support).probs
        joint = p_z.probs * extended
        denom = joint.sum()
        joint = extended if denom <= 0.0 else joint / denom
        return ProbabilityDistribution(support, w * joint + (1.0 - w) * p_z.probs)
    raise InvalidConfig(f"{mode!r} is not a probability fusion mode")


def fuse_embedding(v_e, v_I, w: float, cand: CandidateSet, mode: str,
                   zs_cfg: Optional[ZeroShotConfig] = None, alpha: float = 0.5) -> PredictionOutput:
    """Blend the exemplar and image embeddings, then classify the blend zero-shot.

    avg-emb uses alpha, aim-emb uses the coverage weight w.
    """
    if mode == "avg-emb":
        a = alpha
    elif mode == "aim-emb":
        a = w
    else:
        raise InvalidConfig(f"{mode!r} is not an embedding fusion mode")
    image = np.asarray(v_I, dtype=np.float64)
    blended = a * np.asarray(v_e, dtype=np.float64) + (1.0 - a) * image
    if np.linalg.norm(blended) < _BLEND_EPS:
        blended = image
    dist = zeroshot_proba(blended, cand, zs_cfg)
    return PredictionOutput(dist.argmax_label(), dist, normalize(blended))


def fused_predict(output: Optional[PredictionOutput], q, cand: CandidateSet, covered: Iterable[int],
                  fusion: Optional[FusionConfig] = None, zs_cfg: Optional[ZeroShotConfig] = None,
                  p_z: Optional[np.ndarray] = None) -> PredictionOutput:
    """Final prediction for one query over cand.

    Args:
        output: exemplar model prediction for q, None when there is no exemplar model yet
        covered: labels the exemplar model has seen
        p_z: precomputed zero-shot probabilities over cand, optional
    """
    fusion = fusion or FusionConfig()
    if p_z is None:
        p_z = softmax(zeroshot_logits(q, cand, zs_cfg))
    zs = ProbabilityDistribution(cand.label_ids, p_z)
    if output is None or fusion.mode == "zs":
        return PredictionOutput(zs.argmax_label(), zs)

    live = frozenset(int(x) for x in covered)
    w = _coverage_from(p_z, _covered_mask(cand, _effective_covered(live, fusion.coverage_override)))

    if fusion.mode in ("avg-emb", "aim-emb"):
        return fuse_embedding(output.embedding, q, w, cand, fusion.mode, zs_cfg, fusion.alpha)

    if fusion.mode == "exemplar":
        p_e = output.distribution.restrict(cand.label_ids)
    else:
        p_e = restrict_exemplar(output.distribution, cand, live)
    dist = fuse_prob(zs, p_e, w, fusion.mode, fusion.alpha)
    return PredictionOutput(dist.argmax_label(), dist)


def long_tail_mask(label_counts: Dict[int, int], rare_fraction: float = 2.0 / 3.0) -> FrozenSet[int]:
    """The rarest rare_fraction of labels, to be treated as uncovered.

    Labels are ranked by exemplar count, ties by label id.
    """
    if not 0.0 <= rare_fraction <= 1.0:
        raise InvalidConfig(f"'rare_fraction' must be in [0, 1], got {rare_fraction}")
    ranked = sorted(label_counts, key=lambda label: (label_counts[label], label))
    n_rare = int(np.floor(rare_fraction * len(ranked) + 0.5))
    return frozenset(int(label) for label in ranked[:n_rare])
