import logging
import os
import threading
from collections import namedtuple
from dataclasses import dataclass
from typing import Dict, Iterable, Optional, Sequence, Tuple

import numpy as np
from scipy import special

# current version number
__version__ = "0.1.0"

logger = logging.getLogger(__name__)

# Default operating point, read from the yaml file shipped next to this module.
CONFIG_PATH = os.path.join(os.path.dirname(__file__), "memprobe_config.yaml")


def load_config_file(path: str) -> Optional[dict]:
    """Load a yaml configuration file.

    Returns:
        The parsed mapping, or None if the file is missing or unreadable.
    """
    try:
        import yaml
        with open(path, "r", encoding="utf-8") as f:
            return yaml.safe_load(f)
    except Exception:
        logger.debug("no usable config at %s", path)
        return None


_user_config = load_config_file(CONFIG_PATH)


def _cfg(path: str, default, typ=None, config: Optional[dict] = None):
    """Look up a dotted key (e.g. 'tree.psi') in the config, falling back to default."""
    c = _user_config if config is None else config
    for p in path.split("."):
        if not isinstance(c, dict) or p not in c:
            return default
        c = c[p]
    if c is None:
        return default
    if typ is not None:
        try:
            return typ(c)
        except Exception:
            return default
    return c


def thread_count() -> int:
    """Worker threads allowed for parallel leaf training (MEMPROBE_THREADS, default 1)."""
    raw = os.environ.get("MEMPROBE_THREADS")
    if raw is None or raw.strip() == "":
        return 1
    try:
        value = int(raw)
    except ValueError as e:
        raise InvalidConfig(f"'MEMPROBE_THREADS' is not an integer: {raw!r}") from e
    if value < 1:
        raise InvalidConfig(f"'MEMPROBE_THREADS' must be >= 1, got {value}")
    return value


## Errors

class MemprobeError(Exception):
    """Base class of every error raised by memprobe"""


class ZeroVector(MemprobeError):
    pass


class NonFinite(MemprobeError):
    pass


class InvalidDistribution(MemprobeError):
    pass


class EmptyDistribution(MemprobeError):
    pass


class DimensionMismatch(MemprobeError):
    pass


class EmptyIndex(MemprobeError):
    pass


class InvalidK(MemprobeError):
    pass


class EmptyStore(MemprobeError):
    pass


class MissingTextEmbedding(MemprobeError):
    pass


class EmptyTree(MemprobeError):
    pass


class UntrainedLeaf(MemprobeError):
    pass


class LeafTrainingError(MemprobeError):
    """Training failed inside one tree leaf"""

    def __init__(self, leaf_id: int, cause: Exception):
        super().__init__(f"training failed in leaf {leaf_id}: {cause}")
        self.leaf_id = leaf_id


class EmptyCoveredSet(MemprobeError):
    pass


class InvalidConfig(MemprobeError):
    pass


class InvalidPlan(MemprobeError):
    pass


class InvalidProtocol(MemprobeError):
    pass


class ShapeMismatch(MemprobeError):
    pass


class MalformedReport(MemprobeError):
    pass


class ScenarioAborted(MemprobeError):
    """A stage failed; the reports of the completed stages are kept"""

    def __init__(self, stage_index: int, reports: list, cause: Exception):
        super().__init__(f"stage {stage_index} failed: {cause}")
        self.stage_index = stage_index
        self.reports = reports


class DataError(MemprobeError):
    """Dataset file or manifest is unusable"""


class ManifestDimMismatch(DataError):
    pass


class DanglingLabel(DataError):
    pass


## Seeds

def derive_seed(seed: int, *salt: int) -> int:
    """Mix a run seed with integer salts (e.g. a node id) into a 32 bit seed."""
    return int(np.random.SeedSequence([int(seed), *[int(s) for s in salt]]).generate_state(1)[0])


def make_rng(seed: int, *salt: int) -> np.random.Generator:
    """Return a generator that depends only on (seed, *salt)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *[int(s) for s in salt]]))


## Vectors

# vectors already this close to unit length are left untouched, so normalize is idempotent
_UNIT_SLACK = 5e-7
_ZERO_NORM = 1e-12


def normalize(v) -> np.ndarray:
    """Scale a raw vector to unit L2 norm.

    Returns:
        float32 vector with the same direction and unit length
    """
    values = np.asarray(v)
    if values.ndim != 1 or values.size == 0:
        raise DimensionMismatch(f"expected a non-empty 1-d vector, got shape {values.shape}")
    wide = values.astype(np.float64)
    if not np.all(np.isfinite(wide)):
        raise NonFinite("vector contains NaN or Inf")
    norm = float(np.sqrt(np.dot(wide, wide)))
    if norm < _ZERO_NORM:
        raise ZeroVector(f"cannot normalize a vector of norm {norm:.3g}")
    if abs(norm - 1.0) <= _UNIT_SLACK:
        return values.astype(np.float32)
    return (wide / norm).astype(np.float32)


def normalize_rows(matrix) -> np.ndarray:
    """Row-wise normalize(); same rules, applied to every row."""
    values = np.asarray(matrix)
    if values.ndim != 2 or values.shape[1] == 0:
        raise DimensionMismatch(f"expected a (count, dim) matrix, got shape {values.shape}")
    wide = values.astype(np.float64)
    if not np.all(np.isfinite(wide)):
        raise NonFinite("matrix contains NaN or Inf")
    norms = np.sqrt(np.einsum("ij,ij->i", wide, wide))
    if norms.size and norms.min() < _ZERO_NORM:
        row = int(np.argmin(norms))
        raise ZeroVector(f"row {row} has norm {norms[row]:.3g}")
    out = wide / norms[:, None]
    already_unit = np.abs(norms - 1.0) <= _UNIT_SLACK
    result = out.astype(np.float32)
    result[already_unit] = values[already_unit].astype(np.float32)
    return result


def softmax(logits) -> np.ndarray:
    """Numerically stable softmax (max-subtracted), computed in float64."""
    x = np.asarray(logits, dtype=np.float64)
    if x.size == 0:
        raise EmptyDistribution("softmax of an empty vector")
    if not np.all(np.isfinite(x)):
        raise NonFinite("softmax input contains NaN or Inf")
    return special.softmax(x, axis=-1)


def _argmax_by_label(support: np.ndarray, probs: np.ndarray) -> int:
    # ties go to the smallest label id
    best = probs.max()
    return int(support[probs == best].min())


def argmax_label(dist: "ProbabilityDistribution") -> int:
    """Label with the largest probability; ties broken by smallest label id"""
    if len(dist.support) == 0:
        raise EmptyDistribution("argmax of an empty distribution")
    return _argmax_by_label(dist.support, dist.probs)


def restricted_argmax(support: np.ndarray, probs: np.ndarray, candidates=None) -> int:
    """argmax over the labels of support that are in candidates.

    Falls back to the whole support when none of its labels are candidates.
    """
    if candidates is not None:
        mask = np.isin(support, candidates)
        if mask.any():
            return _argmax_by_label(support[mask], probs[mask])
    return _argmax_by_label(support, probs)


## Domain types

class ProbabilityDistribution:
    """Probabilities over an ordered, duplicate free list of label ids.

    A partial distribution (partial=True) may sum to less than one; it is the
    zero-extension of a distribution over a sub-support.
    """

    __slots__ = ("support", "probs", "partial")

    def __init__(self, support, probs, partial: bool = False):
        self.support = np.asarray(support, dtype=np.int64).reshape(-1)
        self.probs = np.asarray(probs, dtype=np.float64).reshape(-1)
        self.partial = partial
        check_distribution(self)

    def __len__(self):
        return len(self.support)

    def __repr__(self):
        pairs = ", ".join(f"{s}: {p:.4g}" for s, p in zip(self.support, self.probs))
        return f"ProbabilityDistribution({{{pairs}}}{', partial' if self.partial else ''})"

    def prob(self, label_id: int) -> float:
        hit = np.flatnonzero(self.support == label_id)
        return float(self.probs[hit[0]]) if hit.size else 0.0

    def as_dict(self) -> Dict[int, float]:
        return {int(s): float(p) for s, p in zip(self.support, self.probs)}

    def argmax_label(self) -> int:
        return argmax_label(self)

    def zero_extend(self, support) -> "ProbabilityDistribution":
        """Same probabilities on a superset support, zero elsewhere."""
        target = np.asarray(support, dtype=np.int64)
        missing = np.setdiff1d(self.support, target)
        if missing.size:
            raise InvalidDistribution(f"labels {missing.tolist()} are not in the target support")
        probs = np.zeros(len(target), dtype=np.float64)
        order = np.argsort(target, kind="stable")
        probs[order[np.searchsorted(target[order], self.support)]] = self.probs
        return ProbabilityDistribution(target, probs, partial=self.partial)

    def restrict(self, labels) -> Optional["ProbabilityDistribution"]:
        """Restrict to the given labels (kept in support order) and renormalize.

        Returns:
            None if no label of the support is kept. A uniform distribution over
            the kept labels if they carry no probability mass.
        """
        mask = np.isin(self.support, np.asarray(labels, dtype=np.int64))
        if not mask.any():
            return None
        kept = self.probs[mask]
        total = kept.sum()
        if total <= 0.0:
            kept = np.full(kept.shape, 1.0 / kept.size)
        else:
            kept = kept / total
        return ProbabilityDistribution(self.support[mask], kept)


def check_distribution(dist: ProbabilityDistribution):
    """Check the distribution invariants, raise an exception on the first violation"""
    if dist.support.shape != dist.probs.shape:
        raise InvalidDistribution(
            f"support has {dist.support.size} labels but probs has {dist.probs.size} values")
    if np.unique(dist.support).size != dist.support.size:
        raise InvalidDistribution("support contains duplicate labels")
    if not np.all(np.isfinite(dist.probs)):
        raise NonFinite("probabilities contain NaN or Inf")
    if dist.probs.size and dist.probs.min() < 0.0:
        raise InvalidDistribution(f"negative probability {dist.probs.min():.3g}")
    if not dist.partial and dist.probs.size and abs(dist.probs.sum() - 1.0) > 1e-9:
        raise InvalidDistribution(f"probabilities sum to {dist.probs.sum():.12g}, not 1")


@dataclass
class PredictionOutput:
    """Distribution and/or embedding prediction with its resolved label"""

    argmax_label: int
    distribution: Optional[ProbabilityDistribution] = None
    embedding: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.distribution is None and self.embedding is None:
            raise InvalidDistribution("a prediction needs a distribution or an embedding")


class LabelTable:
    """Dense label vocabulary: label id i has text labels[i] and one text embedding."""

    def __init__(self, texts: Sequence[str], text_embeddings):
        self.texts = [str(t) for t in texts]
        self.text_embeddings = normalize_rows(text_embeddings)
        if len(self.texts) != self.text_embeddings.shape[0]:
            raise DimensionMismatch(
                f"{len(self.texts)} label texts but {self.text_embeddings.shape[0]} text embeddings")

    def __len__(self):
        return len(self.texts)

    @property
    def dim(self) -> int:
        return self.text_embeddings.shape[1]

    @property
    def label_ids(self) -> np.ndarray:
        return np.arange(len(self.texts), dtype=np.int64)

    def text_embedding(self, label_id: int) -> np.ndarray:
        if not 0 <= int(label_id) < len(self.texts):
            raise MissingTextEmbedding(f"label {label_id} has no text embedding")
        return self.text_embeddings[int(label_id)]

    def text_embeddings_for(self, label_ids) -> np.ndarray:
        ids = np.asarray(label_ids, dtype=np.int64)
        bad = ids[(ids < 0) | (ids >= len(self.texts))]
        if bad.size:
            raise MissingTextEmbedding(f"labels {bad.tolist()} have no text embedding")
        return self.text_embeddings[ids]

    @classmethod
    def merge(cls, tables: Iterable["LabelTable"]) -> Tuple["LabelTable", list]:
        """Concatenate tables into one id space.

        Returns:
            (merged table, offsets) where local id i of tables[t] becomes offsets[t] + i
        """
        tables = list(tables)
        if not tables:
            raise InvalidConfig("nothing to merge")
        dims = {t.dim for t in tables}
        if len(dims) != 1:
            raise DimensionMismatch(f"label tables disagree on dim: {sorted(dims)}")
        offsets, texts, total = [], [], 0
        for t in tables:
            offsets.append(total)
            texts.extend(t.texts)
            total += len(t)
        return cls(texts, np.concatenate([t.text_embeddings for t in tables])), offsets


# a stored (image embedding, label) pair
Exemplar = namedtuple("Exemplar", ["position", "image_embedding", "label_id"])


class ExemplarStore:
    """Append-only exemplar memory.

    Single writer, many readers: rows are written before the count is published,
    so a reader never sees a partially appended exemplar.
    """

    def __init__(self, dim: Optional[int] = None, capacity: int = 1024):
        self._dim = dim
        self._capacity = max(1, capacity)
        self._embeddings = None
        self._labels = None
        self._count = 0
        self._covered = set()
        self._label_counts: Dict[int, int] = {}
        self._covered_sorted = None
        self._lock = threading.Lock()

    def __len__(self):
        return self._count

    @property
    def dim(self) -> Optional[int]:
        return self._dim

    @property
    def embeddings(self) -> np.ndarray:
        """float32 (count, dim) view of the stored image embeddings"""
        count = self._count
        if self._embeddings is None:
            return np.empty((0, self._dim or 0), dtype=np.float32)
        return self._embeddings[:count]

    @property
    def labels(self) -> np.ndarray:
        count = self._count
        if self._labels is None:
            return np.empty(0, dtype=np.int64)
        return self._labels[:count]

    @property
    def covered_labels(self) -> frozenset:
        return frozenset(self._covered)

    def covered_array(self) -> np.ndarray:
        """Covered labels as a sorted int64 array"""
        cached = self._covered_sorted
        if cached is None:
            cached = np.array(sorted(self._covered), dtype=np.int64)
            self._covered_sorted = cached
        return cached

    def label_counts(self) -> Dict[int, int]:
        return dict(self._label_counts)

    def get(self, position: int) -> Exemplar:
        if not 0 <= position < self._count:
            raise IndexError(f"no exemplar at position {position}")
        return Exemplar(position, self._embeddings[position], int(self._labels[position]))

    def append(self, embedding, label_id: int) -> Exemplar:
        positions = self.extend(np.asarray(embedding)[None, :], [label_id])
        return self.get(int(positions[0]))

    def extend(self, embeddings, labels) -> np.ndarray:
        """Append a batch of exemplars, normalizing the embeddings.

        Returns:
            positions of the new exemplars
        """
        rows = normalize_rows(embeddings)
        ids = np.asarray(labels, dtype=np.int64).reshape(-1)
        if ids.shape[0] != rows.shape[0]:
            raise DimensionMismatch(f"{rows.shape[0]} embeddings but {ids.shape[0]} labels")
        if ids.size and ids.min() < 0:
            raise DanglingLabel(f"negative label id {ids.min()}")
        if self._dim is None:
            self._dim = rows.shape[1]
        elif rows.shape[1] != self._dim:
            raise DimensionMismatch(f"store dim is {self._dim}, got vectors of dim {rows.shape[1]}")

        with self._lock:
            start = self._count
            self._reserve(start + rows.shape[0])
            self._embeddings[start:start + rows.shape[0]] = rows
            self._labels[start:start + rows.shape[0]] = ids
            for label, n in zip(*np.unique(ids, return_counts=True)):
                self._label_counts[int(label)] = self._label_counts.get(int(label), 0) + int(n)
            fresh = set(int(x) for x in ids) - self._covered
            if fresh:
                self._covered |= fresh
                self._covered_sorted = None
            # publish last
            self._count = start + rows.shape[0]
        return np.arange(start, start + rows.shape[0], dtype=np.int64)

    def _reserve(self, needed: int):
        if self._embeddings is not None and needed <= self._embeddings.shape[0]:
            return
        capacity = self._capacity if self._embeddings is None else self._embeddings.shape[0]
        while capacity < needed:
            capacity *= 2
        embeddings = np.empty((capacity, self._dim), dtype=np.float32)
        labels = np.empty(capacity, dtype=np.int64)
        if self._embeddings is not None:
            embeddings[:self._count] = self._embeddings[:self._count]
            labels[:self._count] = self._labels[:self._count]
        self._embeddings, self._labels = embeddings, labels
