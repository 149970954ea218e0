import threading
from collections import namedtuple
from typing import Optional, Sequence, Tuple

import numpy as np

from .memprobe import (
    DimensionMismatch,
    EmptyIndex,
    Exemplar,
    ExemplarStore,
    InvalidK,
    LabelTable,
    MissingTextEmbedding,
    PredictionOutput,
    normalize,
)

# one retrieved neighbour
Neighbor = namedtuple("Neighbor", ["position", "similarity"])

# rows scored at once by search_batch
_QUERY_BLOCK = 256


class RetrievalResult:
    """Top-k neighbours, most similar first, ties broken by smaller position"""

    __slots__ = ("positions", "similarities")

    def __init__(self, positions: np.ndarray, similarities: np.ndarray):
        self.positions = positions
        self.similarities = similarities

    def __len__(self):
        return len(self.positions)

    def __iter__(self):
        for p, s in zip(self.positions, self.similarities):
            yield Neighbor(int(p), float(s))

    @property
    def neighbors(self):
        return list(self)


def _topk(sims: np.ndarray, positions: np.ndarray, k: int) -> np.ndarray:
    """Row indices of the exact top-k of sims, ordered by (-similarity, position)."""
    n = sims.shape[0]
    if k >= n:
        candidates = np.arange(n)
    else:
        # keep every row tied with the k-th value so the tie-break sees all of them
        kth = np.partition(sims, n - k)[n - k]
        candidates = np.flatnonzero(sims >= kth)
    order = np.lexsort((positions[candidates], -sims[candidates]))
    return candidates[order[:k]]


class FlatIndex:
    """Exact inner-product index over unit vectors, rows in insertion order.

    Vectors are kept in float64 so every dot product accumulates in 64 bits.
    search/search_batch may run concurrently; add needs exclusive access.
    """

    def __init__(self, dim: Optional[int] = None, capacity: int = 1024):
        self._dim = dim
        self._capacity = max(1, capacity)
        self._vectors = None
        self._positions = None
        self._count = 0
        self._lock = threading.Lock()

    def __len__(self):
        return self._count

    @property
    def dim(self) -> Optional[int]:
        return self._dim

    @property
    def vectors(self) -> np.ndarray:
        if self._vectors is None:
            return np.empty((0, self._dim or 0))
        return self._vectors[:self._count]

    @property
    def positions(self) -> np.ndarray:
        if self._positions is None:
            return np.empty(0, dtype=np.int64)
        return self._positions[:self._count]

    def add(self, embedding, position: int):
        self.add_batch(np.asarray(embedding)[None, :], [position])

    def add_batch(self, embeddings, positions):
        rows = np.asarray(embeddings, dtype=np.float64)
        ids = np.asarray(positions, dtype=np.int64).reshape(-1)
        if rows.ndim != 2 or rows.shape[0] != ids.shape[0]:
            raise DimensionMismatch(f"{rows.shape} rows do not match {ids.shape[0]} positions")
        if self._dim is None:
            self._dim = rows.shape[1]
        elif rows.shape[1] != self._dim:
            raise DimensionMismatch(f"index dim is {self._dim}, got vectors of dim {rows.shape[1]}")

        with self._lock:
            start = self._count
            needed = start + rows.shape[0]
            if self._vectors is None or needed > self._vectors.shape[0]:
                capacity = self._capacity if self._vectors is None else self._vectors.shape[0]
                while capacity < needed:
                    capacity *= 2
                vectors = np.empty((capacity, self._dim))
                pos = np.empty(capacity, dtype=np.int64)
                if self._vectors is not None:
                    vectors[:start] = self._vectors[:start]
                    pos[:start] = self._positions[:start]
                self._vectors, self._positions = vectors, pos
            self._vectors[start:needed] = rows
            self._positions[start:needed] = ids
            self._count = needed

    def _check_query(self, k: int, dim: int):
        if self._count == 0:
            raise EmptyIndex("search on an empty index")
        if k < 1:
            raise InvalidK(f"k must be >= 1, got {k}")
        if dim != self._dim:
            raise DimensionMismatch(f"index dim is {self._dim}, query has dim {dim}")

    def search(self, q, k: int) -> RetrievalResult:
        """Exact top-k by dot product.

        Returns:
            RetrievalResult of length min(k, count)
        """
        query = np.asarray(q, dtype=np.float64).reshape(-1)
        self._check_query(k, query.shape[0])
        vectors, positions = self.vectors, self.positions
        sims = vectors @ query
        rows = _topk(sims, positions, k)
        return RetrievalResult(positions[rows], sims[rows])

    def search_batch(self, queries, k: int) -> Tuple[np.ndarray, np.ndarray]:
        """search() for every row of queries.

        Returns:
            (positions, similarities), both (num_queries, min(k, count))
        """
        Q = np.asarray(queries, dtype=np.float64)
        if Q.ndim != 2:
            raise DimensionMismatch(f"expected a (count, dim) query matrix, got shape {Q.shape}")
        self._check_query(k, Q.shape[1])
        vectors, positions = self.vectors, self.positions
        width = min(k, vectors.shape[0])
        out_pos = np.empty((Q.shape[0], width), dtype=np.int64)
        out_sim = np.empty((Q.shape[0], width))
        for start in range(0, Q.shape[0], _QUERY_BLOCK):
            block = Q[start:start + _QUERY_BLOCK] @ vectors.T
            for i, sims in enumerate(block):
                rows = _topk(sims, positions, width)
                out_pos[start + i] = positions[rows]
                out_sim[start + i] = sims[rows]
        return out_pos, out_sim


def index_add(idx: FlatIndex, e: Exemplar) -> FlatIndex:
    """Add a stored exemplar's embedding under its store position."""
    idx.add(e.image_embedding, e.position)
    return idx


def search_topk(idx: FlatIndex, q, k: int) -> RetrievalResult:
    return idx.search(q, k)


class ExemplarModel:
    """Common surface of the exemplar-based predictors.

    Holds the exemplar store and its flat index; subclasses decide what
    fit() trains and how predictions are formed.
    """

    name = "exemplar"

    def __init__(self, labels: LabelTable):
        self.labels = labels
        self.store = ExemplarStore(labels.dim)
        self.index = FlatIndex(labels.dim)

    def __len__(self):
        return len(self.store)

    @property
    def covered_labels(self) -> frozenset:
        return self.store.covered_labels

    def add(self, embeddings, labels) -> np.ndarray:
        """Ingest exemplars into the store and the index.

        Returns:
            positions of the new exemplars
        """
        ids = np.asarray(labels, dtype=np.int64).reshape(-1)
        if ids.size and ids.max() >= len(self.labels):
            raise MissingTextEmbedding(f"label {ids.max()} is not in the label table")
        positions = self._load(embeddings, ids)
        self._on_add(positions)
        return positions

    def _load(self, embeddings, labels) -> np.ndarray:
        positions = self.store.extend(embeddings, labels)
        self.index.add_batch(self.store.embeddings[positions], positions)
        return positions

    def _on_add(self, positions: np.ndarray):
        pass

    def fit(self):
        pass

    def predict(self, q, candidates: Optional[Sequence[int]] = None) -> PredictionOutput:
        return self.predict_batch(normalize(q)[None, :], candidates)[0]

    def predict_batch(self, queries, candidates: Optional[Sequence[int]] = None) -> list:
        raise NotImplementedError


