import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from sklearn.cluster import kmeans_plusplus

from .memprobe import (
    DimensionMismatch,
    EmptyStore,
    EmptyTree,
    Exemplar,
    ExemplarStore,
    InvalidConfig,
    LabelTable,
    LeafTrainingError,
    PredictionOutput,
    ProbabilityDistribution,
    UntrainedLeaf,
    ZeroVector,
    _cfg,
    derive_seed,
    normalize,
    restricted_argmax,
    softmax,
    thread_count,
)
from .memprobe_index import ExemplarModel, FlatIndex
from .memprobe_linear import LinearClassifier, TrainConfig, train

logger = logging.getLogger(__name__)


@dataclass
class TreeConfig:
    node_capacity_psi: int = field(default_factory=lambda: _cfg("tree.psi", 50000, int))
    k: int = field(default_factory=lambda: _cfg("knn.k", 9, int))
    kmeans_max_iters: int = field(default_factory=lambda: _cfg("tree.kmeans_max_iters", 100, int))
    kmeans_tolerance: float = field(default_factory=lambda: _cfg("tree.kmeans_tolerance", 1e-6, float))
    seed: int = field(default_factory=lambda: _cfg("run.seed", 0, int))
    train_cfg: TrainConfig = field(default_factory=TrainConfig)
    temperature: float = field(default_factory=lambda: _cfg("knn.temperature", 100.0, float))
    ensemble: bool = field(default_factory=lambda: _cfg("tree.ensemble", True, bool))

    def __post_init__(self):
        check_tree_config(self)


def check_tree_config(cfg: TreeConfig):
    if cfg.node_capacity_psi < 2:
        raise InvalidConfig(f"'node_capacity_psi' must be >= 2, got {cfg.node_capacity_psi}")
    if cfg.k < 1:
        raise InvalidConfig(f"'k' must be >= 1, got {cfg.k}")
    if cfg.kmeans_max_iters < 1:
        raise InvalidConfig(f"'kmeans_max_iters' must be >= 1, got {cfg.kmeans_max_iters}")
    if cfg.kmeans_tolerance < 0:
        raise InvalidConfig(f"'kmeans_tolerance' must be >= 0, got {cfg.kmeans_tolerance}")
    if not cfg.temperature > 0:
        raise InvalidConfig(f"'temperature' must be > 0, got {cfg.temperature}")


@dataclass(eq=False)
class TreeNode:
    """Tree node; a leaf owns exemplar positions and a classifier, an internal node two children.

    vector_sum is the running sum of every embedding below the node, so the
    centroid follows new arrivals without a full recompute.
    """

    node_id: int
    parent: Optional[int]
    vector_sum: np.ndarray
    count: int = 0
    left: Optional[int] = None
    right: Optional[int] = None
    positions: List[int] = field(default_factory=list)
    classifier: Optional[LinearClassifier] = None
    dirty: bool = False

    @property
    def is_leaf(self) -> bool:
        return self.left is None

    @property
    def size(self) -> int:
        return len(self.positions)

    @property
    def centroid(self) -> np.ndarray:
        norm = np.sqrt(np.dot(self.vector_sum, self.vector_sum))
        if norm == 0.0:
            return self.vector_sum
        return self.vector_sum / norm


def two_means(X: np.ndarray, seed: int, max_iters: int, tolerance: float) -> np.ndarray:
    """Split rows of X into two non-empty clusters.

    k-means++ seeding, then Lloyd iterations until no centroid moves more than
    tolerance. Distance ties go to cluster 0; an empty cluster takes the point
    farthest from the other centroid.

    Returns:
        0/1 cluster assignment per row
    """
    centers, _ = kmeans_plusplus(X, n_clusters=2, random_state=seed)
    sq_norms = np.einsum("ij,ij->i", X, X)
    assign = np.zeros(X.shape[0], dtype=np.int64)
    for _ in range(max_iters):
        d = sq_norms[:, None] - 2.0 * (X @ centers.T) + np.einsum("ij,ij->i", centers, centers)
        assign = (d[:, 1] < d[:, 0]).astype(np.int64)
        for empty in (0, 1):
            if not np.any(assign == empty):
                far = int(np.argmax(d[:, 1 - empty]))
                assign[far] = empty
        moved = np.stack([X[assign == c].mean(axis=0) for c in (0, 1)])
        shift = np.max(np.linalg.norm(moved - centers, axis=1))
        centers = moved
        if shift < tolerance:
            break
    return assign


class ClusterTree:
    """Incremental binary clustering tree over the positions of an ExemplarStore.

    Leaves hold at most node_capacity_psi exemplars; a full leaf is split by
    2-means before it takes a new one. Only leaves touched by an insert are
    marked dirty and retrained.
    """

    def __init__(self, config: TreeConfig, store: ExemplarStore):
        self.config = config
        self.store = store
        self.nodes: List[TreeNode] = []
        self.root: Optional[int] = None
        self.leaf_of: Dict[int, int] = {}

    def __len__(self):
        return len(self.leaf_of)

    @property
    def leaves(self) -> List[TreeNode]:
        return [n for n in self.nodes if n.is_leaf]

    def _new_node(self, parent: Optional[int], dim: int) -> TreeNode:
        node = TreeNode(len(self.nodes), parent, np.zeros(dim))
        self.nodes.append(node)
        return node

    def nearest_leaf(self, v, start: Optional[int] = None) -> int:
        """Descend by the larger centroid dot product, ties to the left child."""
        if self.root is None:
            raise EmptyTree("tree has no nodes yet")
        vec = np.asarray(v, dtype=np.float64)
        node = self.nodes[self.root if start is None else start]
        while not node.is_leaf:
            left, right = self.nodes[node.left], self.nodes[node.right]
            node = left if np.dot(left.centroid, vec) >= np.dot(right.centroid, vec) else right
        return node.node_id

    def insert(self, position: int):
        v = self.store.embeddings[position].astype(np.float64)
        if self.root is None:
            self.root = self._new_node(None, v.shape[0]).node_id
        elif v.shape[0] != self.nodes[self.root].vector_sum.shape[0]:
            raise DimensionMismatch(f"tree dim is {self.nodes[self.root].vector_sum.shape[0]}, got {v.shape[0]}")

        leaf = self.nodes[self.nearest_leaf(v)]
        if leaf.size >= self.config.node_capacity_psi:
            self.split_node(leaf.node_id)
            leaf = self.nodes[self.nearest_leaf(v, start=leaf.node_id)]

        leaf.positions.append(int(position))
        leaf.dirty = True
        self.leaf_of[int(position)] = leaf.node_id
        node = leaf
        while node is not None:
            node.vector_sum += v
            node.count += 1
            node = None if node.parent is None else self.nodes[node.parent]

    def insert_batch(self, positions):
        for p in positions:
            self.insert(int(p))

    def split_node(self, node_id: int):
        node = self.nodes[node_id]
        if not node.is_leaf:
            raise InvalidConfig(f"node {node_id} is not a leaf")
        positions = np.asarray(node.positions, dtype=np.int64)
        X = self.store.embeddings[positions].astype(np.float64)

        if np.all(X == X[0]):
            logger.warning("leaf %d holds %d identical points, splitting it in halves", node_id, len(positions))
            assign = np.zeros(len(positions), dtype=np.int64)
            assign[(len(positions) + 1) // 2:] = 1
        else:
            assign = two_means(X, derive_seed(self.config.seed, node_id),
                               self.config.kmeans_max_iters, self.config.kmeans_tolerance)

        children = []
        for c in (0, 1):
            child = self._new_node(node_id, X.shape[1])
            mask = assign == c
            child.positions = positions[mask].tolist()
            child.vector_sum = X[mask].sum(axis=0)
            child.count = len(child.positions)
            child.dirty = True
            for p in child.positions:
                self.leaf_of[p] = child.node_id
            children.append(child)

        node.left, node.right = children[0].node_id, children[1].node_id
        node.positions = []
        node.classifier = None
        node.dirty = False
        logger.info("split leaf %d into %d (%d) and %d (%d)", node_id,
                    children[0].node_id, children[0].count, children[1].node_id, children[1].count)

    def _train_leaf(self, node: TreeNode) -> LinearClassifier:
        positions = np.asarray(node.positions, dtype=np.int64)
        try:
            return train(self.store.embeddings[positions], self.store.labels[positions], self.config.train_cfg)
        except Exception as e:
            raise LeafTrainingError(node.node_id, e) from e

    def retrain_dirty(self) -> int:
        """Train every dirty leaf on its current exemplars.

        Returns:
            number of leaves trained
        """
        dirty = [n for n in self.nodes if n.is_leaf and n.dirty]
        if not dirty:
            return 0
        workers = min(thread_count(), len(dirty))
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                classifiers = list(pool.map(self._train_leaf, dirty))
        else:
            classifiers = [self._train_leaf(n) for n in dirty]
        for node, clf in zip(dirty, classifiers):
            node.classifier = clf
            node.dirty = False
            logger.debug("leaf %d retrained on %d exemplars", node.node_id, node.size)
        return len(dirty)

    def _predict_nearest_leaf(self, labels: LabelTable, Q: np.ndarray,
                              candidates: Optional[Sequence[int]] = None) -> list:
        # no ensemble: each query is answered by the leaf it routes to
        out = []
        for q in Q:
            node = self.nodes[self.nearest_leaf(q)]
            if node.dirty or node.classifier is None:
                raise UntrainedLeaf(f"leaf {node.node_id} has not been trained since its last insert")
            probs = node.classifier.predict_proba_matrix(q[None, :])[0]
            label = restricted_argmax(node.classifier.class_labels, probs, candidates)
            out.append(PredictionOutput(label, ProbabilityDistribution(node.classifier.class_labels, probs),
                                        labels.text_embedding(label)))
        return out

    def predict_batch(self, index: FlatIndex, labels: LabelTable, queries,
                      candidates: Optional[Sequence[int]] = None) -> list:
        """Predict with the leaf classifiers of each query's k nearest exemplars.

        The distribution averages the neighbour leaves' distributions (one vote
        per neighbour) zero-extended to every covered label. The embedding is
        the similarity-weighted mean of the text embeddings of each neighbour
        leaf's top label. With ensemble off, the query's nearest leaf answers
        alone, as a LinProbeModel trained on that leaf would.

        With candidates, argmax_label and the per-leaf top labels are taken
        over the candidates; the distribution still spans every label.
        """
        if self.root is None or not self.leaf_of:
            raise EmptyTree("tree has no exemplars")
        Q = np.asarray(queries, dtype=np.float64)
        if not self.config.ensemble:
            return self._predict_nearest_leaf(labels, Q, candidates)
        positions, sims = index.search_batch(Q, self.config.k)
        leaf_ids = np.array([[self.leaf_of[int(p)] for p in row] for row in positions], dtype=np.int64)
        covered = self.store.covered_array()

        acc = np.zeros((Q.shape[0], covered.size))
        top = np.empty(leaf_ids.shape, dtype=np.int64)
        for leaf_id in np.unique(leaf_ids):
            node = self.nodes[leaf_id]
            if node.dirty or node.classifier is None:
                raise UntrainedLeaf(f"leaf {leaf_id} has not been trained since its last insert")
            hit = leaf_ids == leaf_id
            rows = np.flatnonzero(hit.any(axis=1))
            probs = node.classifier.predict_proba_matrix(Q[rows])
            cols = np.searchsorted(covered, node.classifier.class_labels)
            acc[np.ix_(rows, cols)] += hit[rows].sum(axis=1)[:, None] * probs
            for r, p in zip(rows, probs):
                top[r, hit[r]] = restricted_argmax(node.classifier.class_labels, p, candidates)

        out = []
        for i in range(Q.shape[0]):
            dist = ProbabilityDistribution(covered, acc[i] / acc[i].sum())
            beta = softmax(self.config.temperature * sims[i])
            try:
                embedding = normalize(beta @ labels.text_embeddings_for(top[i]).astype(np.float64))
            except ZeroVector:
                embedding = labels.text_embedding(dist.argmax_label())
            label = restricted_argmax(covered, dist.probs, candidates)
            out.append(PredictionOutput(label, dist, embedding))
        return out


def nearest_leaf(tree: ClusterTree, v) -> int:
    return tree.nearest_leaf(v)


def tree_insert(tree: ClusterTree, e: Exemplar) -> ClusterTree:
    dim = tree.store.dim
    if dim is not None and np.asarray(e.image_embedding).shape[0] != dim:
        raise DimensionMismatch(f"tree dim is {dim}, got {np.asarray(e.image_embedding).shape[0]}")
    tree.insert(e.position)
    return tree


def split_node(tree: ClusterTree, leaf: int) -> ClusterTree:
    tree.split_node(leaf)
    return tree


def retrain_dirty(tree: ClusterTree) -> ClusterTree:
    tree.retrain_dirty()
    return tree


def tree_predict(tree: ClusterTree, store: ExemplarStore, labels: LabelTable, idx: FlatIndex, q) -> PredictionOutput:
    if len(store) == 0:
        raise EmptyTree("tree has no exemplars")
    return tree.predict_batch(idx, labels, normalize(q)[None, :])[0]


class TreeProbeModel(ExemplarModel):
    """Cluster tree with one linear classifier per leaf."""

    name = "treeprobe"

    def __init__(self, labels: LabelTable, cfg: Optional[TreeConfig] = None):
        super().__init__(labels)
        self.cfg = cfg or TreeConfig()
        self.tree = ClusterTree(self.cfg, self.store)

    def _on_add(self, positions):
        self.tree.insert_batch(positions)

    def fit(self):
        self.tree.retrain_dirty()

    def predict_batch(self, queries, candidates: Optional[Sequence[int]] = None) -> list:
        if len(self.store) == 0:
            raise EmptyStore("tree probe has no exemplars")
        return self.tree.predict_batch(self.index, self.labels, queries, candidates)
