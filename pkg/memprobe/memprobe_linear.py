import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.special import logsumexp
from scipy.special import softmax as _softmax_rows

from .memprobe import (
    DimensionMismatch,
    EmptyStore,
    InvalidConfig,
    LabelTable,
    NonFinite,
    PredictionOutput,
    ProbabilityDistribution,
    _cfg,
    restricted_argmax,
)
from .memprobe_index import ExemplarModel

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    regularization_c: float = field(default_factory=lambda: _cfg("linear.regularization_c", 0.316, float))
    max_iterations: int = field(default_factory=lambda: _cfg("linear.max_iterations", 5000, int))
    grad_tolerance: float = field(default_factory=lambda: _cfg("linear.grad_tolerance", 1e-5, float))
    seed: int = field(default_factory=lambda: _cfg("run.seed", 0, int))

    def __post_init__(self):
        check_train_config(self)


def check_train_config(cfg: TrainConfig):
    if not cfg.regularization_c > 0:
        raise InvalidConfig(f"'regularization_c' must be > 0, got {cfg.regularization_c}")
    if cfg.max_iterations < 1:
        raise InvalidConfig(f"'max_iterations' must be >= 1, got {cfg.max_iterations}")
    if not cfg.grad_tolerance > 0:
        raise InvalidConfig(f"'grad_tolerance' must be > 0, got {cfg.grad_tolerance}")


class LinearClassifier:
    """Softmax classifier over the labels it was trained on.

    class_labels is sorted ascending; row i of weights/bias scores class_labels[i].
    """

    __slots__ = ("class_labels", "weights", "bias", "trained_on_count")

    def __init__(self, class_labels, weights, bias, trained_on_count: int):
        self.class_labels = np.asarray(class_labels, dtype=np.int64)
        self.weights = np.asarray(weights, dtype=np.float64)
        self.bias = np.asarray(bias, dtype=np.float64)
        self.trained_on_count = int(trained_on_count)

    def __repr__(self):
        return (f"LinearClassifier(classes={self.class_labels.tolist()}, "
                f"dim={self.dim}, trained_on={self.trained_on_count})")

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    @property
    def is_constant(self) -> bool:
        return len(self.class_labels) == 1

    def predict_proba_matrix(self, queries) -> np.ndarray:
        """(count, |classes|) class probabilities for every row of queries"""
        Q = np.asarray(queries, dtype=np.float64)
        if Q.ndim != 2 or Q.shape[1] != self.dim:
            raise DimensionMismatch(f"classifier dim is {self.dim}, got queries of shape {Q.shape}")
        if self.is_constant:
            return np.ones((Q.shape[0], 1))
        return _softmax_rows(Q @ self.weights.T + self.bias, axis=1)

    def predict_proba(self, q) -> ProbabilityDistribution:
        probs = self.predict_proba_matrix(np.asarray(q, dtype=np.float64).reshape(1, -1))[0]
        return ProbabilityDistribution(self.class_labels, probs)


def predict_proba(clf: LinearClassifier, q) -> ProbabilityDistribution:
    return clf.predict_proba(q)


def objective(params: np.ndarray, X: np.ndarray, Y: np.ndarray, c: float):
    """Regularized multinomial cross entropy and its gradient.

    L = 0.5*||W||^2 + c * sum_i CE(softmax(W x_i + b), y_i), bias unregularized.

    Args:
        params: flattened [W (classes x dim), b (classes)]
        X: (n, dim) samples
        Y: (n, classes) one-hot targets

    Returns:
        (loss, gradient) with the gradient flattened like params
    """
    n_classes, dim = Y.shape[1], X.shape[1]
    W = params[:n_classes * dim].reshape(n_classes, dim)
    b = params[n_classes * dim:]
    Z = X @ W.T + b
    lse = logsumexp(Z, axis=1)
    loss = 0.5 * np.dot(params[:n_classes * dim], params[:n_classes * dim]) \
        + c * float(np.sum(lse - np.einsum("ij,ij->i", Z, Y)))
    G = np.exp(Z - lse[:, None]) - Y
    grad_W = W + c * (G.T @ X)
    grad_b = c * G.sum(axis=0)
    return loss, np.concatenate([grad_W.ravel(), grad_b])


def train(embeddings, labels, cfg: Optional[TrainConfig] = None,
          history: Optional[List[float]] = None) -> LinearClassifier:
    """Fit a LinearClassifier with L-BFGS-B started from all zeros.

    Args:
        embeddings: (n, dim) unit vectors
        labels: n label ids
        cfg: optimizer settings, packaged defaults when omitted
        history: if given, receives the objective value after every accepted step

    Returns:
        classifier over the distinct labels, sorted ascending
    """
    cfg = cfg or TrainConfig()
    X = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if X.ndim != 2 or X.shape[0] == 0:
        raise EmptyStore(f"nothing to train on, got samples of shape {X.shape}")
    if X.shape[0] != y.shape[0]:
        raise DimensionMismatch(f"{X.shape[0]} embeddings but {y.shape[0]} labels")

    classes = np.unique(y)
    n_classes, dim = classes.size, X.shape[1]
    if n_classes == 1:
        return LinearClassifier(classes, np.zeros((1, dim)), np.zeros(1), X.shape[0])

    Y = np.zeros((X.shape[0], n_classes))
    Y[np.arange(X.shape[0]), np.searchsorted(classes, y)] = 1.0

    callback = None
    if history is not None:
        history.append(objective(np.zeros(n_classes * (dim + 1)), X, Y, cfg.regularization_c)[0])

        def callback(xk):
            history.append(objective(xk, X, Y, cfg.regularization_c)[0])

    res = minimize(
        objective,
        np.zeros(n_classes * (dim + 1)),
        args=(X, Y, cfg.regularization_c),
        method="L-BFGS-B",
        jac=True,
        callback=callback,
        options={"maxiter": cfg.max_iterations, "gtol": cfg.grad_tolerance, "ftol": 1e-12},
    )
    if not np.isfinite(res.fun) or not np.all(np.isfinite(res.x)):
        raise NonFinite(f"training diverged on {X.shape[0]} samples ({res.message})")
    if not res.success:
        logger.warning("optimizer stopped after %d iterations without converging: %s", res.nit, res.message)
    else:
        logger.debug("trained %d classes on %d samples in %d iterations", n_classes, X.shape[0], res.nit)

    W = res.x[:n_classes * dim].reshape(n_classes, dim)
    b = res.x[n_classes * dim:]
    return LinearClassifier(classes, W.copy(), b.copy(), X.shape[0])


def text_targets(clf: LinearClassifier, probs: np.ndarray, candidates=None) -> np.ndarray:
    """Per-row argmax label of a probability matrix, restricted to candidates when given."""
    return np.array([restricted_argmax(clf.class_labels, row, candidates) for row in probs], dtype=np.int64)


class LinProbeModel(ExemplarModel):
    """One global linear classifier retrained on every accumulated exemplar."""

    name = "linprobe"

    def __init__(self, labels: LabelTable, train_cfg: Optional[TrainConfig] = None):
        super().__init__(labels)
        self.train_cfg = train_cfg or TrainConfig()
        self.classifier: Optional[LinearClassifier] = None
        self._dirty = False

    def _on_add(self, positions):
        if len(positions):
            self._dirty = True

    def fit(self):
        if not self._dirty:
            return
        self.classifier = train(self.store.embeddings, self.store.labels, self.train_cfg)
        self._dirty = False

    def predict_batch(self, queries, candidates: Optional[Sequence[int]] = None) -> list:
        """Prediction per query row.

        With candidates, argmax_label and the text embedding come from the best
        candidate the classifier knows; the distribution still covers every
        trained label, and fusion restricts it to the candidate set.
        """
        if self.classifier is None:
            raise EmptyStore("linear probe has no trained classifier, call fit() first")
        probs = self.classifier.predict_proba_matrix(queries)
        targets = text_targets(self.classifier, probs, candidates)
        texts = self.labels.text_embeddings_for(targets)
        return [
            PredictionOutput(int(t), ProbabilityDistribution(self.classifier.class_labels, p), v)
            for t, p, v in zip(targets, probs, texts)
        ]
