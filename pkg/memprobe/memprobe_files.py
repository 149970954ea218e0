import io
import json
import logging
import os
import tempfile
from typing import Union

import numpy as np

from .memprobe import (
    DanglingLabel,
    DataError,
    InvalidConfig,
    LabelTable,
    ManifestDimMismatch,
    MalformedReport,
)
from .memprobe_harness import TaskDataset
from .memprobe_knn import KnnConfig, KnnModel
from .memprobe_linear import LinearClassifier, LinProbeModel, TrainConfig
from .memprobe_tree import TreeConfig, TreeNode, TreeProbeModel

logger = logging.getLogger(__name__)

EMBD_MAGIC = b"EMBD"
EMBD_VERSION = 1
EMBD_FLOAT32 = 1
# packed little-endian header: magic, version, count, dim, dtype
EMBD_HEADER = np.dtype([("magic", "S4"), ("version", "<u4"), ("count", "<u8"), ("dim", "<u4"), ("dtype", "u1")])
LABEL_DTYPE = np.dtype("<u4")

SNAPSHOT_VERSION = 1

PathLike = Union[str, os.PathLike]


def atomic_write(path: PathLike, data: bytes):
    """Write to a temp file in the target directory, then rename over path."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


## Embedding and label files

def write_embeddings(path: PathLike, matrix):
    rows = np.asarray(matrix, dtype=np.float32)
    if rows.ndim != 2:
        raise DataError(f"expected a (count, dim) matrix, got shape {rows.shape}")
    if not np.all(np.isfinite(rows)):
        raise DataError(f"refusing to write non-finite values to {path}")
    header = np.array([(EMBD_MAGIC, EMBD_VERSION, rows.shape[0], rows.shape[1], EMBD_FLOAT32)], dtype=EMBD_HEADER)
    atomic_write(path, header.tobytes() + rows.astype("<f4").tobytes())


def read_embeddings(path: PathLike) -> np.ndarray:
    """Read an EMBD file.

    Returns:
        float32 (count, dim) matrix
    """
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise DataError(f"cannot read embeddings {path}: {e}") from e
    if len(raw) < EMBD_HEADER.itemsize:
        raise DataError(f"{path}: truncated header")
    header = np.frombuffer(raw, dtype=EMBD_HEADER, count=1)[0]
    if header["magic"] != EMBD_MAGIC:
        raise DataError(f"{path}: bad magic {header['magic']!r}")
    if header["version"] != EMBD_VERSION:
        raise DataError(f"{path}: unsupported version {header['version']}")
    if header["dtype"] != EMBD_FLOAT32:
        raise DataError(f"{path}: unsupported dtype code {header['dtype']}")
    count, dim = int(header["count"]), int(header["dim"])
    payload = raw[EMBD_HEADER.itemsize:]
    if len(payload) != count * dim * 4:
        raise DataError(f"{path}: payload has {len(payload)} bytes, expected {count * dim * 4}")
    rows = np.frombuffer(payload, dtype="<f4").reshape(count, dim).astype(np.float32)
    if not np.all(np.isfinite(rows)):
        raise DataError(f"{path}: contains NaN or Inf")
    return rows


def write_labels(path: PathLike, labels):
    ids = np.asarray(labels, dtype=np.int64).reshape(-1)
    if ids.size and (ids.min() < 0 or ids.max() > np.iinfo(LABEL_DTYPE).max):
        raise DataError(f"label ids out of u32 range in {path}")
    atomic_write(path, ids.astype(LABEL_DTYPE).tobytes())


def read_labels(path: PathLike) -> np.ndarray:
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise DataError(f"cannot read labels {path}: {e}") from e
    if len(raw) % LABEL_DTYPE.itemsize:
        raise DataError(f"{path}: size {len(raw)} is not a multiple of 4")
    return np.frombuffer(raw, dtype=LABEL_DTYPE).astype(np.int64)


## Manifests

def write_manifest(directory: PathLike, task: TaskDataset) -> str:
    """Write task as a manifest plus embedding and label files under directory.

    Returns:
        path of the manifest
    """
    os.makedirs(directory, exist_ok=True)
    files = {
        "text_embeddings": "text.embd",
        "train": {"embeddings": "train.embd", "labels": "train.labels"},
        "test": {"embeddings": "test.embd", "labels": "test.labels"},
    }
    write_embeddings(os.path.join(directory, files["text_embeddings"]), task.labels.text_embeddings)
    for split, x, y in (("train", task.train_x, task.train_y), ("test", task.test_x, task.test_y)):
        write_embeddings(os.path.join(directory, files[split]["embeddings"]), x)
        write_labels(os.path.join(directory, files[split]["labels"]), y)
    manifest = {
        "name": task.name,
        "dim": task.dim,
        "labels": [{"id": i, "text": t} for i, t in enumerate(task.labels.texts)],
        "text_embeddings": files["text_embeddings"],
        "splits": {split: files[split] for split in ("train", "test")},
    }
    path = os.path.join(directory, "manifest.json")
    atomic_write(path, (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode("utf-8"))
    return path


def load_manifest(path: PathLike) -> TaskDataset:
    """Load and validate a dataset manifest; file paths are relative to it."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            manifest = json.load(f)
    except OSError as e:
        raise DataError(f"cannot read manifest {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise DataError(f"manifest {path} is not valid JSON: {e}") from e

    base = os.path.dirname(os.path.abspath(path))
    try:
        name = str(manifest["name"])
        dim = int(manifest["dim"])
        entries = sorted(manifest["labels"], key=lambda e: int(e["id"]))
        text_path = manifest["text_embeddings"]
        splits = manifest["splits"]
    except (KeyError, TypeError, ValueError) as e:
        raise DataError(f"manifest {path} is missing a field: {e}") from e

    ids = [int(e["id"]) for e in entries]
    if ids != list(range(len(ids))):
        raise DataError(f"manifest {path}: label ids are not dense 0..{len(ids) - 1}")

    texts = read_embeddings(os.path.join(base, text_path))
    if texts.shape[1] != dim:
        raise ManifestDimMismatch(f"{path}: text embeddings have dim {texts.shape[1]}, manifest says {dim}")
    if texts.shape[0] != len(ids):
        raise DataError(f"{path}: {texts.shape[0]} text embeddings for {len(ids)} labels")

    loaded = {}
    for split in ("train", "test"):
        try:
            entry = splits[split]
            x = read_embeddings(os.path.join(base, entry["embeddings"]))
            y = read_labels(os.path.join(base, entry["labels"]))
        except (KeyError, TypeError) as e:
            raise DataError(f"manifest {path}: split {split!r} is incomplete") from e
        if x.shape[0] and x.shape[1] != dim:
            raise ManifestDimMismatch(f"{path}: {split} embeddings have dim {x.shape[1]}, manifest says {dim}")
        if x.shape[0] != y.shape[0]:
            raise DataError(f"{path}: {split} has {x.shape[0]} embeddings but {y.shape[0]} labels")
        if y.size and y.max() >= len(ids):
            raise DanglingLabel(f"{path}: {split} label {y.max()} is not declared")
        loaded[split] = (x.reshape(-1, dim), y)

    try:
        labels = LabelTable([e["text"] for e in entries], texts)
    except Exception as e:
        raise DataError(f"{path}: unusable text embeddings: {e}") from e
    return TaskDataset(name, labels, *loaded["train"], *loaded["test"])


## Reports

def write_report(path: PathLike, report: dict):
    atomic_write(path, (json.dumps(report, indent=2, sort_keys=True) + "\n").encode("utf-8"))


def read_report(path: PathLike) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as f:
            report = json.load(f)
    except json.JSONDecodeError as e:
        raise MalformedReport(f"{path} is not valid JSON: {e}") from e
    if not isinstance(report, dict):
        raise MalformedReport(f"{path}: top level is not an object")
    return report


## Snapshots

def _classifier_arrays(classifiers):
    labels, weights, bias, counts, sizes = [], [], [], [], []
    for clf in classifiers:
        labels.append(clf.class_labels)
        weights.append(clf.weights.astype(np.float32))
        bias.append(clf.bias.astype(np.float32))
        counts.append(clf.trained_on_count)
        sizes.append(len(clf.class_labels))
    dim = classifiers[0].dim if classifiers else 0
    return {
        "clf_sizes": np.array(sizes, dtype=np.int64),
        "clf_labels": np.concatenate(labels) if labels else np.empty(0, dtype=np.int64),
        "clf_weights": np.concatenate(weights) if weights else np.empty((0, dim), dtype=np.float32),
        "clf_bias": np.concatenate(bias) if bias else np.empty(0, dtype=np.float32),
        "clf_counts": np.array(counts, dtype=np.int64),
    }


def _classifiers_from(arrays) -> list:
    out, start = [], 0
    for size, count in zip(arrays["clf_sizes"], arrays["clf_counts"]):
        end = start + int(size)
        out.append(LinearClassifier(arrays["clf_labels"][start:end], arrays["clf_weights"][start:end],
                                    arrays["clf_bias"][start:end], int(count)))
        start = end
    return out


def save_snapshot(path: PathLike, model):
    """Save an exemplar model (store, classifiers, tree) to a versioned npz file."""
    arrays = {
        "format_version": np.array(SNAPSHOT_VERSION),
        "method": np.array(model.name),
        "texts": np.array(model.labels.texts, dtype=str),
        "text_embeddings": model.labels.text_embeddings,
        "store_embeddings": model.store.embeddings,
        "store_labels": model.store.labels,
    }
    if isinstance(model, KnnModel):
        arrays.update(k=np.array(model.cfg.k), variant=np.array(model.cfg.variant),
                      temperature=np.array(model.cfg.temperature))
    elif isinstance(model, LinProbeModel):
        arrays.update(_train_cfg_arrays(model.train_cfg))
        arrays.update(_classifier_arrays([model.classifier] if model.classifier is not None else []))
    elif isinstance(model, TreeProbeModel):
        cfg = model.cfg
        arrays.update(_train_cfg_arrays(cfg.train_cfg))
        arrays.update(
            psi=np.array(cfg.node_capacity_psi), k=np.array(cfg.k), kmeans_max_iters=np.array(cfg.kmeans_max_iters),
            kmeans_tolerance=np.array(cfg.kmeans_tolerance), seed=np.array(cfg.seed),
            temperature=np.array(cfg.temperature), ensemble=np.array(cfg.ensemble),
        )
        nodes = model.tree.nodes
        none = -1
        arrays.update(
            root=np.array(none if model.tree.root is None else model.tree.root),
            node_parent=np.array([none if n.parent is None else n.parent for n in nodes], dtype=np.int64),
            node_left=np.array([none if n.left is None else n.left for n in nodes], dtype=np.int64),
            node_right=np.array([none if n.right is None else n.right for n in nodes], dtype=np.int64),
            node_count=np.array([n.count for n in nodes], dtype=np.int64),
            node_sum=(np.array([n.vector_sum for n in nodes]) if nodes
                      else np.empty((0, model.labels.dim))),
            node_dirty=np.array([n.dirty for n in nodes], dtype=bool),
            node_sizes=np.array([n.size for n in nodes], dtype=np.int64),
            node_positions=np.array([p for n in nodes for p in n.positions], dtype=np.int64),
            clf_nodes=np.array([n.node_id for n in nodes if n.classifier is not None], dtype=np.int64),
        )
        arrays.update(_classifier_arrays([n.classifier for n in nodes if n.classifier is not None]))
    else:
        raise InvalidConfig(f"cannot snapshot a {type(model).__name__}")

    buf = io.BytesIO()
    np.savez(buf, **arrays)
    atomic_write(path, buf.getvalue())
    logger.info("saved %s snapshot with %d exemplars to %s", model.name, len(model), path)


def _train_cfg_arrays(cfg: TrainConfig) -> dict:
    return {
        "regularization_c": np.array(cfg.regularization_c),
        "max_iterations": np.array(cfg.max_iterations),
        "grad_tolerance": np.array(cfg.grad_tolerance),
        "train_seed": np.array(cfg.seed),
    }


def _train_cfg_from(arrays) -> TrainConfig:
    return TrainConfig(float(arrays["regularization_c"]), int(arrays["max_iterations"]),
                       float(arrays["grad_tolerance"]), int(arrays["train_seed"]))


def load_snapshot(path: PathLike):
    """Rebuild the model saved by save_snapshot.

    Returns:
        KnnModel, LinProbeModel or TreeProbeModel
    """
    try:
        with np.load(path, allow_pickle=False) as data:
            arrays = {key: data[key] for key in data.files}
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read snapshot {path}: {e}") from e
    version = int(arrays.get("format_version", -1))
    if version != SNAPSHOT_VERSION:
        raise DataError(f"{path}: unsupported snapshot version {version}")

    labels = LabelTable(arrays["texts"].tolist(), arrays["text_embeddings"])
    method = str(arrays["method"])
    if method == "knn":
        model = KnnModel(labels, KnnConfig(int(arrays["k"]), str(arrays["variant"]), float(arrays["temperature"])))
    elif method == "linprobe":
        model = LinProbeModel(labels, _train_cfg_from(arrays))
    elif method == "treeprobe":
        cfg = TreeConfig(int(arrays["psi"]), int(arrays["k"]), int(arrays["kmeans_max_iters"]),
                         float(arrays["kmeans_tolerance"]), int(arrays["seed"]), _train_cfg_from(arrays),
                         float(arrays["temperature"]),
                         bool(arrays["ensemble"]) if "ensemble" in arrays else True)
        model = TreeProbeModel(labels, cfg)
    else:
        raise DataError(f"{path}: unknown method {method!r}")

    if arrays["store_labels"].size:
        model._load(arrays["store_embeddings"], arrays["store_labels"])
    classifiers = _classifiers_from(arrays) if "clf_sizes" in arrays else []

    if method == "linprobe":
        if classifiers:
            model.classifier = classifiers[0]
        else:
            model._dirty = len(model) > 0
    elif method == "treeprobe":
        _restore_tree(model, arrays, classifiers)
    return model


def _restore_tree(model: TreeProbeModel, arrays: dict, classifiers: list):
    tree = model.tree
    root = int(arrays["root"])
    tree.root = None if root < 0 else root
    start = 0
    for i in range(arrays["node_parent"].size):
        parent, left, right = (int(arrays[key][i]) for key in ("node_parent", "node_left", "node_right"))
        size = int(arrays["node_sizes"][i])
        node = TreeNode(
            node_id=i,
            parent=None if parent < 0 else parent,
            vector_sum=arrays["node_sum"][i].astype(np.float64),
            count=int(arrays["node_count"][i]),
            left=None if left < 0 else left,
            right=None if right < 0 else right,
            positions=arrays["node_positions"][start:start + size].tolist(),
            dirty=bool(arrays["node_dirty"][i]),
        )
        start += size
        tree.nodes.append(node)
        for p in node.positions:
            tree.leaf_of[p] = i
    for node_id, clf in zip(arrays["clf_nodes"], classifiers):
        tree.nodes[int(node_id)].classifier = clf
