import logging
import statistics
import timeit
from collections import namedtuple
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .memprobe import (
    InvalidConfig,
    InvalidPlan,
    InvalidProtocol,
    LabelTable,
    MalformedReport,
    ScenarioAborted,
    ShapeMismatch,
    _cfg,
    make_rng,
    normalize_rows,
)
from .memprobe_fusion import (
    CandidateSet,
    FusionConfig,
    ZeroShotConfig,
    fused_predict,
    long_tail_mask,
    zeroshot_predict_batch,
    zeroshot_proba_matrix,
)
from .memprobe_knn import KnnConfig, KnnModel
from .memprobe_linear import LinProbeModel, TrainConfig
from .memprobe_tree import TreeConfig, TreeProbeModel

logger = logging.getLogger(__name__)

# monotonic wall clock for stage and latency timings
high_acc_clock = timeit.default_timer

METHODS = ("zs", "knn", "linprobe", "treeprobe")
SCENARIOS = ("data", "class", "task")
PROTOCOLS = ("zs", "union", "union-zs", "mix-zs")

DATA_FRACTIONS = (0.02, 0.04, 0.08, 0.16, 0.32, 0.64, 1.00)
CLASS_STAGES = 5
# label samples drawn from the zero-shot pool and test samples per class in flexible inference
FLEX_LABELS = 100
FLEX_SAMPLES_PER_CLASS = 100
MIX_SPLITS = 5


## Datasets

@dataclass
class TaskDataset:
    """One classification task: its label vocabulary and train/test embeddings.

    Label ids in train_y/test_y are local to the task (0..len(labels)-1).
    """

    name: str
    labels: LabelTable
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray

    def __post_init__(self):
        dim = self.labels.dim
        self.train_x = np.asarray(self.train_x, dtype=np.float32).reshape(-1, dim)
        self.test_x = np.asarray(self.test_x, dtype=np.float32).reshape(-1, dim)
        self.train_y = np.asarray(self.train_y, dtype=np.int64).reshape(-1)
        self.test_y = np.asarray(self.test_y, dtype=np.int64).reshape(-1)
        for split, x, y in (("train", self.train_x, self.train_y), ("test", self.test_x, self.test_y)):
            if x.shape[0] != y.shape[0]:
                raise ShapeMismatch(f"task {self.name!r}: {x.shape[0]} {split} embeddings but {y.shape[0]} labels")
            if y.size and (y.min() < 0 or y.max() >= len(self.labels)):
                raise InvalidConfig(f"task {self.name!r}: {split} label outside 0..{len(self.labels) - 1}")

    @property
    def dim(self) -> int:
        return self.labels.dim


@dataclass
class SynthConfig:
    dim: int = 64
    classes: int = 20
    per_class_train: int = 100
    per_class_test: int = 20
    intra_class_sigma: float = 0.2
    text_offset_sigma: float = 0.18
    seed: int = 0
    name: str = "synth"

    def __post_init__(self):
        check_synth_config(self)


def check_synth_config(cfg: SynthConfig):
    if cfg.dim < 1:
        raise InvalidConfig(f"'dim' must be >= 1, got {cfg.dim}")
    if cfg.classes < 1:
        raise InvalidConfig(f"'classes' must be >= 1, got {cfg.classes}")
    if cfg.per_class_train < 0 or cfg.per_class_test < 0:
        raise InvalidConfig("'per_class_train' and 'per_class_test' must be >= 0")
    if cfg.intra_class_sigma < 0 or cfg.text_offset_sigma < 0:
        raise InvalidConfig("noise levels must be >= 0")


def gen_synthetic(cfg: SynthConfig) -> TaskDataset:
    """Gaussian clusters around random unit prototypes.

    Text embeddings sit at their own offset from each prototype, so image and
    text embeddings of a class never coincide unless both noise levels are 0.
    """
    rng = make_rng(cfg.seed)
    protos = normalize_rows(rng.standard_normal((cfg.classes, cfg.dim))).astype(np.float64)
    texts = normalize_rows(protos + cfg.text_offset_sigma * rng.standard_normal((cfg.classes, cfg.dim)))

    def draw(per_class):
        y = np.repeat(np.arange(cfg.classes, dtype=np.int64), per_class)
        if y.size == 0:
            return np.empty((0, cfg.dim), dtype=np.float32), y
        return normalize_rows(protos[y] + cfg.intra_class_sigma * rng.standard_normal((y.size, cfg.dim))), y

    train_x, train_y = draw(cfg.per_class_train)
    test_x, test_y = draw(cfg.per_class_test)
    names = [f"{cfg.name}-{c}" for c in range(cfg.classes)]
    return TaskDataset(cfg.name, LabelTable(names, texts), train_x, train_y, test_x, test_y)


## Scenarios

# rows[t] holds task t's training rows seen so far, in arrival order; each stage extends the last
Stage = namedtuple("Stage", ["index", "rows"])


@dataclass
class ScenarioPlan:
    kind: str
    tasks: List[TaskDataset]
    stages: List[Stage]
    seed: int


def plan_scenario(tasks: Sequence[TaskDataset], kind: str, seed: int = 0) -> ScenarioPlan:
    """Split the target tasks' training data into cumulative stages.

    data:  fractions 2%, 4%, ..., 100% of every task, drawn without class balance.
    class: five stages each adding 20% of every task's classes.
    task:  one whole task per stage, in the given order.
    """
    tasks = list(tasks)
    if kind not in SCENARIOS:
        raise InvalidPlan(f"scenario must be one of {SCENARIOS}, got {kind!r}")
    if not tasks:
        raise InvalidPlan("a scenario needs at least one target task")
    if kind == "task" and len(tasks) < 2:
        raise InvalidPlan("a task-incremental scenario needs at least two tasks")
    for t in tasks:
        if t.train_y.size == 0:
            raise InvalidPlan(f"target task {t.name!r} has no training data")

    stages = []
    if kind == "data":
        orders = [make_rng(seed, 0, i).permutation(t.train_y.size) for i, t in enumerate(tasks)]
        for s, frac in enumerate(DATA_FRACTIONS):
            rows = {i: order[:max(1, int(np.floor(frac * order.size + 0.5)))] for i, order in enumerate(orders)}
            stages.append(Stage(s, rows))
    elif kind == "class":
        chunks = []
        for i, t in enumerate(tasks):
            classes = make_rng(seed, 1, i).permutation(np.unique(t.train_y))
            if classes.size < CLASS_STAGES:
                raise InvalidPlan(f"task {t.name!r} has {classes.size} classes, fewer than {CLASS_STAGES} stages")
            bounds = [int(np.floor(classes.size * (s + 1) / CLASS_STAGES + 0.5)) for s in range(CLASS_STAGES)]
            starts = [0] + bounds[:-1]
            chunks.append([np.flatnonzero(np.isin(t.train_y, classes[a:b])) for a, b in zip(starts, bounds)])
        for s in range(CLASS_STAGES):
            rows = {i: np.concatenate(task_chunks[:s + 1]) for i, task_chunks in enumerate(chunks)}
            stages.append(Stage(s, rows))
    else:
        for s in range(len(tasks)):
            rows = {i: np.arange(t.train_y.size if i <= s else 0, dtype=np.int64) for i, t in enumerate(tasks)}
            stages.append(Stage(s, rows))
    return ScenarioPlan(kind, tasks, stages, seed)


## Reports

@dataclass
class StageReport:
    stage_index: int
    tasks: List[dict]
    target_avg: Optional[float]
    zeroshot_avg: Optional[float]
    seen_acc: Optional[float]
    unseen_acc: Optional[float]
    insert_wall_time: float
    train_wall_time: float

    def to_dict(self) -> dict:
        return {
            "stage": self.stage_index,
            "tasks": self.tasks,
            "target_avg": self.target_avg,
            "zeroshot_avg": self.zeroshot_avg,
            "seen_acc": self.seen_acc,
            "unseen_acc": self.unseen_acc,
            "insert_wall_time": self.insert_wall_time,
            "train_wall_time": self.train_wall_time,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StageReport":
        try:
            return cls(int(d["stage"]), list(d["tasks"]), d.get("target_avg"), d.get("zeroshot_avg"),
                       d.get("seen_acc"), d.get("unseen_acc"),
                       float(d.get("insert_wall_time", 0.0)), float(d.get("train_wall_time", 0.0)))
        except (KeyError, TypeError, ValueError) as e:
            raise MalformedReport(f"bad stage record: {e}") from e

    def task_accuracy(self, name: str) -> Optional[float]:
        for entry in self.tasks:
            if entry["task"] == name and entry["kind"] == "target":
                return entry["metrics"]["accuracy"]
        return None


@dataclass
class FlexibleReport:
    protocol: str
    target_acc: Optional[float]
    zeroshot_acc: Optional[float]
    average: Optional[float]
    splits: List[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "protocol": self.protocol,
            "target_acc": self.target_acc,
            "zeroshot_acc": self.zeroshot_acc,
            "average": self.average,
            "splits": self.splits,
        }


def _mean(values) -> Optional[float]:
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


def _accuracy(correct: np.ndarray) -> Optional[float]:
    return float(correct.mean()) if correct.size else None


## Running

def build_model(method: str, labels: LabelTable, knn_cfg: Optional[KnnConfig] = None,
                train_cfg: Optional[TrainConfig] = None, tree_cfg: Optional[TreeConfig] = None):
    """Fresh exemplar model for method, None for zero-shot"""
    if method == "zs":
        return None
    if method == "knn":
        return KnnModel(labels, knn_cfg)
    if method == "linprobe":
        return LinProbeModel(labels, train_cfg)
    if method == "treeprobe":
        return TreeProbeModel(labels, tree_cfg)
    raise InvalidConfig(f"method must be one of {METHODS}, got {method!r}")


class ContinualRun:
    """Drives one method through the stages of a scenario.

    Data- and class-incremental scenarios keep one model per target task; a
    task-incremental scenario shares one model across all tasks. Label ids are
    global: every target and zero-shot task gets an offset into one merged table.
    """

    def __init__(self, plan: ScenarioPlan, method: str, fusion: Optional[FusionConfig] = None,
                 zeroshot_tasks: Sequence[TaskDataset] = (), knn_cfg: Optional[KnnConfig] = None,
                 train_cfg: Optional[TrainConfig] = None, tree_cfg: Optional[TreeConfig] = None,
                 zs_cfg: Optional[ZeroShotConfig] = None, long_tail: bool = False):
        if method not in METHODS:
            raise InvalidConfig(f"method must be one of {METHODS}, got {method!r}")
        self.plan = plan
        self.method = method
        self.fusion = fusion or FusionConfig()
        self.zeroshot_tasks = list(zeroshot_tasks)
        self.zs_cfg = zs_cfg or ZeroShotConfig()
        self.long_tail = long_tail

        self.labels, offsets = LabelTable.merge([t.labels for t in plan.tasks + self.zeroshot_tasks])
        self.target_offsets = offsets[:len(plan.tasks)]
        self.zeroshot_offsets = offsets[len(plan.tasks):]
        # query embeddings normalized once
        self._queries = {id(t): normalize_rows(t.test_x) if t.test_x.shape[0] else t.test_x
                         for t in plan.tasks + self.zeroshot_tasks}

        n_models = 1 if plan.kind == "task" else len(plan.tasks)
        self.models = [build_model(method, self.labels, knn_cfg, train_cfg, tree_cfg) for _ in range(n_models)]
        self._ingested = [0] * len(plan.tasks)
        self.reports: List[StageReport] = []

    def model_for(self, task_index: int):
        return self.models[0 if self.plan.kind == "task" else task_index]

    @property
    def final_model(self):
        return self.models[-1]

    def run(self) -> List[StageReport]:
        for stage in self.plan.stages:
            try:
                self.reports.append(self.run_stage(stage))
            except Exception as e:
                raise ScenarioAborted(stage.index, list(self.reports), e) from e
        return self.reports

    def run_stage(self, stage: Stage) -> StageReport:
        insert_time, train_time = 0.0, 0.0
        touched = set()
        for t, task in enumerate(self.plan.tasks):
            rows = stage.rows.get(t, np.empty(0, dtype=np.int64))
            new = rows[self._ingested[t]:]
            model = self.model_for(t)
            if model is None or new.size == 0:
                self._ingested[t] = rows.size
                continue
            start = high_acc_clock()
            model.add(task.train_x[new], task.train_y[new] + self.target_offsets[t])
            insert_time += high_acc_clock() - start
            self._ingested[t] = rows.size
            touched.add(id(model))
        for model in self.models:
            if model is not None and id(model) in touched:
                start = high_acc_clock()
                model.fit()
                train_time += high_acc_clock() - start

        report = self.evaluate(stage.index, insert_time, train_time)
        logger.info("stage %d: target %.4f zero-shot %s", stage.index,
                    report.target_avg if report.target_avg is not None else float("nan"),
                    "n/a" if report.zeroshot_avg is None else f"{report.zeroshot_avg:.4f}")
        return report

    def predict_labels(self, model, queries: np.ndarray, cand: CandidateSet) -> np.ndarray:
        """Fused predictions of model over cand; zero-shot when there is no usable model"""
        if queries.shape[0] == 0:
            return np.empty(0, dtype=np.int64)
        if model is None or len(model) == 0 or self.fusion.mode == "zs":
            return zeroshot_predict_batch(queries, cand, self.zs_cfg)
        fusion = self.fusion
        if self.long_tail:
            fusion = FusionConfig(fusion.mode, fusion.alpha, long_tail_mask(model.store.label_counts()))
        outputs = model.predict_batch(queries, cand.label_ids)
        p_z = zeroshot_proba_matrix(queries, cand, self.zs_cfg)
        covered = model.covered_labels
        return np.array([fused_predict(o, q, cand, covered, fusion, self.zs_cfg, p).argmax_label
                         for o, q, p in zip(outputs, queries, p_z)], dtype=np.int64)

    def score(self, model, task: TaskDataset, offset: int, cand: Optional[CandidateSet] = None,
              rows: Optional[np.ndarray] = None):
        """Correctness of every test sample of task, plus which samples have covered labels."""
        if cand is None:
            cand = CandidateSet(offset + task.labels.label_ids, self.labels)
        queries, truth = self._queries[id(task)], task.test_y + offset
        if rows is not None:
            queries, truth = queries[rows], truth[rows]
        predicted = self.predict_labels(model, queries, cand)
        covered = model.covered_labels if model is not None else frozenset()
        seen = np.isin(truth, np.fromiter(covered, dtype=np.int64)) if covered else np.zeros(truth.size, dtype=bool)
        return predicted == truth, seen

    def _metrics(self, correct: np.ndarray, seen: np.ndarray) -> dict:
        return {
            "accuracy": _accuracy(correct),
            "seen_acc": _accuracy(correct[seen]),
            "unseen_acc": _accuracy(correct[~seen]),
        }

    def evaluate(self, stage_index: int, insert_time: float = 0.0, train_time: float = 0.0) -> StageReport:
        entries, target_accs, zs_accs = [], [], []
        pooled_correct, pooled_seen = [], []
        for t, task in enumerate(self.plan.tasks):
            correct, seen = self.score(self.model_for(t), task, self.target_offsets[t])
            metrics = self._metrics(correct, seen)
            entries.append({"task": task.name, "kind": "target", "metrics": metrics})
            target_accs.append(metrics["accuracy"])
            pooled_correct.append(correct)
            pooled_seen.append(seen)
        for z, task in enumerate(self.zeroshot_tasks):
            per_model = [self.score(m, task, self.zeroshot_offsets[z]) for m in self.models]
            metrics = {
                key: _mean([self._metrics(c, s)[key] for c, s in per_model])
                for key in ("accuracy", "seen_acc", "unseen_acc")
            }
            entries.append({"task": task.name, "kind": "zeroshot", "metrics": metrics})
            zs_accs.append(metrics["accuracy"])

        correct = np.concatenate(pooled_correct)
        seen = np.concatenate(pooled_seen)
        return StageReport(
            stage_index=stage_index,
            tasks=entries,
            target_avg=_mean(target_accs),
            zeroshot_avg=_mean(zs_accs),
            seen_acc=_accuracy(correct[seen]),
            unseen_acc=_accuracy(correct[~seen]),
            insert_wall_time=insert_time,
            train_wall_time=train_time,
        )


def run_scenario(plan: ScenarioPlan, method: str, fusion: Optional[FusionConfig] = None,
                 zeroshot_tasks: Sequence[TaskDataset] = (), **configs) -> List[StageReport]:
    """Run every stage of plan; a failing stage raises ScenarioAborted with the finished reports."""
    return ContinualRun(plan, method, fusion, zeroshot_tasks, **configs).run()


## Flexible inference

def _sample_labels(pool: np.ndarray, seed: int, *salt: int) -> np.ndarray:
    if pool.size <= FLEX_LABELS:
        return pool.copy()
    return np.sort(make_rng(seed, *salt).choice(pool, size=FLEX_LABELS, replace=False))


def flexible_inference_eval(run: ContinualRun, protocol: str, seed: int = 0) -> FlexibleReport:
    """Evaluate a trained task-incremental run under a flexible candidate-set protocol.

    zs:       every task over its own labels.
    union:    target tasks over the union of all target labels.
    union-zs: target tasks over the target union plus up to 100 sampled zero-shot labels;
              zero-shot samples of the sampled labels over the same set.
    mix-zs:   the target union cut into five splits, each joined with sampled zero-shot
              labels and scored on up to 100 test samples per class.
    """
    if protocol not in PROTOCOLS:
        raise InvalidProtocol(f"protocol must be one of {PROTOCOLS}, got {protocol!r}")
    if run.plan.kind != "task":
        raise InvalidPlan("flexible inference runs on a task-incremental scenario")
    model = run.final_model
    target_union = np.concatenate([off + t.labels.label_ids for t, off in zip(run.plan.tasks, run.target_offsets)])
    zs_pool = (np.concatenate([off + t.labels.label_ids for t, off in zip(run.zeroshot_tasks, run.zeroshot_offsets)])
               if run.zeroshot_tasks else np.empty(0, dtype=np.int64))

    if protocol in ("zs", "union"):
        union_cand = CandidateSet(target_union, run.labels) if protocol == "union" else None
        target = [_accuracy(run.score(model, t, off, union_cand)[0])
                  for t, off in zip(run.plan.tasks, run.target_offsets)]
        zeroshot = [_accuracy(run.score(model, t, off)[0])
                    for t, off in zip(run.zeroshot_tasks, run.zeroshot_offsets)]
        target_acc, zs_acc = _mean(target), _mean(zeroshot)
        return FlexibleReport(protocol, target_acc, zs_acc, _mean([target_acc, zs_acc]))

    if protocol == "union-zs":
        sampled = _sample_labels(zs_pool, seed, 2)
        cand = CandidateSet(np.concatenate([target_union, sampled]), run.labels)
        target = [_accuracy(run.score(model, t, off, cand)[0])
                  for t, off in zip(run.plan.tasks, run.target_offsets)]
        zeroshot = []
        for t, off in zip(run.zeroshot_tasks, run.zeroshot_offsets):
            rows = np.flatnonzero(np.isin(t.test_y + off, sampled))
            if rows.size:
                zeroshot.append(_accuracy(run.score(model, t, off, cand, rows)[0]))
        target_acc, zs_acc = _mean(target), _mean(zeroshot)
        return FlexibleReport(protocol, target_acc, zs_acc, _mean([target_acc, zs_acc]),
                              [{"labels": cand.label_ids.tolist(), "accuracy": _mean([target_acc, zs_acc])}])

    # mix-zs
    shuffled = make_rng(seed, 3).permutation(target_union)
    splits, target_all, zs_all = [], [], []
    sources = [(t, off, True) for t, off in zip(run.plan.tasks, run.target_offsets)] + \
              [(t, off, False) for t, off in zip(run.zeroshot_tasks, run.zeroshot_offsets)]
    for s, part in enumerate(np.array_split(shuffled, MIX_SPLITS)):
        if part.size == 0:
            continue
        sampled = _sample_labels(zs_pool, seed, 4, s)
        cand = CandidateSet(np.concatenate([np.sort(part), sampled]), run.labels)
        tgt_correct, zs_correct = [], []
        for t, off, is_target in sources:
            truth = t.test_y + off
            rows = np.flatnonzero(np.isin(truth, part if is_target else sampled))
            rows = _cap_per_class(rows, truth, make_rng(seed, 5, s, off))
            if rows.size:
                correct = run.score(model, t, off, cand, rows)[0]
                (tgt_correct if is_target else zs_correct).append(correct)
        tgt = np.concatenate(tgt_correct) if tgt_correct else np.empty(0, dtype=bool)
        zsc = np.concatenate(zs_correct) if zs_correct else np.empty(0, dtype=bool)
        target_all.append(_accuracy(tgt))
        zs_all.append(_accuracy(zsc))
        splits.append({
            "split": s,
            "target_labels": np.sort(part).tolist(),
            "zeroshot_labels": sampled.tolist(),
            "accuracy": _accuracy(np.concatenate([tgt, zsc])),
        })
    return FlexibleReport(protocol, _mean(target_all), _mean(zs_all), _mean([sp["accuracy"] for sp in splits]), splits)


def _cap_per_class(rows: np.ndarray, truth: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """At most FLEX_SAMPLES_PER_CLASS rows per label, drawn without replacement."""
    kept = []
    for label in np.unique(truth[rows]):
        members = rows[truth[rows] == label]
        if members.size > FLEX_SAMPLES_PER_CLASS:
            members = np.sort(rng.choice(members, size=FLEX_SAMPLES_PER_CLASS, replace=False))
        kept.append(members)
    return np.sort(np.concatenate(kept)) if kept else rows


## Metrics

def transfer_avg_last_matrix(acc: np.ndarray):
    """Transfer, Avg and Last of a (stage x task) accuracy matrix.

    Task j is trained at stage j. Transfer averages, over tasks j >= 1, the
    accuracy of task j at the stages before j. Avg averages each task's column
    mean; Last is the mean of the final row.
    """
    acc = np.asarray(acc, dtype=np.float64)
    if acc.ndim != 2 or acc.shape[0] != acc.shape[1] or acc.size == 0:
        raise ShapeMismatch(f"expected a square stage x task matrix, got shape {acc.shape}")
    n = acc.shape[0]
    transfer = _mean([float(np.mean(acc[:j, j])) for j in range(1, n)])
    avg = float(np.mean(acc.mean(axis=0)))
    last = float(np.mean(acc[-1]))
    return transfer, avg, last


def accuracy_matrix(reports: Sequence[StageReport], task_order: Sequence[str]) -> np.ndarray:
    if len(reports) != len(task_order):
        raise ShapeMismatch(f"{len(reports)} stages for {len(task_order)} tasks")
    acc = np.empty((len(reports), len(task_order)))
    for i, report in enumerate(reports):
        for j, name in enumerate(task_order):
            value = report.task_accuracy(name)
            if value is None:
                raise ShapeMismatch(f"stage {report.stage_index} has no accuracy for task {name!r}")
            acc[i, j] = value
    return acc


def transfer_avg_last(reports: Sequence[StageReport], task_order: Sequence[str]):
    """(transfer, avg, last) of a task-incremental run; transfer is None for a single task"""
    return transfer_avg_last_matrix(accuracy_matrix(reports, task_order))


def relative_to_zeroshot(reports: Sequence[StageReport], baseline: Sequence[StageReport]) -> List[dict]:
    """Each stage's averages divided by the zero-shot run's at the same stage."""
    if len(reports) != len(baseline):
        raise ShapeMismatch(f"{len(reports)} stages against a baseline of {len(baseline)}")

    def ratio(a, b):
        return None if a is None or not b else a / b

    return [
        {
            "stage": r.stage_index,
            "target_rel": ratio(r.target_avg, b.target_avg),
            "zeroshot_rel": ratio(r.zeroshot_avg, b.zeroshot_avg),
        }
        for r, b in zip(reports, baseline)
    ]


## Benchmarks

BenchRow = namedtuple("BenchRow", ["method", "psi", "n", "median_us", "mean_us", "trials"])


def bench_insert_latency(method: str, sizes: Sequence[int], psi: Optional[int] = None,
                         trials: Optional[int] = None, samples: Optional[int] = None,
                         dim: int = 64, classes: int = 100, seed: int = 0,
                         train_cfg: Optional[TrainConfig] = None) -> List[BenchRow]:
    """Time the incorporation of one exemplar (add + retrain) at each store size.

    For every n the model is filled with n synthetic exemplars, one warm-up
    incorporation is discarded, then trials x samples single incorporations
    are timed.
    """
    if method not in METHODS or method == "zs":
        raise InvalidConfig(f"method must be one of {METHODS[1:]}, got {method!r}")
    psi = psi if psi is not None else _cfg("tree.psi", 50000, int)
    trials = trials if trials is not None else _cfg("bench.trials", 5, int)
    samples = samples if samples is not None else _cfg("bench.samples", 5, int)
    if trials < 1 or samples < 1:
        raise InvalidConfig("'trials' and 'samples' must be >= 1")
    if not sizes or min(sizes) < 1:
        raise InvalidConfig(f"sizes must be positive, got {list(sizes)}")

    rows = []
    for n in sizes:
        extra = 1 + trials * samples
        per_class = -(-(n + extra) // classes)
        data = gen_synthetic(SynthConfig(dim=dim, classes=classes, per_class_train=per_class,
                                         per_class_test=0, seed=seed, name="bench"))
        order = make_rng(seed, 6, n).permutation(data.train_y.size)[:n + extra]
        x, y = data.train_x[order], data.train_y[order]

        tree_cfg = TreeConfig(node_capacity_psi=psi, seed=seed, train_cfg=train_cfg or TrainConfig())
        model = build_model(method, data.labels, train_cfg=train_cfg, tree_cfg=tree_cfg)
        model.add(x[:n], y[:n])
        model.fit()

        times = []
        for i in range(n, n + extra):
            start = high_acc_clock()
            model.add(x[i:i + 1], y[i:i + 1])
            model.fit()
            elapsed = high_acc_clock() - start
            if i > n:
                times.append(elapsed * 1e6)
        row = BenchRow(method, psi, n, statistics.median(times), statistics.fmean(times), len(times))
        logger.info("bench %s n=%d: median %.1f us", method, n, row.median_us)
        rows.append(row)
    return rows
