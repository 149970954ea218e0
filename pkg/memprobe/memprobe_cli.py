import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from typing import List, Optional

from .memprobe import (
    DataError,
    DimensionMismatch,
    InvalidConfig,
    InvalidPlan,
    InvalidProtocol,
    MalformedReport,
    MemprobeError,
    ScenarioAborted,
    __version__,
    _cfg,
    load_config_file,
)
from .memprobe_files import atomic_write, load_manifest, read_report, save_snapshot, write_manifest, write_report
from .memprobe_fusion import FUSION_MODES, FusionConfig, ZeroShotConfig
from .memprobe_harness import (
    METHODS,
    PROTOCOLS,
    SCENARIOS,
    ContinualRun,
    SynthConfig,
    bench_insert_latency,
    flexible_inference_eval,
    gen_synthetic,
    plan_scenario,
    transfer_avg_last,
)
from .memprobe_knn import KNN_VARIANTS, KnnConfig
from .memprobe_linear import TrainConfig
from .memprobe_tree import TreeConfig

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_DATA = 3

BENCH_COLUMNS = ["method", "psi", "n", "median_us", "mean_us", "trials"]
EXPORT_COLUMNS = ["stage", "task", "metric", "value"]


@dataclass
class RunConfig:
    """Everything a `memprobe run` needs; echoed into the report."""

    scenario: str
    method: str
    fusion: str
    tasks: List[str]
    zeroshot_tasks: List[str] = field(default_factory=list)
    out: Optional[str] = None
    k: int = 9
    psi: int = 50000
    regularization_c: float = 0.316
    max_iterations: int = 5000
    tau: float = 100.0
    knn_variant: str = "wavg"
    alpha: float = 0.5
    seed: int = 0
    long_tail: bool = False
    tree_ensemble: bool = True
    snapshot: Optional[str] = None
    flexible: List[str] = field(default_factory=list)

    def __post_init__(self):
        check_run_config(self)


def check_run_config(cfg: RunConfig):
    if cfg.scenario not in SCENARIOS:
        raise InvalidConfig(f"'scenario' must be one of {SCENARIOS}, got {cfg.scenario!r}")
    if cfg.method not in METHODS:
        raise InvalidConfig(f"'method' must be one of {METHODS}, got {cfg.method!r}")
    if cfg.fusion not in FUSION_MODES:
        raise InvalidConfig(f"'fusion' must be one of {FUSION_MODES}, got {cfg.fusion!r}")
    if not cfg.tasks:
        raise InvalidConfig("at least one target task manifest is required")
    for protocol in cfg.flexible:
        if protocol not in PROTOCOLS:
            raise InvalidProtocol(f"flexible protocol must be one of {PROTOCOLS}, got {protocol!r}")
    if cfg.flexible and cfg.scenario != "task":
        raise InvalidConfig("--flexible needs --scenario task")
    if cfg.snapshot and cfg.method == "zs":
        raise InvalidConfig("the zero-shot method has no model to snapshot")


def _split_list(value: Optional[str]) -> List[str]:
    return [item.strip() for item in value.split(",") if item.strip()] if value else []


def _pick(flag, key: str, default, typ, config: Optional[dict]):
    """Flag value if given, else the --config file value, else the packaged default."""
    if flag is not None:
        return flag
    packaged = _cfg(key, default, typ)
    return _cfg(key, packaged, typ, config=config) if config else packaged


def build_run_config(args) -> RunConfig:
    file_cfg = None
    if args.config:
        file_cfg = load_config_file(args.config)
        if not isinstance(file_cfg, dict):
            raise InvalidConfig(f"cannot load config file {args.config}")
    return RunConfig(
        scenario=args.scenario,
        method=args.method,
        fusion=_pick(args.fusion, "fusion.mode", "aim-emb", str, file_cfg),
        tasks=_split_list(args.tasks),
        zeroshot_tasks=_split_list(args.zs),
        out=args.out,
        k=_pick(args.k, "knn.k", 9, int, file_cfg),
        psi=_pick(args.psi, "tree.psi", 50000, int, file_cfg),
        regularization_c=_pick(args.C, "linear.regularization_c", 0.316, float, file_cfg),
        max_iterations=_pick(args.max_iter, "linear.max_iterations", 5000, int, file_cfg),
        tau=_pick(args.tau, "zeroshot.tau", 100.0, float, file_cfg),
        knn_variant=_pick(args.knn_variant, "knn.variant", "wavg", str, file_cfg),
        alpha=_pick(args.alpha, "fusion.alpha", 0.5, float, file_cfg),
        seed=_pick(args.seed, "run.seed", 0, int, file_cfg),
        long_tail=args.long_tail,
        tree_ensemble=False if args.no_ensemble else _pick(None, "tree.ensemble", True, bool, file_cfg),
        snapshot=args.snapshot,
        flexible=_split_list(args.flexible),
    )


def gen_synth_cli(args) -> int:
    cfg = SynthConfig(
        dim=args.dim,
        classes=args.classes,
        per_class_train=args.per_class,
        per_class_test=args.per_class_test,
        intra_class_sigma=args.sigma,
        text_offset_sigma=args.text_sigma,
        seed=args.seed,
        name=args.name,
    )
    path = write_manifest(args.out, gen_synthetic(cfg))
    print(f"wrote {path}")
    return EXIT_OK


def run_cli(args) -> int:
    cfg = build_run_config(args)
    tasks = [load_manifest(p) for p in cfg.tasks]
    zeroshot_tasks = [load_manifest(p) for p in cfg.zeroshot_tasks]
    dims = {t.dim for t in tasks + zeroshot_tasks}
    if len(dims) != 1:
        raise DimensionMismatch(f"task manifests disagree on dim: {sorted(dims)}")

    train_cfg = TrainConfig(cfg.regularization_c, cfg.max_iterations, seed=cfg.seed)
    knn_cfg = KnnConfig(cfg.k, cfg.knn_variant, cfg.tau)
    tree_cfg = TreeConfig(node_capacity_psi=cfg.psi, k=cfg.k, seed=cfg.seed, train_cfg=train_cfg, temperature=cfg.tau,
                          ensemble=cfg.tree_ensemble)
    plan = plan_scenario(tasks, cfg.scenario, cfg.seed)
    run = ContinualRun(plan, cfg.method, FusionConfig(cfg.fusion, cfg.alpha), zeroshot_tasks,
                       knn_cfg=knn_cfg, train_cfg=train_cfg, tree_cfg=tree_cfg,
                       zs_cfg=ZeroShotConfig(cfg.tau), long_tail=cfg.long_tail)

    report = {"version": __version__, "config": asdict(cfg)}
    try:
        reports = run.run()
    except ScenarioAborted as e:
        report["stages"] = [r.to_dict() for r in e.reports]
        report["aborted"] = {"stage": e.stage_index, "error": str(e)}
        if cfg.out:
            write_report(cfg.out, report)
        raise
    report["stages"] = [r.to_dict() for r in reports]

    if cfg.scenario == "task":
        transfer, avg, last = transfer_avg_last(reports, [t.name for t in tasks])
        report["transfer_avg_last"] = {"transfer": transfer, "avg": avg, "last": last}
    if cfg.flexible:
        report["flexible"] = [flexible_inference_eval(run, p, cfg.seed).to_dict() for p in cfg.flexible]

    if cfg.out:
        write_report(cfg.out, report)
        print(f"wrote {cfg.out}")
    else:
        print(_dumps(report))
    if cfg.snapshot:
        save_snapshot(cfg.snapshot, run.final_model)
        print(f"wrote {cfg.snapshot}")
    return EXIT_OK


def _dumps(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True)


def _emit_csv(rows, columns, out: Optional[str]):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    writer.writerows(rows)
    if out:
        atomic_write(out, buf.getvalue().encode("utf-8"))
        print(f"wrote {out}")
    else:
        sys.stdout.write(buf.getvalue())


def bench_cli(args) -> int:
    try:
        sizes = [int(s) for s in _split_list(args.sizes)]
    except ValueError as e:
        raise InvalidConfig(f"--sizes must be comma separated integers: {e}") from e
    if not sizes:
        raise InvalidConfig("--sizes needs at least one size")
    rows = bench_insert_latency(
        args.method, sizes, psi=args.psi, trials=args.trials, samples=args.samples,
        dim=args.dim, seed=args.seed,
    )
    _emit_csv([[r.method, r.psi, r.n, f"{r.median_us:.3f}", f"{r.mean_us:.3f}", r.trials] for r in rows],
              BENCH_COLUMNS, args.out)
    return EXIT_OK


def export_rows(report: dict) -> list:
    """Long-format (stage, task, metric, value) rows of a run report."""
    stages = report.get("stages")
    if not isinstance(stages, list) or not stages:
        raise MalformedReport("report has no stages")
    rows = []
    for stage in stages:
        try:
            index = stage["stage"]
            for entry in stage["tasks"]:
                for metric, value in entry["metrics"].items():
                    if value is not None:
                        rows.append([index, entry["task"], metric, value])
        except (KeyError, TypeError, AttributeError) as e:
            raise MalformedReport(f"bad stage record: {e}") from e
    return rows


def export_cli(args) -> int:
    _emit_csv(export_rows(read_report(args.report)), EXPORT_COLUMNS, args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="memprobe", description="memprobe continual-learning CLI")
    parser.add_argument("--version", action="version", version=f"memprobe version {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="Debug logging")
    sub = parser.add_subparsers(dest="command")

    gen = sub.add_parser("gen-synth", help="Write a synthetic embedding dataset")
    gen.add_argument("--classes", type=int, default=20)
    gen.add_argument("--dim", type=int, default=64)
    gen.add_argument("--per-class", type=int, default=100, help="Training samples per class")
    gen.add_argument("--per-class-test", type=int, default=20)
    gen.add_argument("--sigma", type=float, default=0.2, help="Image noise around the class prototype")
    gen.add_argument("--text-sigma", type=float, default=0.18, help="Text offset from the class prototype")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--name", default="synth")
    gen.add_argument("--out", required=True, help="Output directory")
    gen.set_defaults(func=gen_synth_cli)

    run = sub.add_parser("run", help="Run a continual-learning scenario")
    run.add_argument("--scenario", choices=SCENARIOS, required=True)
    run.add_argument("--method", choices=METHODS, required=True)
    run.add_argument("--fusion", choices=FUSION_MODES)
    run.add_argument("--tasks", required=True, help="Comma separated target task manifests")
    run.add_argument("--zs", help="Comma separated zero-shot task manifests")
    run.add_argument("--seed", type=int)
    run.add_argument("--out", help="Report path (JSON); stdout when omitted")
    run.add_argument("--k", type=int)
    run.add_argument("--psi", type=int, help="Tree node capacity")
    run.add_argument("--no-ensemble", action="store_true", help="TreeProbe: classify with the nearest leaf only")
    run.add_argument("--C", type=float, help="Inverse regularization strength")
    run.add_argument("--max-iter", type=int)
    run.add_argument("--tau", type=float, help="Softmax temperature")
    run.add_argument("--knn-variant", choices=KNN_VARIANTS)
    run.add_argument("--alpha", type=float, help="Blend weight of the avg fusion modes")
    run.add_argument("--long-tail", action="store_true", help="Treat the rarest 2/3 of labels as uncovered")
    run.add_argument("--config", help="yaml file overriding the packaged defaults")
    run.add_argument("--snapshot", help="Save the final model to this .npz file")
    run.add_argument("--flexible", help=f"Comma separated flexible inference protocols {PROTOCOLS}")
    run.set_defaults(func=run_cli)

    bench = sub.add_parser("bench", help="Measure single exemplar incorporation time")
    bench.add_argument("--method", choices=METHODS[1:], default="treeprobe")
    bench.add_argument("--psi", type=int)
    bench.add_argument("--sizes", required=True, help="Comma separated store sizes")
    bench.add_argument("--trials", type=int)
    bench.add_argument("--samples", type=int)
    bench.add_argument("--dim", type=int, default=64)
    bench.add_argument("--seed", type=int, default=0)
    bench.add_argument("--out", help="CSV path; stdout when omitted")
    bench.set_defaults(func=bench_cli)

    export = sub.add_parser("export", help="Flatten a run report into a long CSV")
    export.add_argument("report")
    export.add_argument("--out", help="CSV path; stdout when omitted")
    export.set_defaults(func=export_cli)
    return parser


def exit_code(error: BaseException) -> int:
    if isinstance(error, ScenarioAborted):
        error = error.__cause__ or error
    if isinstance(error, (InvalidConfig, InvalidPlan, InvalidProtocol)):
        return EXIT_CONFIG
    if isinstance(error, (DataError, MalformedReport, DimensionMismatch, OSError)):
        return EXIT_DATA
    return EXIT_FAILURE


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if not getattr(args, "func", None):
        parser.print_help()
        return EXIT_CONFIG

    try:
        return args.func(args)
    except (MemprobeError, OSError) as e:
        print(f"memprobe {args.command}: {e}", file=sys.stderr)
        return exit_code(e)


if __name__ == "__main__":
    sys.exit(main())
