"""Command-line entry point: evaluate, search, scale, schedule, correlate."""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import pandas as pd

from vitgauge import __version__, seeding
from vitgauge.artifacts import ArtifactWriter, read_config_header, read_csv
from vitgauge.complexity import REWARD_METRICS, ProxyEvaluator, report_rows
from vitgauge.config import OUT_DIR_ENV, ConfigError, RunConfig, load_config
from vitgauge.dataset import make_dataset
from vitgauge.errors import ConfigurationError, EvaluationError
from vitgauge.network import build_network
from vitgauge.retokenize import parse_phases, savings_report
from vitgauge.scaling import run_autoscale, select_nearest, trend_agreement
from vitgauge.search import (
    SearchResult,
    checkpoint_document,
    load_checkpoint,
    metric_evaluator,
    rescore_top,
    run_search,
)
from vitgauge.study import ROW_COLUMNS, correlation_study
from vitgauge.topology import SEED_TOPOLOGY, ScaleSpec, SearchSpace, TopologyError, decode_with_meta, encode, spec_hash

logger = logging.getLogger(__name__)

EXIT_CONFIG = 2
EXIT_EVALUATION = 3

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def main(argv: Optional[List[str]] = None) -> int:
    """Run one sub-command and return its exit code."""
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(args.verbose - args.quiet)
    try:
        config = _resolve_config(args)
        logger.info("vitgauge %s: %s", __version__, args.command)
        args.handler(args, config)
    except ConfigurationError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except EvaluationError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_EVALUATION
    logger.info("%s finished", args.command)
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="INI file overriding the defaults")
    common.add_argument("--seed", type=int, help="global seed")
    common.add_argument("--jobs", type=int, help="worker threads")
    common.add_argument("--out-dir", help=f"output directory (default: ${OUT_DIR_ENV} or ./runs)")
    common.add_argument("-v", "--verbose", action="count", default=0)
    common.add_argument("-q", "--quiet", action="count", default=0)

    parser = argparse.ArgumentParser(
        prog="vitgauge",
        description="Training-free design, ranking and scaling of vision transformers.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    commands = parser.add_subparsers(dest="command", required=True)

    evaluate = commands.add_parser("evaluate", parents=[common], help="score one architecture document")
    evaluate.add_argument("arch", type=Path)
    evaluate.add_argument("--seeds", type=int)
    evaluate.add_argument("--samples", type=int)
    evaluate.set_defaults(handler=cmd_evaluate)

    search = commands.add_parser("search", parents=[common], help="REINFORCE topology search")
    search.add_argument("--steps", type=int)
    search.add_argument("--resume", action="store_true", help="continue from policy.json in the output directory")
    search.set_defaults(handler=cmd_search)

    scale = commands.add_parser("scale", parents=[common], help="greedy depth/width scaling")
    scale.add_argument("arch", type=Path, nargs="?", help="seed architecture; the seed topology when omitted")
    scale.add_argument("--budget", type=float)
    scale.add_argument("--random-scaling", action="store_true", default=None)
    scale.add_argument("--runs", type=int)
    scale.add_argument("--select", help="comma-separated parameter targets, e.g. 5e5,1e6")
    scale.set_defaults(handler=cmd_scale)

    schedule = commands.add_parser("schedule", parents=[common], help="re-tokenization FLOPs savings")
    schedule.add_argument("arch", type=Path)
    schedule.add_argument("--phases", required=True, help='e.g. "1-40:4,41-70:2,71-300:1"')
    schedule.add_argument("--epochs", type=int, help="total epochs (default: end of the last phase)")
    schedule.add_argument("--input-res", type=int, help="resolution FLOPs are counted at (default: 256)")
    schedule.set_defaults(handler=cmd_schedule)

    correlate = commands.add_parser("correlate", parents=[common], help="metric vs accuracy correlation study")
    correlate.add_argument("--topologies", type=int)
    correlate.add_argument("--epochs", type=int)
    correlate.set_defaults(handler=cmd_correlate)
    return parser


def cmd_evaluate(args, config: RunConfig) -> None:
    spec, scale, _ = _read_arch(args.arch)
    protocol = config.protocol.to_protocol(config.seed)
    evaluator = ProxyEvaluator(protocol, input_res=config.protocol.input_res, jobs=config.jobs)
    report = evaluator(spec, scale)
    key = spec_hash(spec, scale)

    writer = _writer(config, "evaluate")
    writer.write_csv("report.csv", report_rows(report, key))
    writer.write_json("summary.json", {"spec_hash": key, **report.as_dict()})
    writer.finish()
    print(json.dumps({"spec_hash": key, **report.as_dict()}))


def cmd_search(args, config: RunConfig) -> None:
    writer = _writer(config, "search")
    policy = history = previous = None
    steps = config.search.steps
    checkpoint = writer.path("policy.json")
    if args.resume and checkpoint.exists():
        policy, history = load_checkpoint(checkpoint)
        steps -= policy.t
        if writer.path("trajectory.csv").exists():
            previous = read_csv(writer.path("trajectory.csv"))
        logger.info("Resuming search at step %d", policy.t)

    protocol = config.protocol.to_protocol(config.seed, seeds=config.search.seeds, metrics=REWARD_METRICS)
    proxy = ProxyEvaluator(protocol, input_res=config.protocol.input_res, jobs=config.jobs)
    scale = config.search.scale
    if steps > 0:
        result = run_search(
            SearchSpace(),
            metric_evaluator(proxy, scale),
            steps=steps,
            seed=config.seed,
            learning_rate=config.search.learning_rate,
            baseline_decay=config.search.baseline_decay,
            policy=policy,
            history=history,
            log_every=config.search.log_every,
        )
    else:
        result = SearchResult(policy.argmax(), pd.DataFrame(), policy, history)

    trajectory = result.trajectory if previous is None else pd.concat([previous, result.trajectory], ignore_index=True)
    writer.write_csv("trajectory.csv", trajectory)
    writer.write_json("policy.json", checkpoint_document(result.policy, result.history))
    writer.write_json("best.json", json.loads(encode(result.best, scale, config.seed)))
    if config.search.rescore_top > 0:
        full = metric_evaluator(proxy.with_protocol(seeds=config.protocol.seeds), scale)
        writer.write_csv("rescored.csv", rescore_top(trajectory, full, config.search.rescore_top))
    writer.finish()
    print(f"best {spec_hash(result.best)}: {result.best.to_choices()}")


def cmd_scale(args, config: RunConfig) -> None:
    if args.arch is not None:
        topology, seed_scale, _ = _read_arch(args.arch)
    else:
        topology, seed_scale = SEED_TOPOLOGY, ScaleSpec(depths=(1, 1, 1, 1), width=config.scale.width)
    protocol = config.protocol.to_protocol(config.seed, seeds=config.scale.seeds, metrics=REWARD_METRICS)
    proxy = ProxyEvaluator(protocol, input_res=config.protocol.input_res)

    def evaluator(spec, scale):
        report = proxy(spec, scale)
        return report.LE, report.kappa_theta

    writer = _writer(config, "scale")
    budget = int(config.scale.budget)
    if config.scale.random_scaling:
        for run in range(config.scale.runs):
            trajectory = run_autoscale(topology, seed_scale, budget, evaluator, random_scaling=True,
                                       seed=seeding.derive_seed(config.seed, "scaling", run))
            writer.write_csv(f"trajectory_random_{run:02d}.csv", trajectory.to_frame())
        writer.finish()
        return

    trajectory = run_autoscale(topology, seed_scale, budget, evaluator, jobs=config.jobs)
    writer.write_csv("trajectory.csv", trajectory.to_frame())
    for step, spec, scale in trajectory.architectures():
        writer.write_json(f"arch/step_{step:03d}.json", json.loads(encode(spec, scale, config.seed)))
    if config.scale.select:
        writer.write_csv("selection.csv", select_nearest(trajectory, config.scale.select))
    agreement = trend_agreement(trajectory)
    writer.write_json("summary.json", {
        "steps": len(trajectory.steps) - 1,
        "params": trajectory.final.params,
        "trend_agreement": agreement,
    })
    writer.finish()
    print(f"{len(trajectory.steps) - 1} steps, final params {trajectory.final.params}, trend agreement {agreement:.2f}")


def cmd_schedule(args, config: RunConfig) -> None:
    spec, scale, _ = _read_arch(args.arch)
    input_res = config.schedule.input_res
    schedule = parse_phases(args.phases, spec.kernels[0])
    total = args.epochs or schedule.total_epochs
    net = build_network(spec, scale, seed=config.seed, input_res=input_res)
    row = savings_report(schedule, total, net)

    writer = _writer(config, "schedule")
    writer.write_json("schedule.json", {"total_epochs": total, "phases": schedule.to_document()})
    writer.write_csv("savings.csv", pd.DataFrame([row]))
    writer.finish()
    print(f"FLOPs saving: {row['saving_pct']:.1f}%")


def cmd_correlate(args, config: RunConfig) -> None:
    study = config.study
    dataset = make_dataset(
        kind=study.dataset,
        seed=config.seed,
        resolution=config.protocol.input_res,
        classes=study.classes,
        samples=study.samples,
        val_fraction=study.val_fraction,
        root=Path(study.root) if study.root else None,
    )
    writer = _writer(config, "correlate")
    rows_path = writer.path("study_rows.csv")
    completed = None
    if rows_path.exists():
        _check_resumable(rows_path, config)
        completed = read_csv(rows_path)
    result = correlation_study(
        SearchSpace(),
        study.topologies,
        dataset,
        config.protocol.to_protocol(config.seed),
        train_config=config.train,
        scale=ScaleSpec(depths=(1, 1, 1, 1), width=study.width),
        seed=config.seed,
        jobs=config.jobs,
        completed=completed,
        on_row=lambda row: writer.append_csv_row("study_rows.csv", row, ROW_COLUMNS),
    )
    writer.write_csv("study_rows.csv", result.rows)
    writer.write_csv("taus.csv", result.taus)
    writer.write_json("summary.json", {"failures": result.failures, "topologies": len(result.rows)})
    writer.finish()
    print(result.taus.to_string(index=False))


def _check_resumable(path: Path, config: RunConfig) -> None:
    """Refuse to extend rows written under a different recipe; the topology count may grow."""
    previous = read_config_header(path)
    current = json.loads(json.dumps(config.to_dict()))
    previous.get("study", {}).pop("topologies", None)
    current["study"].pop("topologies")
    changed = [key for key in ("seed", "protocol", "train", "study") if previous.get(key) != current[key]]
    if changed:
        names = ", ".join(changed)
        raise ConfigError(f"{path} was written with different {names} settings; use another --out-dir")


def _resolve_config(args) -> RunConfig:
    config = load_config(args.config)
    config = config.override(seed=args.seed, jobs=args.jobs, out_dir=args.out_dir)
    config = config.override("train", seed=config.seed)
    if args.command == "evaluate":
        config = config.override("protocol", seeds=args.seeds, samples=args.samples)
    elif args.command == "search":
        config = config.override("search", steps=args.steps)
    elif args.command == "scale":
        select = _parse_targets(args.select) if args.select else None
        budget = int(args.budget) if args.budget is not None else None
        config = config.override("scale", budget=budget, random_scaling=args.random_scaling,
                                 runs=args.runs, select=select)
    elif args.command == "schedule":
        config = config.override("schedule", input_res=args.input_res)
    elif args.command == "correlate":
        config = config.override("study", topologies=args.topologies)
        config = config.override("train", epochs=args.epochs)
    if config.jobs < 1:
        raise ConfigurationError(f"--jobs must be >= 1, got {config.jobs}")
    return config


def _parse_targets(text: str):
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError as e:
        raise ConfigurationError(f"Invalid --select targets '{text}': {e}") from e


def _read_arch(path: Path):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise TopologyError(f"Cannot read architecture document {path}: {e}") from e
    return decode_with_meta(text)


def _writer(config: RunConfig, command: str) -> ArtifactWriter:
    return ArtifactWriter(Path(config.out_dir) / command, config.to_dict(), command)


def _setup_logging(verbosity: int) -> None:
    level = logging.DEBUG if verbosity > 0 else logging.WARNING if verbosity < 0 else logging.INFO
    logging.basicConfig(level=level, format=LOG_FORMAT, stream=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
