"""fleetwatch command line: simulate, preprocess, train, prioritize, detect, evaluate, report"""
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence
import argparse
import logging
import sys

import orjson

from app.core.config import Settings, _deep_merge, load_settings
from app.core.errors import FleetWatchError, UsageError
from app.core.worker_pool import shutdown_worker_pool
from app.models.catalog import parse_metric
from app.schemas.detection import DistanceKind, EmbeddingSource, Pipeline
from app.schemas.evaluation import EvalReport
from app.schemas.simulation import CorpusSplit
from app.services import harness
from app.services.evaluation import evaluate, render_report, summary_table
from app.services.model_store import ModelStore
from app.services.preprocessing import parse_trace
from app.services.simulator import gen_labeled_corpus, read_manifest, read_truth, write_corpus

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_ALERTS = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fleetwatch", description="Faulty machine detection for distributed training")
    parser.add_argument("--config", type=Path, default=None, help="TOML config file (default: ./fleetwatch.toml if present)")
    parser.add_argument("--run-dir", type=Path, default=None, help="Run directory holding every artifact")
    parser.add_argument("--workers", type=int, default=None)
    parser.add_argument("--log-level", default=None)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="Generate a labeled synthetic corpus")
    p.add_argument("--tasks", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--noise-sigma", type=float, default=None)
    p.add_argument("--train-fraction", type=float, default=None)

    sub.add_parser("preprocess", help="Align and normalize the corpus into the tensor cache")

    p = sub.add_parser("train", help="Train per-metric LSTM-VAE models on the training split")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--metrics", default=None, help="Comma-separated metric names (default: detection set plus GPU extras)")
    p.add_argument("--integrated", action="store_true", help="Also train the multi-metric model used by the int pipeline")

    sub.add_parser("prioritize", help="Learn the metric priority list from the training split")

    p = sub.add_parser("detect", help="Run a detection pipeline")
    _detector_flags(p)
    p.add_argument("--pipeline", type=Pipeline, choices=list(Pipeline), default=Pipeline.VAE)
    p.add_argument("--trace", type=Path, default=None, help="Detect on one trace file instead of the corpus")
    p.add_argument("--task", action="append", default=None, help="Restrict to these corpus task ids")
    p.add_argument("--split", type=CorpusSplit, choices=list(CorpusSplit), default=CorpusSplit.EVAL)
    p.add_argument("--metrics", default=None, help="Comma-separated metric names to scan")
    p.add_argument("--output", type=Path, default=None, help="Alert stream path (default: inside the run directory)")

    p = sub.add_parser("evaluate", help="Score a pipeline's alert stream against ground truth")
    p.add_argument("--pipeline", type=Pipeline, choices=list(Pipeline), default=Pipeline.VAE)
    p.add_argument("--split", type=CorpusSplit, choices=list(CorpusSplit), default=CorpusSplit.EVAL)

    p = sub.add_parser("report", help="Compare pipelines and variants in a markdown report")
    _detector_flags(p)
    p.add_argument("--split", type=CorpusSplit, choices=list(CorpusSplit), default=CorpusSplit.EVAL)
    return parser


def _detector_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--threshold", type=float, default=None, help="Similarity threshold on the normal score")
    p.add_argument("--continuity", type=float, default=None, help="Continuity seconds")
    p.add_argument("--distance", type=DistanceKind, choices=list(DistanceKind), default=None)
    p.add_argument("--embedding", type=EmbeddingSource, choices=list(EmbeddingSource), default=None)
    p.add_argument("--exhaustive", action="store_true", default=None, help="Scan every metric, no fall-through")


def overrides_from_args(args: argparse.Namespace) -> Dict[str, Any]:
    """Settings overrides for every flag given on the command line"""
    flags = vars(args)
    mapping = {
        "run_dir": ("run_dir",),
        "workers": ("workers",),
        "log_level": ("log_level",),
        "tasks": ("simulator", "tasks"),
        "noise_sigma": ("simulator", "noise_sigma"),
        "train_fraction": ("train_fraction",),
        "epochs": ("vae", "epochs"),
        "threshold": ("detector", "similarity_threshold"),
        "continuity": ("detector", "continuity_seconds"),
        "distance": ("detector", "distance_kind"),
        "embedding": ("detector", "embedding_source"),
        "exhaustive": ("detector", "exhaustive"),
    }
    if args.command == "simulate":
        mapping["seed"] = ("simulator", "seed")
    elif args.command == "train":
        mapping["seed"] = ("vae", "seed")
    overrides: Dict[str, Any] = {}
    for flag, path in mapping.items():
        value = flags.get(flag)
        if value is None:
            continue
        node = overrides
        for key in path[:-1]:
            node = node.setdefault(key, {})
        node[path[-1]] = value
    return overrides


def resolve_settings(args: argparse.Namespace, settings: Optional[Settings] = None) -> Settings:
    overrides = overrides_from_args(args)
    if settings is None:
        return load_settings(args.config, overrides)
    return Settings(**_deep_merge(settings.dict(), overrides))


def _parse_metrics(value: Optional[str]):
    if not value:
        return None
    return [parse_metric(name.strip()) for name in value.split(",") if name.strip()]


# --- Subcommands ---

def cmd_simulate(args, settings: Settings, layout: harness.RunLayout) -> int:
    sim = settings.simulator
    corpus = gen_labeled_corpus(sim.tasks, sim, bounds=settings.bounds, workers=settings.workers)
    manifest = write_corpus(corpus, layout.corpus, sim.seed, settings.train_fraction, sim)
    harness.record_step(layout, "simulate", {"tasks": sim.tasks, "seed": sim.seed, "noise_sigma": sim.noise_sigma})
    n_faulty = sum(1 for e in manifest.tasks if e.fault_type is not None)
    print(f"wrote {len(manifest.tasks)} tasks ({n_faulty} faulty) to {layout.corpus}")
    return EXIT_OK


def cmd_preprocess(args, settings: Settings, layout: harness.RunLayout) -> int:
    done = harness.preprocess_corpus(layout, settings)
    harness.record_step(layout, "preprocess", {"tasks": len(done), "grid_interval": settings.simulator.grid_interval})
    print(f"cached {len(done)} tasks in {layout.tensors}")
    return EXIT_OK


def cmd_train(args, settings: Settings, layout: harness.RunLayout) -> int:
    tasks = [t for t, _ in harness.load_split(layout, CorpusSplit.TRAIN)]
    if not tasks:
        raise UsageError("the training split is empty; raise --train-fraction when simulating")
    store = ModelStore(layout.models)
    models = harness.train_models(tasks, settings, _parse_metrics(args.metrics))
    for model in models.values():
        store.save(model)
    trained = [m.value for m in models]
    if args.integrated:
        store.save(harness.train_integrated(tasks, settings))
        trained.append("integrated")
    harness.record_step(layout, "train", {"models": trained, "hyperparams": settings.vae.dict()})
    print(f"trained {len(trained)} model(s) into {layout.models}")
    return EXIT_OK


def cmd_prioritize(args, settings: Settings, layout: harness.RunLayout) -> int:
    priority, tree = harness.learn_priority(harness.load_split(layout, CorpusSplit.TRAIN), settings)
    harness.save_priority(layout, priority, tree)
    harness.record_step(layout, "prioritize", {"priority": [m.value for m in priority.metrics]})
    print(priority.to_text(), end="")
    return EXIT_OK


def _select_tasks(args, layout: harness.RunLayout):
    if args.trace is not None:
        return None
    loaded = [t for t, _ in harness.load_split(layout, args.split)]
    if args.task:
        wanted = set(args.task)
        unknown = wanted - {t.task_id for t in loaded}
        if unknown:
            raise UsageError(f"unknown task id(s) in the {args.split.value} split: {sorted(unknown)}")
        loaded = [t for t in loaded if t.task_id in wanted]
    return loaded


def cmd_detect(args, settings: Settings, layout: harness.RunLayout) -> int:
    store = ModelStore(layout.models)
    priority = harness.load_priority(layout, settings)
    detector = harness.build_detector(args.pipeline, settings, store, priority, metrics=_parse_metrics(args.metrics))
    tasks = _select_tasks(args, layout)
    if tasks is None:
        tasks = [harness.prepare_task(parse_trace(args.trace), settings)]
    run = harness.run_detector(detector, tasks, settings.workers)
    output = args.output or (layout.alerts(args.pipeline) if args.trace is None else None)
    for task_id in sorted(run.alerts):
        for alert in run.alerts[task_id]:
            sys.stdout.write(orjson.dumps(alert.to_record(), option=orjson.OPT_SORT_KEYS).decode() + "\n")
    if output is not None:
        harness.write_alerts(output, run.alerts)
        harness.write_sessions(layout.sessions(args.pipeline), run.stats)
    n_alerts = sum(len(a) for a in run.alerts.values())
    harness.record_step(
        layout,
        f"detect.{args.pipeline.value}",
        {"tasks": len(tasks), "alerts": n_alerts, "detector": settings.detector.dict()},
    )
    return EXIT_ALERTS if n_alerts else EXIT_OK


def _truth_for(layout: harness.RunLayout, split: CorpusSplit):
    entries = read_manifest(layout.corpus).split(split)
    return {e.task_id: read_truth(layout.corpus, e.task_id) for e in entries}


def _merge_eval(layout: harness.RunLayout, reports: Sequence[EvalReport]) -> None:
    existing: List[Dict] = []
    if layout.eval.is_file():
        existing = orjson.loads(layout.eval.read_bytes()).get("reports", [])
    replaced = {(r.pipeline.value, r.variant) for r in reports}
    kept = [d for d in existing if (d.get("pipeline"), d.get("variant")) not in replaced]
    docs = kept + [r.to_document() for r in reports]
    docs.sort(key=lambda d: (d["pipeline"], d["variant"]))
    layout.eval.write_bytes(harness.dump_document({"reports": docs}))


def cmd_evaluate(args, settings: Settings, layout: harness.RunLayout) -> int:
    truth = _truth_for(layout, args.split)
    alerts = harness.read_alerts(layout.alerts(args.pipeline), list(truth))
    timings = harness.read_session_timings(layout.sessions(args.pipeline))
    report = evaluate(alerts, truth, args.pipeline, "default", timings)
    _merge_eval(layout, [report])
    print("\n".join(summary_table([report])))
    return EXIT_OK


def cmd_report(args, settings: Settings, layout: harness.RunLayout) -> int:
    loaded = harness.load_split(layout, args.split)
    tasks = [t for t, _ in loaded]
    truth = {t.task_id: g for t, g in loaded}
    store = ModelStore(layout.models)
    priority = harness.load_priority(layout, settings)
    sections = {
        "Pipelines": harness.compare_pipelines(tasks, truth, settings, store, priority),
        "Continuity": harness.continuity_sweep(tasks, truth, settings, store, priority),
        "Distance kinds": harness.distance_variants(tasks, truth, settings, store, priority),
        "Embedding source": harness.embedding_variants(tasks, truth, settings, store, priority),
        "Metric selection": harness.selection_variants(tasks, truth, settings, store, priority),
    }
    layout.report.write_text(render_report(sections), encoding="utf-8")
    layout.eval.write_bytes(
        harness.dump_document(
            {"reports": [r.to_document() for name, reports in sections.items() for r in reports]}
        )
    )
    harness.record_step(layout, "report", {"tasks": len(tasks), "split": args.split.value})
    print(f"wrote {layout.report}")
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "prioritize": cmd_prioritize,
    "detect": cmd_detect,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def run_command(argv: Optional[Sequence[str]] = None, settings: Optional[Settings] = None) -> int:
    """Run one subcommand; 0 on success without alerts, 2 when alerts were emitted, 1 on errors"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse exits 2 on usage errors; 2 is reserved for alerts
        return EXIT_OK if e.code == 0 else EXIT_ERROR
    try:
        settings = resolve_settings(args, settings)
        logging.getLogger().setLevel(settings.log_level)
        layout = harness.RunLayout(settings.run_dir)
        return COMMANDS[args.command](args, settings, layout)
    except FleetWatchError as e:
        logger.debug(f"{args.command} failed", exc_info=True)
        print(f"error: {e.detail}", file=sys.stderr)
        return e.exit_code
    except ValueError as e:
        # settings validation
        logger.debug(f"{args.command} failed", exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR
    except Exception as e:
        logger.error(f"{args.command} failed: {e}", exc_info=True)
        return EXIT_ERROR
    finally:
        shutdown_worker_pool()
