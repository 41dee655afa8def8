"""Run-directory orchestration: every stage the command line drives, over a whole corpus"""
from pathlib import Path
from typing import Any, Dict, List, Mapping, NamedTuple, Optional, Sequence, Tuple
import logging

import numpy as np
import orjson

from app.core.config import Settings
from app.core.errors import MissingModel, UsageError
from app.core.worker_pool import map_ordered
from app.models.catalog import AUXILIARY_GPU_METRICS, CATALOG, GPU_METRICS, MetricKind, catalog_order
from app.schemas.detection import Alert, DetectorConfig, DistanceKind, EmbeddingSource, Pipeline, SessionStats
from app.schemas.evaluation import EvalReport
from app.schemas.prioritization import DecisionTree, PriorityList
from app.schemas.simulation import CorpusSplit, GroundTruth
from app.schemas.traces import TaskTensors
from app.schemas.vae import VaeModel
from app.services.baselines import ConcatDetector, IntegratedDetector, MdDetector, RawDetector
from app.services.detector import FaultDetector
from app.services.evaluation import evaluate
from app.services.lstm_vae import train_model
from app.services.model_store import ModelStore
from app.services.preprocessing import (
    align_task,
    load_task_tensors,
    normalize_task,
    parse_trace,
    save_task_tensors,
    window_matrix,
)
from app.services.prioritization import build_feature_dataset, extract_priority, read_priority, train_tree, write_priority
from app.services.simulator import read_manifest, read_truth, trace_path

logger = logging.getLogger(__name__)

_DOC_OPTIONS = orjson.OPT_INDENT_2 | orjson.OPT_SORT_KEYS | orjson.OPT_NON_STR_KEYS | orjson.OPT_SERIALIZE_NUMPY


class RunLayout:
    """Paths of the artifacts inside one run directory"""

    def __init__(self, run_dir: Path):
        self.root = Path(run_dir)

    @property
    def corpus(self) -> Path:
        return self.root / "corpus"

    @property
    def tensors(self) -> Path:
        return self.root / "tensors"

    @property
    def models(self) -> Path:
        return self.root / "models"

    @property
    def priority(self) -> Path:
        return self.root / "priority.txt"

    @property
    def eval(self) -> Path:
        return self.root / "eval.json"

    @property
    def report(self) -> Path:
        return self.root / "report.md"

    @property
    def manifest(self) -> Path:
        return self.root / "manifest.json"

    def tensor_path(self, task_id: str) -> Path:
        return self.tensors / f"{task_id}.bin"

    def alerts(self, pipeline: Pipeline = Pipeline.VAE) -> Path:
        if pipeline == Pipeline.VAE:
            return self.root / "alerts.jsonl"
        return self.root / f"alerts.{pipeline.value}.jsonl"

    def sessions(self, pipeline: Pipeline = Pipeline.VAE) -> Path:
        return self.root / f"sessions.{pipeline.value}.jsonl"


def dump_document(doc: Any) -> bytes:
    return orjson.dumps(doc, option=_DOC_OPTIONS)


def record_step(layout: RunLayout, step: str, details: Mapping[str, Any]) -> None:
    """Add a subcommand's parameters to the run manifest; the last run of a step wins"""
    doc: Dict[str, Any] = {}
    if layout.manifest.is_file():
        doc = orjson.loads(layout.manifest.read_bytes())
    doc.setdefault("steps", {})[step] = dict(details)
    layout.root.mkdir(parents=True, exist_ok=True)
    layout.manifest.write_bytes(dump_document(doc))


# --- Preprocessing ---

def prepare_task(traces, settings: Settings) -> TaskTensors:
    aligned = align_task(traces, grid_interval=settings.simulator.grid_interval)
    return normalize_task(aligned, settings.bounds)


def preprocess_corpus(layout: RunLayout, settings: Settings) -> List[str]:
    """Align and normalize every corpus task into the tensor cache"""
    manifest = read_manifest(layout.corpus)

    def run(task_id: str) -> str:
        traces = parse_trace(trace_path(layout.corpus, task_id), task_id=task_id)
        save_task_tensors(prepare_task(traces, settings), layout.tensor_path(task_id))
        return task_id

    layout.tensors.mkdir(parents=True, exist_ok=True)
    done = map_ordered(run, manifest.task_ids, settings.workers)
    logger.info(f"Cached tensors for {len(done)} tasks in {layout.tensors}")
    return done


def load_split(layout: RunLayout, split: Optional[CorpusSplit] = None) -> List[Tuple[TaskTensors, GroundTruth]]:
    manifest = read_manifest(layout.corpus)
    entries = manifest.tasks if split is None else manifest.split(split)
    loaded = []
    for entry in entries:
        path = layout.tensor_path(entry.task_id)
        if not path.is_file():
            raise UsageError(f"no tensor cache for {entry.task_id}; run `preprocess` first")
        loaded.append((load_task_tensors(path), read_truth(layout.corpus, entry.task_id)))
    return loaded


# --- Training ---

def training_windows(tasks: Sequence[TaskTensors], metrics: Sequence[MetricKind], w: int) -> np.ndarray:
    """Windows pooled across every machine of every task: (N, w, K)"""
    parts = []
    for task in tasks:
        if not all(m in task.tensors for m in metrics):
            continue
        windows = window_matrix(task.stacked(list(metrics)), w, 1)
        parts.append(windows.reshape(-1, w, len(metrics)))
    if not parts:
        return np.empty((0, w, len(metrics)))
    return np.concatenate(parts, axis=0)


def model_metrics(settings: Settings) -> List[MetricKind]:
    """Metrics that get a per-metric model: the detection set plus the optional GPU metrics"""
    return catalog_order(list(settings.detection_metrics) + AUXILIARY_GPU_METRICS)


def train_models(
    tasks: Sequence[TaskTensors], settings: Settings, metrics: Optional[Sequence[MetricKind]] = None
) -> Dict[MetricKind, VaeModel]:
    metrics = catalog_order(metrics) if metrics is not None else model_metrics(settings)
    hp = settings.vae

    def fit(metric: MetricKind) -> VaeModel:
        return train_model(training_windows(tasks, [metric], hp.w), hp, [metric])

    models = map_ordered(fit, metrics, settings.workers)
    return dict(zip(metrics, models))


def train_integrated(tasks: Sequence[TaskTensors], settings: Settings) -> VaeModel:
    metrics = catalog_order(settings.detection_metrics)
    return train_model(training_windows(tasks, metrics, settings.vae.w), settings.vae, metrics)


# --- Prioritization ---

def learn_priority(tasks: Sequence[Tuple[TaskTensors, GroundTruth]], settings: Settings) -> Tuple[PriorityList, DecisionTree]:
    cfg = settings.prioritization
    dataset = build_feature_dataset(tasks, cfg.span_seconds)
    tree = train_tree(dataset, cfg.max_depth, cfg.min_samples_leaf)
    return extract_priority(tree, CATALOG), tree


def load_priority(layout: RunLayout, settings: Settings) -> PriorityList:
    if layout.priority.is_file():
        return read_priority(layout.priority)
    logger.warning(f"No priority list at {layout.priority}, falling back to catalog order")
    return PriorityList.catalog_default(list(settings.detection_metrics))


def save_priority(layout: RunLayout, priority: PriorityList, tree: DecisionTree) -> None:
    write_priority(layout.priority, priority, tree)


# --- Detection ---

def metric_selections(settings: Settings) -> Dict[str, List[MetricKind]]:
    """Default detection set, plus the fewer / more GPU metrics variants"""
    default = catalog_order(settings.detection_metrics)
    fewer = [m for m in default if m not in GPU_METRICS or m == MetricKind.GPU_DUTY_CYCLE]
    more = catalog_order(default + AUXILIARY_GPU_METRICS)
    return {"default": default, "fewer-gpu": fewer, "more-gpu": more}


def build_detector(
    pipeline: Pipeline,
    settings: Settings,
    store: ModelStore,
    priority: PriorityList,
    cfg: Optional[DetectorConfig] = None,
    metrics: Optional[Sequence[MetricKind]] = None,
):
    """Detector for a pipeline; every kind exposes ``pipeline`` and ``detect_session``"""
    cfg = cfg or settings.detector
    metrics = catalog_order(metrics) if metrics is not None else catalog_order(settings.detection_metrics)
    pipeline = Pipeline(pipeline)
    if pipeline == Pipeline.VAE:
        return FaultDetector(store.load_many(metrics), priority, cfg, metrics)
    if pipeline == Pipeline.RAW:
        return RawDetector(priority, cfg, metrics)
    if pipeline == Pipeline.MD:
        return MdDetector(
            cfg,
            metrics,
            settings.baselines.pca_components,
            settings.baselines.covariance_reg,
            settings.baselines.covariance_shrinkage,
        )
    if pipeline == Pipeline.CON:
        return ConcatDetector(store.load_many(metrics), cfg, metrics)
    return IntegratedDetector(store.load_integrated(), cfg)


class DetectionRun(NamedTuple):
    alerts: Dict[str, List[Alert]]
    stats: List[SessionStats]

    @property
    def timings(self) -> List[float]:
        return [s.seconds for s in self.stats]


def run_detector(detector, tasks: Sequence[TaskTensors], workers: int = 1) -> DetectionRun:
    """One session per task; results keyed by task id in input order"""

    def session(task: TaskTensors) -> Tuple[List[Alert], SessionStats]:
        stats = SessionStats(task_id=task.task_id, pipeline=detector.pipeline)
        return detector.detect_session(task, stats), stats

    results = map_ordered(session, tasks, workers)
    alerts = {task.task_id: found for task, (found, _) in zip(tasks, results)}
    n_alerts = sum(len(a) for a in alerts.values())
    logger.info(f"{detector.pipeline.value}: {n_alerts} alert(s) over {len(tasks)} tasks")
    return DetectionRun(alerts, [stats for _, stats in results])


def write_alerts(path: Path, alerts: Mapping[str, Sequence[Alert]]) -> int:
    """JSON-lines alert stream, tasks in id order"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with open(path, "wb") as fh:
        for task_id in sorted(alerts):
            for alert in alerts[task_id]:
                fh.write(orjson.dumps(alert.to_record(), option=orjson.OPT_SORT_KEYS) + b"\n")
                count += 1
    return count


def read_alerts(path: Path, task_ids: Sequence[str]) -> Dict[str, List[Alert]]:
    """Alerts grouped per task; listed tasks without alerts map to an empty list"""
    grouped: Dict[str, List[Alert]] = {task_id: [] for task_id in task_ids}
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"no alert stream at {path}; run `detect` first")
    for line in path.read_bytes().splitlines():
        if not line.strip():
            continue
        alert = Alert.from_record(orjson.loads(line))
        grouped.setdefault(alert.task_id, []).append(alert)
    return grouped


def write_sessions(path: Path, stats: Sequence[SessionStats]) -> None:
    """Per-task session statistics: evaluated metrics in order and wall-clock seconds"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        for s in stats:
            record = {
                "task_id": s.task_id,
                "pipeline": s.pipeline.value,
                "evaluated_metrics": [m.value if m is not None else None for m in s.evaluated_metrics],
                "windows_scanned": s.windows_scanned,
                "seconds": s.seconds,
            }
            fh.write(orjson.dumps(record, option=orjson.OPT_SORT_KEYS) + b"\n")


def read_session_timings(path: Path) -> Optional[List[float]]:
    path = Path(path)
    if not path.is_file():
        return None
    return [float(orjson.loads(line)["seconds"]) for line in path.read_bytes().splitlines() if line.strip()]


# --- Comparisons ---

CONTINUITY_SWEEP = (0.0, 60.0, 120.0, 240.0, 360.0)


def _score(detector, tasks, truth, variant: str, workers: int) -> EvalReport:
    run = run_detector(detector, tasks, workers)
    return evaluate(run.alerts, truth, detector.pipeline, variant, run.timings)


def compare_pipelines(
    tasks: Sequence[TaskTensors],
    truth: Mapping[str, GroundTruth],
    settings: Settings,
    store: ModelStore,
    priority: PriorityList,
    pipelines: Sequence[Pipeline] = tuple(Pipeline),
) -> List[EvalReport]:
    reports = []
    for pipeline in pipelines:
        try:
            detector = build_detector(pipeline, settings, store, priority)
        except MissingModel as e:
            logger.warning(f"Skipping {pipeline.value}: {e}")
            continue
        reports.append(_score(detector, tasks, truth, "default", settings.workers))
    return reports


def continuity_sweep(
    tasks, truth, settings: Settings, store: ModelStore, priority: PriorityList, seconds: Sequence[float] = CONTINUITY_SWEEP
) -> List[EvalReport]:
    reports = []
    for value in seconds:
        cfg = settings.detector.copy(update={"continuity_seconds": float(value)})
        detector = build_detector(Pipeline.VAE, settings, store, priority, cfg)
        reports.append(_score(detector, tasks, truth, f"continuity={value:g}s", settings.workers))
    return reports


def distance_variants(tasks, truth, settings: Settings, store: ModelStore, priority: PriorityList) -> List[EvalReport]:
    reports = []
    for kind in DistanceKind:
        cfg = settings.detector.copy(update={"distance_kind": kind})
        detector = build_detector(Pipeline.VAE, settings, store, priority, cfg)
        reports.append(_score(detector, tasks, truth, kind.value, settings.workers))
    return reports


def embedding_variants(tasks, truth, settings: Settings, store: ModelStore, priority: PriorityList) -> List[EvalReport]:
    reports = []
    for source in EmbeddingSource:
        cfg = settings.detector.copy(update={"embedding_source": source})
        detector = build_detector(Pipeline.VAE, settings, store, priority, cfg)
        reports.append(_score(detector, tasks, truth, source.value, settings.workers))
    return reports


def selection_variants(tasks, truth, settings: Settings, store: ModelStore, priority: PriorityList) -> List[EvalReport]:
    reports = []
    for name, metrics in metric_selections(settings).items():
        try:
            detector = build_detector(Pipeline.VAE, settings, store, priority, metrics=metrics)
        except MissingModel as e:
            logger.warning(f"Skipping metric selection {name}: {e}")
            continue
        reports.append(_score(detector, tasks, truth, name, settings.workers))
    return reports
