"""Online faulty-machine detection: similarity check per window, then continuity"""
from typing import Callable, Iterable, List, Mapping, Optional, Sequence, Set, Tuple
import logging
import time

import numpy as np
from scipy.spatial.distance import pdist, squareform

from app.core.errors import (
    LengthMismatch,
    MetricMismatch,
    MissingModel,
    OutOfOrderVerdict,
    TooFewMachines,
    WindowOutOfRange,
)
from app.models.catalog import MetricKind
from app.schemas.detection import (
    Alert,
    DetectorConfig,
    DistanceKind,
    EmbeddingSource,
    Pipeline,
    SessionStats,
    WindowVerdict,
)
from app.schemas.prioritization import PriorityList
from app.schemas.traces import AlignedTensor, TaskTensors
from app.schemas.vae import VaeModel
from app.services.lstm_vae import denoise_batch
from app.services.preprocessing import window_matrix
from app.services.prioritization import zscores

logger = logging.getLogger(__name__)

SCIPY_METRIC = {
    DistanceKind.EUCLIDEAN: "euclidean",
    DistanceKind.MANHATTAN: "cityblock",
    DistanceKind.CHEBYSHEV: "chebyshev",
}

# keeps the (M, M, chunk, d) difference tensor of the batched path small
_PAIRWISE_BUDGET = 4_000_000


# --- Similarity ---

def distance_sums(embeddings: Sequence[np.ndarray], kind: DistanceKind = DistanceKind.EUCLIDEAN) -> np.ndarray:
    """Sum of each machine's distances to every other machine"""
    lengths = {np.size(e) for e in embeddings}
    if len(lengths) > 1:
        raise LengthMismatch(f"embeddings of differing lengths {sorted(lengths)}")
    if len(embeddings) < 2:
        raise TooFewMachines(f"{len(embeddings)} embedding(s), need at least 2")
    matrix = np.vstack([np.ravel(e) for e in embeddings]).astype(np.float64)
    return squareform(pdist(matrix, metric=SCIPY_METRIC[DistanceKind(kind)])).sum(axis=1)


def window_distance_sums(embeddings: np.ndarray, kind: DistanceKind = DistanceKind.EUCLIDEAN) -> np.ndarray:
    """distance_sums for every window at once: (M, n_windows, d) -> (M, n_windows)"""
    kind = DistanceKind(kind)
    m, n_windows, d = embeddings.shape
    if m < 2:
        raise TooFewMachines(f"{m} machine(s), need at least 2")
    chunk = max(1, _PAIRWISE_BUDGET // max(1, m * m * d))
    sums = np.empty((m, n_windows))
    for start in range(0, n_windows, chunk):
        block = embeddings[:, start : start + chunk]
        diff = np.abs(block[:, None] - block[None, :])
        if kind == DistanceKind.EUCLIDEAN:
            dist = np.sqrt(np.sum(diff * diff, axis=-1))
        elif kind == DistanceKind.MANHATTAN:
            dist = diff.sum(axis=-1)
        else:
            dist = diff.max(axis=-1)
        sums[:, start : start + chunk] = dist.sum(axis=1)
    return sums


def normal_scores(sums: np.ndarray) -> np.ndarray:
    """Standard score of each machine's distance sum; all zero when the sums do not disperse"""
    sums = np.asarray(sums, dtype=np.float64)
    if sums.size < 2:
        raise TooFewMachines(f"{sums.size} sum(s), need at least 2")
    return zscores(sums.reshape(-1, 1))[:, 0]


def verdicts_from_sums(
    sums: np.ndarray,
    starts: Sequence[int],
    machine_ids: List[str],
    cfg: DetectorConfig,
    metric: Optional[MetricKind] = None,
) -> List[WindowVerdict]:
    """One verdict per window column of a (M, n_windows) distance-sum matrix"""
    scores = zscores(sums)
    verdicts = []
    for k, start in enumerate(starts):
        column = scores[:, k]
        peak = int(np.argmax(column))
        candidate = machine_ids[peak] if column[peak] > cfg.similarity_threshold else None
        verdicts.append(
            WindowVerdict(
                metric=metric,
                window_start=int(start),
                candidate_machine=candidate,
                normal_scores=column,
                machine_ids=machine_ids,
                threshold=cfg.similarity_threshold,
            )
        )
    return verdicts


# --- Embeddings ---

def vae_embeddings(model: VaeModel, windows: np.ndarray, source: EmbeddingSource) -> np.ndarray:
    """(M, n_windows, w[, K]) windows -> (M, n_windows, d) embeddings"""
    m, n_windows = windows.shape[:2]
    flat = windows.reshape((m * n_windows,) + windows.shape[2:])
    denoised, mu, _ = denoise_batch(model, flat)
    emb = mu if EmbeddingSource(source) == EmbeddingSource.LATENT_MU else denoised.reshape(m * n_windows, -1)
    return emb.reshape(m, n_windows, -1)


def scan_range(n_steps: int, grid_interval: float, cfg: DetectorConfig) -> Tuple[int, np.ndarray]:
    """First sample of the lookback range and the window starts within it"""
    lookback = int(round(cfg.lookback_seconds / grid_interval)) + cfg.window_w - 1
    first = max(0, n_steps - lookback)
    if n_steps - first < cfg.window_w:
        raise WindowOutOfRange(f"{n_steps} samples cannot hold a window of {cfg.window_w}")
    return first, np.arange(first, n_steps - cfg.window_w + 1, cfg.stride)


def _check_model(tensor: AlignedTensor, model: VaeModel) -> None:
    if model.metrics != [tensor.metric]:
        raise MetricMismatch(f"model for {[m.value for m in model.metrics]} applied to {tensor.metric.value}")


def detect_window(tensor: AlignedTensor, model: VaeModel, window_start: int, cfg: DetectorConfig) -> WindowVerdict:
    _check_model(tensor, model)
    w = model.hyperparams.w
    if w != cfg.window_w:
        raise MetricMismatch(f"model window {w} differs from configured window {cfg.window_w}")
    if window_start < 0 or window_start + w > tensor.n_steps:
        raise WindowOutOfRange(f"window [{window_start}, {window_start + w}) outside [0, {tensor.n_steps})")
    windows = tensor.values[:, None, window_start : window_start + w]
    sums = window_distance_sums(vae_embeddings(model, windows, cfg.embedding_source), cfg.distance_kind)
    return verdicts_from_sums(sums, [window_start], list(tensor.machine_ids), cfg, tensor.metric)[0]


Embedder = Callable[[np.ndarray], np.ndarray]


def scan_windows(
    values: np.ndarray,
    machine_ids: List[str],
    cfg: DetectorConfig,
    embed: Embedder,
    metric: Optional[MetricKind] = None,
    first: int = 0,
) -> List[WindowVerdict]:
    """Verdicts for every stride-spaced window from `first` on, in window order"""
    windows = window_matrix(values[:, first:], cfg.window_w, cfg.stride)
    starts = first + np.arange(windows.shape[1]) * cfg.stride
    sums = window_distance_sums(embed(windows), cfg.distance_kind)
    return verdicts_from_sums(sums, starts, machine_ids, cfg, metric)


def scan_metric(
    tensor: AlignedTensor, model: VaeModel, cfg: DetectorConfig, first: int = 0
) -> List[WindowVerdict]:
    _check_model(tensor, model)
    return scan_windows(
        tensor.values,
        list(tensor.machine_ids),
        cfg,
        lambda windows: vae_embeddings(model, windows, cfg.embedding_source),
        tensor.metric,
        first,
    )


# --- Continuity ---

class ContinuityTracker:
    """Counts consecutive windows naming the same candidate for one metric stream"""

    def __init__(
        self,
        task_id: str,
        cfg: DetectorConfig,
        metric: Optional[MetricKind] = None,
        grid_start: float = 0.0,
        grid_interval: float = 1.0,
        pipeline: Pipeline = Pipeline.VAE,
    ):
        self.task_id = task_id
        self.cfg = cfg
        self.metric = metric
        self.grid_start = grid_start
        self.grid_interval = grid_interval
        self.pipeline = pipeline
        self.required_hits = cfg.required_hits(grid_interval)
        self.emitted: Set[Tuple[str, Optional[MetricKind]]] = set()
        self.reset()

    def reset(self) -> None:
        """Start a new run; emitted alerts stay suppressed"""
        self.machine: Optional[str] = None
        self.hits = 0
        self.first_start = 0
        self.peak = 0.0
        self.last_start: Optional[int] = None

    def update(self, verdict: WindowVerdict) -> Optional[Alert]:
        if verdict.metric != self.metric:
            raise MetricMismatch(f"verdict for {verdict.metric} fed to the {self.metric} tracker")
        if self.last_start is not None:
            if verdict.window_start <= self.last_start:
                raise OutOfOrderVerdict(f"window {verdict.window_start} arrived after window {self.last_start}")
            if verdict.window_start != self.last_start + self.cfg.stride:
                # a gap breaks the run
                self.machine, self.hits = None, 0
        self.last_start = verdict.window_start

        candidate = verdict.candidate_machine
        if candidate is None:
            self.machine, self.hits = None, 0
            return None
        if candidate == self.machine:
            self.hits += 1
            self.peak = max(self.peak, verdict.peak_score)
        else:
            self.machine, self.hits = candidate, 1
            self.first_start = verdict.window_start
            self.peak = verdict.peak_score

        key = (candidate, self.metric)
        if self.hits < self.required_hits or key in self.emitted:
            return None
        self.emitted.add(key)
        return Alert(
            task_id=self.task_id,
            machine_id=candidate,
            metric=self.metric,
            first_window_start=self.first_start,
            last_window_start=verdict.window_start,
            consecutive_hits=self.hits,
            peak_normal_score=self.peak,
            grid_start=self.grid_start,
            grid_interval=self.grid_interval,
            pipeline=self.pipeline,
        )


def continuity_update(state: ContinuityTracker, verdict: WindowVerdict, cfg: DetectorConfig) -> Optional[Alert]:
    if cfg != state.cfg:
        raise ValueError("tracker was built for a different detector config")
    return state.update(verdict)


def confirm(
    verdicts: Iterable[WindowVerdict],
    task_id: str,
    cfg: DetectorConfig,
    metric: Optional[MetricKind],
    grid_start: float,
    grid_interval: float,
    pipeline: Pipeline = Pipeline.VAE,
) -> List[Alert]:
    """Feed verdicts in order through a fresh tracker and collect the alerts"""
    tracker = ContinuityTracker(task_id, cfg, metric, grid_start, grid_interval, pipeline)
    alerts = []
    for verdict in verdicts:
        alert = tracker.update(verdict)
        if alert is not None:
            alerts.append(alert)
    return alerts


# --- Session ---

class FaultDetector:
    """Runs detection sessions over a task, walking metrics in priority order"""

    pipeline = Pipeline.VAE

    def __init__(
        self,
        models: Mapping[MetricKind, VaeModel],
        priority: PriorityList,
        cfg: DetectorConfig,
        metrics: Optional[Sequence[MetricKind]] = None,
    ):
        self.models = models
        self.priority = priority if metrics is None else priority.restricted(list(metrics))
        self.cfg = cfg

    def _model_for(self, metric: MetricKind) -> VaeModel:
        try:
            return self.models[metric]
        except KeyError:
            raise MissingModel(f"no model for {metric.value}") from None

    def embedder_for(self, tensor: AlignedTensor) -> Embedder:
        model = self._model_for(tensor.metric)
        _check_model(tensor, model)
        return lambda windows: vae_embeddings(model, windows, self.cfg.embedding_source)

    def detect_session(self, tensors: TaskTensors, stats: Optional[SessionStats] = None) -> List[Alert]:
        started = time.perf_counter()
        stats = stats if stats is not None else SessionStats(task_id=tensors.task_id, pipeline=self.pipeline)
        first, _ = scan_range(tensors.n_steps, tensors.grid_interval, self.cfg)
        alerts: List[Alert] = []
        for metric in self.priority.metrics:
            if metric not in tensors.tensors:
                logger.debug(f"{tensors.task_id}: {metric.value} not collected, skipping")
                continue
            tensor = tensors[metric]
            verdicts = scan_windows(
                tensor.values, list(tensor.machine_ids), self.cfg, self.embedder_for(tensor), metric, first
            )
            stats.evaluated_metrics.append(metric)
            stats.windows_scanned += len(verdicts)
            found = confirm(
                verdicts, tensors.task_id, self.cfg, metric, tensors.grid_start, tensors.grid_interval, self.pipeline
            )
            if found:
                logger.info(f"{tensors.task_id}: {metric.value} flags {sorted({a.machine_id for a in found})}")
                alerts.extend(found)
                if not self.cfg.exhaustive:
                    break
        stats.seconds = time.perf_counter() - started
        return alerts


def detect_session(
    tensors: TaskTensors,
    models: Mapping[MetricKind, VaeModel],
    priority: PriorityList,
    cfg: DetectorConfig,
    stats: Optional[SessionStats] = None,
) -> List[Alert]:
    return FaultDetector(models, priority, cfg).detect_session(tensors, stats)


def sub_task(tensors: TaskTensors, start: int, end: int) -> TaskTensors:
    """Grid slice [start, end) of every tensor of a task"""
    sliced = {
        m: AlignedTensor(
            task_id=t.task_id,
            metric=m,
            machine_ids=list(t.machine_ids),
            grid_start=t.time_of(start),
            grid_interval=t.grid_interval,
            values=t.values[:, start:end],
            normalized=t.normalized,
        )
        for m, t in tensors.tensors.items()
    }
    return TaskTensors.build(tensors.task_id, sliced)


def replay_calls(
    detector: FaultDetector, tensors: TaskTensors
) -> List[Tuple[float, List[Alert]]]:
    """Replay the periodic production cadence: one session per call interval, each over its lookback"""
    cfg = detector.cfg
    lookback = int(round(cfg.lookback_seconds / tensors.grid_interval)) + cfg.window_w - 1
    interval = max(1, int(round(cfg.call_interval_seconds / tensors.grid_interval)))
    end = min(lookback, tensors.n_steps)
    calls: List[Tuple[float, List[Alert]]] = []
    while end <= tensors.n_steps:
        window = sub_task(tensors, max(0, end - lookback), end)
        calls.append((tensors.grid_start + end * tensors.grid_interval, detector.detect_session(window)))
        end += interval
    return calls
