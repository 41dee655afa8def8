"""Comparison detectors: Mahalanobis over moment features, and the RAW / CON / INT ablations"""
from enum import Enum
from typing import List, Mapping, NamedTuple, Optional, Sequence, Union
import logging
import time

import numpy as np
from scipy import linalg
from scipy.spatial.distance import pdist, squareform

from app.core.errors import MissingModel, RankDeficient, ShapeMismatch, WindowOutOfRange
from app.models.catalog import MetricKind, catalog_order
from app.schemas.detection import Alert, DetectorConfig, Pipeline, SessionStats, StatFeatureVector, WindowVerdict
from app.schemas.traces import AlignedTensor, TaskTensors, Window
from app.schemas.vae import VaeModel
from app.services.detector import (
    Embedder,
    FaultDetector,
    confirm,
    scan_range,
    sub_task,
    vae_embeddings,
    verdicts_from_sums,
    window_distance_sums,
)
from app.services.preprocessing import window_matrix

logger = logging.getLogger(__name__)

MOMENT_EPS = 1e-12


# --- Moment features ---

def window_moments(windows: np.ndarray) -> np.ndarray:
    """(..., w) windows -> (..., 4) of mean, variance, skewness, kurtosis (population moments)"""
    x = np.asarray(windows, dtype=np.float64)
    mean = x.mean(axis=-1)
    centered = x - mean[..., None]
    var = np.mean(centered**2, axis=-1)
    m3 = np.mean(centered**3, axis=-1)
    m4 = np.mean(centered**4, axis=-1)
    flat = var < MOMENT_EPS
    safe = np.where(flat, 1.0, var)
    skew = np.where(flat, 0.0, m3 / safe**1.5)
    kurt = np.where(flat, 0.0, m4 / safe**2)
    return np.stack([mean, np.where(flat, 0.0, var), skew, kurt], axis=-1)


def stat_features(window: Union[Window, np.ndarray], machine_id: str = "") -> StatFeatureVector:
    data = window.data if isinstance(window, Window) else np.asarray(window, dtype=np.float64)
    if data.size < 2:
        raise ShapeMismatch("moments need a window of at least 2 samples")
    mean, var, skew, kurt = window_moments(data)
    return StatFeatureVector(machine_id=machine_id, mean=mean, variance=var, skewness=skew, kurtosis=kurt)


# --- PCA and Mahalanobis ---

class PcaFit(NamedTuple):
    mean: np.ndarray
    components: np.ndarray  # (r, F), rows sorted by explained variance
    explained_variance: np.ndarray


def pca_fit(features: np.ndarray, k: int, strict: bool = False) -> PcaFit:
    """Top-k eigenvectors of the sample covariance; fewer when the data has lower rank"""
    x = np.asarray(features, dtype=np.float64)
    m, f = x.shape
    if m < 2:
        raise ShapeMismatch(f"PCA needs at least 2 rows, got {m}")
    if not 1 <= k <= min(m, f):
        raise ShapeMismatch(f"k={k} outside [1, min({m}, {f})]")
    mean = x.mean(axis=0)
    cov = np.atleast_2d(np.cov(x - mean, rowvar=False))
    eigvals, eigvecs = linalg.eigh(cov)
    order = np.argsort(eigvals, kind="stable")[::-1]
    eigvals, eigvecs = eigvals[order], eigvecs[:, order]
    tol = max(float(eigvals[0]), 0.0) * f * np.finfo(np.float64).eps + 1e-300
    rank = int(np.sum(eigvals > tol))
    r = min(k, rank)
    if r < k:
        if strict:
            raise RankDeficient(f"only {rank} nonzero eigenvalue(s) for k={k}")
        logger.warning(f"PCA rank {rank} below k={k}, projecting onto {r} component(s)")
    components = eigvecs[:, :r].T.copy()
    for row in components:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    return PcaFit(mean, components, np.clip(eigvals[:r], 0.0, None))


def pca_project(features: np.ndarray, k: int, strict: bool = False) -> np.ndarray:
    fit = pca_fit(features, k, strict)
    return (np.asarray(features, dtype=np.float64) - fit.mean) @ fit.components.T


def regularized_inverse(points: np.ndarray, reg: float = 1e-6, shrinkage: float = 0.0) -> np.ndarray:
    """Inverse sample covariance, shrunk toward its average variance times I, plus a ridge.

    Without shrinkage, M points whitened in M - 1 dimensions sit on a regular
    simplex and every distance sum comes out equal.
    """
    cov = np.atleast_2d(np.cov(points, rowvar=False))
    eye = np.eye(cov.shape[0])
    target = np.trace(cov) / cov.shape[0] * eye
    return linalg.inv((1.0 - shrinkage) * cov + shrinkage * target + reg * eye)


def mahalanobis_sums(
    points: np.ndarray, reg: float = 1e-6, inverse_cov: Optional[np.ndarray] = None, shrinkage: float = 0.0
) -> np.ndarray:
    """Per-row sum of Mahalanobis distances to every other row"""
    points = np.asarray(points, dtype=np.float64)
    if points.shape[1] == 0:
        return np.zeros(points.shape[0])
    vi = inverse_cov if inverse_cov is not None else regularized_inverse(points, reg, shrinkage)
    return squareform(pdist(points, metric="mahalanobis", VI=vi)).sum(axis=1)


# --- MD detector ---

class MdDetector:
    """Moment features of every metric per machine, PCA, then Mahalanobis distance sums"""

    pipeline = Pipeline.MD

    def __init__(
        self,
        cfg: DetectorConfig,
        metrics: Optional[Sequence[MetricKind]] = None,
        pca_components: int = 4,
        covariance_reg: float = 1e-6,
        covariance_shrinkage: float = 0.2,
    ):
        self.cfg = cfg
        self.metrics = catalog_order(metrics) if metrics is not None else None
        self.pca_components = pca_components
        self.covariance_reg = covariance_reg
        self.covariance_shrinkage = covariance_shrinkage

    def _metrics(self, tensors: TaskTensors) -> List[MetricKind]:
        if self.metrics is None:
            return tensors.metrics
        return [m for m in self.metrics if m in tensors.tensors]

    def window_sums(self, features: np.ndarray) -> np.ndarray:
        """(M, F) features of one window -> (M,) distance sums"""
        m, f = features.shape
        k = min(self.pca_components, m - 1, f)
        projected = pca_project(features, k)
        return mahalanobis_sums(projected, self.covariance_reg, shrinkage=self.covariance_shrinkage)

    def scan(self, tensors: TaskTensors, first: int = 0) -> List[WindowVerdict]:
        metrics = self._metrics(tensors)
        stacked = tensors.stacked(metrics)[:, first:]
        windows = window_matrix(stacked, self.cfg.window_w, self.cfg.stride)  # (M, nW, w, K)
        moments = window_moments(np.moveaxis(windows, 2, -1))  # (M, nW, K, 4)
        features = moments.reshape(moments.shape[0], moments.shape[1], -1)
        sums = np.stack([self.window_sums(features[:, j]) for j in range(features.shape[1])], axis=1)
        starts = first + np.arange(features.shape[1]) * self.cfg.stride
        return verdicts_from_sums(sums, starts, list(tensors.machine_ids), self.cfg, None)

    def detect_session(self, tensors: TaskTensors, stats: Optional[SessionStats] = None) -> List[Alert]:
        return _combined_session(self, tensors, stats)


def md_detect(
    tensors: TaskTensors,
    window_start: int,
    cfg: DetectorConfig,
    metrics: Optional[Sequence[MetricKind]] = None,
    pca_components: int = 4,
    covariance_reg: float = 1e-6,
    covariance_shrinkage: float = 0.2,
) -> WindowVerdict:
    _check_start(tensors, window_start, cfg)
    sub = _window_slice(tensors, window_start, cfg.window_w)
    detector = MdDetector(cfg.copy(update={"stride": 1}), metrics, pca_components, covariance_reg, covariance_shrinkage)
    verdict = detector.scan(sub)[0]
    return verdict.copy(update={"window_start": window_start})


# --- Ablations ---

class AblationMode(str, Enum):
    RAW = "raw"
    CON = "con"
    INT = "int"


def raw_embeddings(windows: np.ndarray) -> np.ndarray:
    m, n_windows = windows.shape[:2]
    return windows.reshape(m, n_windows, -1)


class RawDetector(FaultDetector):
    """Per-metric fall-through on the preprocessed windows, no denoising"""

    pipeline = Pipeline.RAW

    def __init__(self, priority, cfg: DetectorConfig, metrics: Optional[Sequence[MetricKind]] = None):
        super().__init__({}, priority, cfg, metrics)

    def embedder_for(self, tensor: AlignedTensor) -> Embedder:
        return raw_embeddings


class ConcatDetector:
    """Per-metric VAE embeddings concatenated into one vector per machine"""

    pipeline = Pipeline.CON

    def __init__(self, models: Mapping[MetricKind, VaeModel], cfg: DetectorConfig, metrics: Optional[Sequence[MetricKind]] = None):
        self.models = models
        self.cfg = cfg
        self.metrics = catalog_order(metrics) if metrics is not None else catalog_order(models)

    def scan(self, tensors: TaskTensors, first: int = 0) -> List[WindowVerdict]:
        parts = []
        for metric in self.metrics:
            if metric not in tensors.tensors:
                continue
            if metric not in self.models:
                raise MissingModel(f"no model for {metric.value}")
            windows = window_matrix(tensors[metric].values[:, first:], self.cfg.window_w, self.cfg.stride)
            parts.append(vae_embeddings(self.models[metric], windows, self.cfg.embedding_source))
        if not parts:
            raise MissingModel(f"{tensors.task_id}: none of the configured metrics was collected")
        embeddings = np.concatenate(parts, axis=-1)
        sums = window_distance_sums(embeddings, self.cfg.distance_kind)
        starts = first + np.arange(embeddings.shape[1]) * self.cfg.stride
        return verdicts_from_sums(sums, starts, list(tensors.machine_ids), self.cfg, None)

    def detect_session(self, tensors: TaskTensors, stats: Optional[SessionStats] = None) -> List[Alert]:
        return _combined_session(self, tensors, stats)


class IntegratedDetector:
    """One multi-metric VAE over the stacked metrics"""

    pipeline = Pipeline.INT

    def __init__(self, model: VaeModel, cfg: DetectorConfig):
        self.model = model
        self.cfg = cfg

    def scan(self, tensors: TaskTensors, first: int = 0) -> List[WindowVerdict]:
        missing = [m.value for m in self.model.metrics if m not in tensors.tensors]
        if missing:
            raise MissingModel(f"{tensors.task_id}: integrated model needs metrics {missing}")
        stacked = tensors.stacked(self.model.metrics)[:, first:]
        windows = window_matrix(stacked, self.cfg.window_w, self.cfg.stride)
        embeddings = vae_embeddings(self.model, windows, self.cfg.embedding_source)
        sums = window_distance_sums(embeddings, self.cfg.distance_kind)
        starts = first + np.arange(embeddings.shape[1]) * self.cfg.stride
        return verdicts_from_sums(sums, starts, list(tensors.machine_ids), self.cfg, None)

    def detect_session(self, tensors: TaskTensors, stats: Optional[SessionStats] = None) -> List[Alert]:
        return _combined_session(self, tensors, stats)


def ablation_detect(
    mode: AblationMode,
    tensors: TaskTensors,
    window_start: int,
    cfg: DetectorConfig,
    metric: Optional[MetricKind] = None,
    models: Optional[Mapping[MetricKind, VaeModel]] = None,
    integrated: Optional[VaeModel] = None,
    metrics: Optional[Sequence[MetricKind]] = None,
) -> WindowVerdict:
    """Verdict of one ablation for a single window"""
    mode = AblationMode(mode)
    _check_start(tensors, window_start, cfg)
    sub = _window_slice(tensors, window_start, cfg.window_w)
    if mode == AblationMode.RAW:
        if metric is None:
            raise ValueError("the RAW ablation judges one metric at a time")
        windows = window_matrix(sub[metric].values, cfg.window_w, 1)
        sums = window_distance_sums(raw_embeddings(windows), cfg.distance_kind)
        return verdicts_from_sums(sums, [window_start], list(sub.machine_ids), cfg, metric)[0]
    if mode == AblationMode.CON:
        if not models:
            raise MissingModel("the CON ablation needs per-metric models")
        verdict = ConcatDetector(models, cfg, metrics).scan(sub)[0]
    else:
        if integrated is None:
            raise MissingModel("the INT ablation needs an integrated model")
        verdict = IntegratedDetector(integrated, cfg).scan(sub)[0]
    return verdict.copy(update={"window_start": window_start})


# --- Helpers ---

def _check_start(tensors: TaskTensors, window_start: int, cfg: DetectorConfig) -> None:
    if window_start < 0 or window_start + cfg.window_w > tensors.n_steps:
        raise WindowOutOfRange(f"window [{window_start}, {window_start + cfg.window_w}) outside [0, {tensors.n_steps})")


def _window_slice(tensors: TaskTensors, start: int, w: int) -> TaskTensors:
    return sub_task(tensors, start, start + w)


def _combined_session(detector, tensors: TaskTensors, stats: Optional[SessionStats]) -> List[Alert]:
    """Session for detectors that compare machines on every metric at once"""
    started = time.perf_counter()
    stats = stats if stats is not None else SessionStats(task_id=tensors.task_id, pipeline=detector.pipeline)
    first, _ = scan_range(tensors.n_steps, tensors.grid_interval, detector.cfg)
    verdicts = detector.scan(tensors, first)
    stats.evaluated_metrics.append(None)
    stats.windows_scanned += len(verdicts)
    alerts = confirm(
        verdicts, tensors.task_id, detector.cfg, None, tensors.grid_start, tensors.grid_interval, detector.pipeline
    )
    stats.seconds = time.perf_counter() - started
    return alerts
