from enum import Enum
from typing import Any, Dict, List, Optional

import numpy as np
from pydantic import BaseModel, Field, root_validator, validator

from app.models.catalog import MetricKind


class DistanceKind(str, Enum):
    EUCLIDEAN = "euclidean"
    MANHATTAN = "manhattan"
    CHEBYSHEV = "chebyshev"


class EmbeddingSource(str, Enum):
    DENOISED_VECTOR = "denoised_vector"
    LATENT_MU = "latent_mu"


class Pipeline(str, Enum):
    VAE = "vae"  # per-metric denoising, the primary pipeline
    MD = "md"
    RAW = "raw"
    CON = "con"
    INT = "int"


class DetectorConfig(BaseModel):
    similarity_threshold: float = Field(1.5, description="Normal-score cutoff for a window candidate")
    continuity_seconds: float = Field(240.0, ge=0, description="Wall-clock span a candidate must persist")
    window_w: int = Field(8, ge=2)
    stride: int = Field(1, ge=1)
    lookback_seconds: float = Field(900.0, gt=0)
    call_interval_seconds: float = Field(480.0, gt=0)
    distance_kind: DistanceKind = DistanceKind.EUCLIDEAN
    embedding_source: EmbeddingSource = EmbeddingSource.DENOISED_VECTOR
    exhaustive: bool = Field(False, description="Scan every metric instead of stopping at the first alerting one")

    class Config:
        allow_mutation = False

    @root_validator(skip_on_failure=True)
    def lookback_covers_continuity(cls, values):
        # lookback is measured on the default 1 s grid
        if values["lookback_seconds"] < values["continuity_seconds"] + values["window_w"]:
            raise ValueError(
                f"lookback_seconds ({values['lookback_seconds']}) must cover continuity_seconds "
                f"({values['continuity_seconds']}) plus one window ({values['window_w']})"
            )
        return values

    def required_hits(self, grid_interval: float) -> int:
        """Consecutive candidate windows needed before an alert"""
        step = self.stride * grid_interval
        hits = int(np.ceil(self.continuity_seconds / step - 1e-9))
        return max(1, hits)


class WindowVerdict(BaseModel):
    metric: Optional[MetricKind] = Field(None, description="None when all metrics are compared at once")
    window_start: int = Field(..., ge=0)
    candidate_machine: Optional[str] = None
    normal_scores: np.ndarray
    machine_ids: List[str]
    threshold: float

    class Config:
        arbitrary_types_allowed = True
        allow_mutation = False

    @validator("normal_scores", pre=True)
    def as_vector(cls, v):
        return np.asarray(v, dtype=np.float64).reshape(-1)

    @root_validator(skip_on_failure=True)
    def candidate_iff_above_threshold(cls, values):
        scores = values["normal_scores"]
        if scores.size != len(values["machine_ids"]):
            raise ValueError("one normal score per machine expected")
        above = scores.size > 0 and float(scores.max()) > values["threshold"]
        if above != (values["candidate_machine"] is not None):
            raise ValueError("candidate must be present exactly when the max normal score exceeds the threshold")
        return values

    @property
    def peak_score(self) -> float:
        return float(self.normal_scores.max()) if self.normal_scores.size else 0.0


class Alert(BaseModel):
    task_id: str
    machine_id: str
    metric: Optional[MetricKind] = None
    first_window_start: int = Field(..., ge=0, description="Grid index of the first window in the run")
    last_window_start: int = Field(..., ge=0, description="Grid index of the window that triggered the alert")
    consecutive_hits: int = Field(..., ge=1)
    peak_normal_score: float
    grid_start: float = 0.0
    grid_interval: float = 1.0
    pipeline: Pipeline = Pipeline.VAE

    class Config:
        allow_mutation = False

    @property
    def first_window_time(self) -> float:
        return self.grid_start + self.first_window_start * self.grid_interval

    @property
    def last_window_time(self) -> float:
        return self.grid_start + self.last_window_start * self.grid_interval

    def to_record(self) -> Dict[str, Any]:
        """One JSON-lines alert; window starts in epoch seconds, grid indices kept alongside"""
        return {
            "task_id": self.task_id,
            "machine_id": self.machine_id,
            "metric": self.metric.value if self.metric is not None else None,
            "first_window_start": self.first_window_time,
            "last_window_start": self.last_window_time,
            "first_window_index": self.first_window_start,
            "last_window_index": self.last_window_start,
            "consecutive_hits": self.consecutive_hits,
            "peak_normal_score": self.peak_normal_score,
            "grid_interval": self.grid_interval,
            "pipeline": self.pipeline.value,
        }

    @classmethod
    def from_record(cls, record: Dict[str, Any]) -> "Alert":
        interval = float(record.get("grid_interval", 1.0))
        first_index = int(record["first_window_index"])
        return cls(
            task_id=record["task_id"],
            machine_id=record["machine_id"],
            metric=record.get("metric"),
            first_window_start=first_index,
            last_window_start=int(record["last_window_index"]),
            consecutive_hits=int(record["consecutive_hits"]),
            peak_normal_score=float(record["peak_normal_score"]),
            grid_start=float(record["first_window_start"]) - first_index * interval,
            grid_interval=interval,
            pipeline=record.get("pipeline", Pipeline.VAE.value),
        )


class StatFeatureVector(BaseModel):
    """Moments of one machine's window, the MD baseline's raw features"""

    machine_id: str
    mean: float
    variance: float = Field(..., ge=0)
    skewness: float
    kurtosis: float

    class Config:
        allow_mutation = False

    def as_array(self) -> np.ndarray:
        return np.array([self.mean, self.variance, self.skewness, self.kurtosis], dtype=np.float64)


class SessionStats(BaseModel):
    """What one detection session looked at"""

    task_id: str
    pipeline: Pipeline
    evaluated_metrics: List[Optional[MetricKind]] = Field(default_factory=list)
    windows_scanned: int = 0
    seconds: float = 0.0
