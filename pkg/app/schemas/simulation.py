from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field, root_validator, validator

from app.models.catalog import DEFAULT_BOUNDS, MetricKind
from app.models.faults import FaultType
from app.schemas.traces import RawTraceSet


class WaveformKind(str, Enum):
    CONSTANT = "constant"
    SINE = "sine"
    SQUARE = "square"
    COMPOSITE = "composite"


class Waveform(BaseModel):
    """Shared base signal of one metric, in normalized units"""

    kind: WaveformKind = WaveformKind.CONSTANT
    level: float = Field(0.5, description="Offset added to the shape")
    amplitude: float = 0.0
    period: float = Field(60.0, gt=0, description="Seconds")
    phase: float = 0.0
    low: float = 0.0
    high: float = 1.0
    components: List["Waveform"] = Field(default_factory=list)

    class Config:
        allow_mutation = False

    @root_validator(skip_on_failure=True)
    def composite_has_parts(cls, values):
        if values["kind"] == WaveformKind.COMPOSITE and not values["components"]:
            raise ValueError("a composite waveform needs components")
        return values

    def evaluate(self, t: np.ndarray) -> np.ndarray:
        """Signal at seconds-since-start t"""
        t = np.asarray(t, dtype=np.float64)
        if self.kind == WaveformKind.CONSTANT:
            return np.full(t.shape, self.level)
        if self.kind == WaveformKind.SINE:
            return self.level + self.amplitude * np.sin(2.0 * np.pi * t / self.period + self.phase)
        if self.kind == WaveformKind.SQUARE:
            cycle = np.mod(t / self.period + self.phase / (2.0 * np.pi), 1.0)
            return self.level + np.where(cycle < 0.5, self.high, self.low)
        return self.level + sum(c.evaluate(t) for c in self.components)


Waveform.update_forward_refs()


class ClusterSpec(BaseModel):
    task_id: str = "task-0000"
    machines: int = Field(8, ge=2)
    duration: float = Field(907.0, description="Seconds of telemetry")
    grid_interval: float = Field(1.0, gt=0)
    start_time: float = Field(1.7e9, description="Epoch seconds of the first sample")
    waveforms: Dict[MetricKind, Waveform]
    noise_sigma: float = Field(0.005, ge=0, description="Per-sample Gaussian noise in normalized units")
    noise_overrides: Dict[MetricKind, float] = Field(default_factory=dict)
    bounds: Dict[MetricKind, Tuple[float, float]] = Field(default_factory=lambda: dict(DEFAULT_BOUNDS))
    seed: int = 0

    class Config:
        allow_mutation = False

    @root_validator(skip_on_failure=True)
    def check_spec(cls, values):
        if values["duration"] < 16 * values["grid_interval"]:
            raise ValueError("duration must cover at least 16 grid intervals")
        if not values["waveforms"]:
            raise ValueError("a cluster needs at least one metric")
        for metric, sigma in values["noise_overrides"].items():
            if sigma < 0:
                raise ValueError(f"{metric.value}: noise sigma must be >= 0")
        for metric in values["waveforms"]:
            lo, hi = values["bounds"].get(metric, DEFAULT_BOUNDS[metric])
            if not lo < hi:
                raise ValueError(f"{metric.value}: bounds must satisfy min < max")
        return values

    @property
    def n_steps(self) -> int:
        return int(np.floor(self.duration / self.grid_interval + 1e-9))

    @property
    def machine_ids(self) -> List[str]:
        return [f"node-{i:03d}" for i in range(self.machines)]

    def sigma_for(self, metric: MetricKind) -> float:
        return self.noise_overrides.get(metric, self.noise_sigma)

    def bounds_for(self, metric: MetricKind) -> Tuple[float, float]:
        return self.bounds.get(metric, DEFAULT_BOUNDS[metric])


class EffectKind(str, Enum):
    DROP_TO = "drop_to"
    SURGE_TO = "surge_to"
    RAMP = "ramp"
    FLATLINE = "flatline"


class Perturbation(BaseModel):
    metric: MetricKind
    effect: EffectKind
    level: Optional[float] = Field(None, description="Normalized target level for drop_to / surge_to")
    slope: Optional[float] = Field(None, description="Normalized units per second for ramp")

    class Config:
        allow_mutation = False

    @root_validator(skip_on_failure=True)
    def effect_arguments(cls, values):
        effect = values["effect"]
        if effect in (EffectKind.DROP_TO, EffectKind.SURGE_TO) and values["level"] is None:
            raise ValueError(f"{effect.value} needs a level")
        if effect == EffectKind.RAMP and values["slope"] is None:
            raise ValueError("ramp needs a slope")
        return values


class FaultProfile(BaseModel):
    fault_type: FaultType
    target_machine: int = Field(0, ge=0)
    onset: float = Field(0.0, ge=0, description="Seconds after the task start")
    duration: float = Field(360.0, ge=0)
    perturbations: List[Perturbation]

    class Config:
        allow_mutation = False

    @validator("perturbations")
    def non_empty(cls, v):
        if not v:
            raise ValueError("a fault profile perturbs at least one metric")
        return v

    def placed(self, target_machine: int, onset: float) -> "FaultProfile":
        return self.copy(update={"target_machine": target_machine, "onset": onset})

    @property
    def metrics(self) -> List[MetricKind]:
        return [p.metric for p in self.perturbations]


class FaultRecord(BaseModel):
    machine_id: str
    fault_type: FaultType
    onset: float = Field(..., description="Epoch seconds")
    duration: float = Field(..., ge=0)

    class Config:
        allow_mutation = False

    @property
    def end(self) -> float:
        return self.onset + self.duration

    def overlaps(self, start: float, end: float) -> bool:
        """Whether the fault's active interval meets the half-open span [start, end)"""
        return self.duration > 0 and self.onset < end and start < self.end


class GroundTruth(BaseModel):
    task_id: str
    faults: List[FaultRecord] = Field(default_factory=list)

    @property
    def is_faulty(self) -> bool:
        # zero-duration faults are recorded but never make a task faulty
        return any(f.duration > 0 for f in self.faults)

    @property
    def faulty_machines(self) -> List[str]:
        return sorted({f.machine_id for f in self.faults if f.duration > 0})

    @property
    def fault_type(self) -> Optional[FaultType]:
        active = [f for f in self.faults if f.duration > 0]
        return active[0].fault_type if active else None


class LabeledTask(BaseModel):
    traces: RawTraceSet
    truth: GroundTruth
    seed: int
    machines: int
    profile: Optional[FaultProfile] = None

    class Config:
        arbitrary_types_allowed = True

    @property
    def task_id(self) -> str:
        return self.truth.task_id


class CorpusSplit(str, Enum):
    TRAIN = "train"
    EVAL = "eval"


class CorpusEntry(BaseModel):
    task_id: str
    seed: int
    machines: int = Field(..., ge=2)
    split: CorpusSplit
    fault_type: Optional[FaultType] = None
    profile: Optional[FaultProfile] = None


class CorpusManifest(BaseModel):
    """Everything needed to regenerate a corpus bit-for-bit"""

    seed: int
    tasks: List[CorpusEntry]
    settings: Dict = Field(default_factory=dict, description="Simulator settings the corpus was drawn with")

    def split(self, which: CorpusSplit) -> List[CorpusEntry]:
        return [t for t in self.tasks if t.split == which]

    @property
    def task_ids(self) -> List[str]:
        return [t.task_id for t in self.tasks]
