from enum import Enum
from typing import Dict, List, Tuple

import numpy as np
from pydantic import BaseModel, Field, root_validator, validator

from app.models.catalog import MetricKind, catalog_order


class TraceFormat(str, Enum):
    CSV = "csv"
    JSONL = "jsonl"


class SampleStream(BaseModel):
    """Samples of one metric on one machine, sorted by timestamp"""

    timestamps: np.ndarray
    values: np.ndarray

    class Config:
        arbitrary_types_allowed = True
        allow_mutation = False

    @validator("timestamps", "values", pre=True)
    def as_float_vector(cls, v):
        arr = np.array(v, dtype=np.float64).reshape(-1)
        arr.setflags(write=False)
        return arr

    @root_validator(skip_on_failure=True)
    def check_stream(cls, values):
        ts, vs = values["timestamps"], values["values"]
        if ts.shape != vs.shape:
            raise ValueError(f"timestamps ({ts.size}) and values ({vs.size}) differ in length")
        if not np.all(np.isfinite(ts)) or not np.all(np.isfinite(vs)):
            raise ValueError("stream contains non-finite entries")
        if ts.size > 1 and not np.all(np.diff(ts) > 0):
            raise ValueError("timestamps must be strictly increasing")
        return values

    def __len__(self) -> int:
        return int(self.timestamps.size)


class RawTraceSet(BaseModel):
    task_id: str
    streams: Dict[Tuple[str, MetricKind], SampleStream] = Field(default_factory=dict)

    class Config:
        arbitrary_types_allowed = True

    def machines(self, metric: MetricKind) -> List[str]:
        """Machine ids carrying the metric, sorted"""
        return sorted(machine for machine, m in self.streams if m == metric)

    def metrics(self) -> List[MetricKind]:
        return catalog_order(m for _, m in self.streams)

    def machine_ids(self) -> List[str]:
        return sorted({machine for machine, _ in self.streams})

    def stream(self, machine_id: str, metric: MetricKind) -> SampleStream:
        return self.streams[(machine_id, metric)]

    def replace_stream(self, machine_id: str, metric: MetricKind, stream: SampleStream) -> "RawTraceSet":
        """Copy of the trace set with one stream swapped; other streams are shared"""
        streams = dict(self.streams)
        streams[(machine_id, metric)] = stream
        return RawTraceSet(task_id=self.task_id, streams=streams)


class AlignedTensor(BaseModel):
    """Machines x timesteps matrix for one metric of one task"""

    task_id: str
    metric: MetricKind
    machine_ids: List[str]
    grid_start: float
    grid_interval: float = Field(1.0, gt=0)
    values: np.ndarray
    normalized: bool = False

    class Config:
        arbitrary_types_allowed = True
        allow_mutation = False

    @validator("values", pre=True)
    def as_matrix(cls, v):
        arr = np.array(v, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError(f"values must be a machines x timesteps matrix, got {arr.ndim} dims")
        arr.setflags(write=False)
        return arr

    @root_validator(skip_on_failure=True)
    def check_tensor(cls, values):
        arr, machines = values["values"], values["machine_ids"]
        if len(machines) < 2:
            raise ValueError("an aligned tensor needs at least 2 machines")
        if len(set(machines)) != len(machines):
            raise ValueError("machine ids must be unique")
        if arr.shape[0] != len(machines):
            raise ValueError(f"{arr.shape[0]} rows for {len(machines)} machines")
        if not np.all(np.isfinite(arr)):
            raise ValueError("aligned tensor has missing or non-finite cells")
        if values["normalized"] and arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
            raise ValueError("normalized tensor values must lie in [0, 1]")
        return values

    @property
    def n_machines(self) -> int:
        return int(self.values.shape[0])

    @property
    def n_steps(self) -> int:
        return int(self.values.shape[1])

    def time_of(self, index: int) -> float:
        return self.grid_start + index * self.grid_interval

    def timestamps(self) -> np.ndarray:
        return self.grid_start + np.arange(self.n_steps) * self.grid_interval

    def with_values(self, values: np.ndarray, *, normalized: bool) -> "AlignedTensor":
        return AlignedTensor(
            task_id=self.task_id,
            metric=self.metric,
            machine_ids=list(self.machine_ids),
            grid_start=self.grid_start,
            grid_interval=self.grid_interval,
            values=values,
            normalized=normalized,
        )

    def permuted(self, order: List[int]) -> "AlignedTensor":
        """Rows reordered; machine ids follow their rows"""
        return AlignedTensor(
            task_id=self.task_id,
            metric=self.metric,
            machine_ids=[self.machine_ids[i] for i in order],
            grid_start=self.grid_start,
            grid_interval=self.grid_interval,
            values=self.values[list(order)],
            normalized=self.normalized,
        )


class Window(BaseModel):
    machine_index: int = Field(..., ge=0)
    metric: MetricKind
    start_index: int = Field(..., ge=0)
    data: np.ndarray

    class Config:
        arbitrary_types_allowed = True
        allow_mutation = False

    @validator("data", pre=True)
    def as_vector(cls, v):
        arr = np.asarray(v, dtype=np.float64).reshape(-1)
        if arr.size < 2:
            raise ValueError("a window needs at least 2 samples")
        return arr

    @property
    def w(self) -> int:
        return int(self.data.size)


class TaskTensors(BaseModel):
    """Every metric of one task aligned onto one shared grid"""

    task_id: str
    machine_ids: List[str]
    grid_start: float
    grid_interval: float = 1.0
    tensors: Dict[MetricKind, AlignedTensor]

    class Config:
        arbitrary_types_allowed = True

    @classmethod
    def build(cls, task_id: str, tensors: Dict[MetricKind, AlignedTensor]) -> "TaskTensors":
        """Bundle tensors, raising GridMismatch unless they share machines and grid"""
        from app.core.errors import GridMismatch

        if not tensors:
            raise GridMismatch(f"task {task_id}: no tensors to bundle")
        first = next(iter(tensors.values()))
        for metric, tensor in tensors.items():
            if tensor.machine_ids != first.machine_ids:
                raise GridMismatch(f"{metric.value}: machine set differs from {first.metric.value}")
            if tensor.grid_start != first.grid_start or tensor.grid_interval != first.grid_interval:
                raise GridMismatch(f"{metric.value}: grid differs from {first.metric.value}")
            if tensor.n_steps != first.n_steps:
                raise GridMismatch(f"{metric.value}: {tensor.n_steps} steps, expected {first.n_steps}")
        return cls(
            task_id=task_id,
            machine_ids=list(first.machine_ids),
            grid_start=first.grid_start,
            grid_interval=first.grid_interval,
            tensors=dict(tensors),
        )

    @property
    def metrics(self) -> List[MetricKind]:
        return catalog_order(self.tensors)

    @property
    def n_steps(self) -> int:
        first = next(iter(self.tensors.values()), None)
        return first.n_steps if first is not None else 0

    def __getitem__(self, metric: MetricKind) -> AlignedTensor:
        return self.tensors[metric]

    def stacked(self, metrics: List[MetricKind]) -> np.ndarray:
        """machines x timesteps x metrics array in the given metric order"""
        return np.stack([self.tensors[m].values for m in metrics], axis=-1)
