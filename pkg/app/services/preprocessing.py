"""Trace ingestion, grid alignment, normalization and windowing"""
from pathlib import Path
from typing import Dict, Iterator, Mapping, Optional, Sequence, Tuple
import logging
import re

import numpy as np
import orjson
import pandas as pd
from numpy.lib.stride_tricks import sliding_window_view

from app.core import binio
from app.core.errors import (
    AlreadyNormalized,
    DuplicateSample,
    EmptyOverlap,
    GridMismatch,
    MalformedRow,
    TooFewMachines,
    UnknownMetric,
    WindowTooLong,
)
from app.models.catalog import CATALOG, DEFAULT_BOUNDS, MetricKind, catalog_order
from app.schemas.traces import AlignedTensor, RawTraceSet, SampleStream, TaskTensors, TraceFormat, Window

logger = logging.getLogger(__name__)

TRACE_COLUMNS = ["timestamp", "machine_id", "metric", "value"]
TENSOR_FORMAT_VERSION = 1

# grid rounding tolerance, in grid units
_GRID_EPS = 1e-9


# --- Parsing ---

def trace_format_for(path: Path) -> TraceFormat:
    return TraceFormat.CSV if Path(path).suffix.lower() == ".csv" else TraceFormat.JSONL


def _read_csv_rows(path: Path) -> pd.DataFrame:
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False, skipinitialspace=True)
    except pd.errors.EmptyDataError:
        return pd.DataFrame(columns=TRACE_COLUMNS + ["line"])
    except pd.errors.ParserError as e:
        match = re.search(r"line (\d+)", str(e))
        raise MalformedRow(int(match.group(1)) if match else 0, f"unparseable CSV ({e})") from e
    missing = [c for c in TRACE_COLUMNS if c not in df.columns]
    if missing:
        raise MalformedRow(1, f"header lacks columns {missing}")
    df = df[TRACE_COLUMNS].fillna("")
    # header is line 1
    df["line"] = np.arange(len(df)) + 2
    return df


def _parse_floats(column: pd.Series) -> np.ndarray:
    """Exact decimal to double conversion; anything unparseable becomes NaN"""

    def one(text: str) -> float:
        try:
            return float(text)
        except ValueError:
            return np.nan

    return np.fromiter((one(text) for text in column), dtype=np.float64, count=len(column))


def _read_jsonl_rows(path: Path) -> pd.DataFrame:
    records = []
    with open(path, "rb") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                obj = orjson.loads(raw)
            except orjson.JSONDecodeError as e:
                raise MalformedRow(lineno, f"invalid JSON ({e})") from e
            if not isinstance(obj, dict):
                raise MalformedRow(lineno, "expected a JSON object")
            missing = [c for c in TRACE_COLUMNS if c not in obj]
            if missing:
                raise MalformedRow(lineno, f"missing keys {missing}")
            records.append({c: "" if obj[c] is None else str(obj[c]) for c in TRACE_COLUMNS} | {"line": lineno})
    return pd.DataFrame.from_records(records, columns=TRACE_COLUMNS + ["line"])


def parse_trace(path: Path, fmt: Optional[TraceFormat] = None, task_id: Optional[str] = None) -> RawTraceSet:
    """Read a telemetry trace file into per-(machine, metric) sample streams"""
    path = Path(path)
    fmt = fmt or trace_format_for(path)
    task_id = task_id or path.name.split(".")[0]
    df = _read_csv_rows(path) if fmt == TraceFormat.CSV else _read_jsonl_rows(path)
    if df.empty:
        logger.info(f"Trace {path} holds no samples")
        return RawTraceSet(task_id=task_id)

    lines = df["line"].to_numpy()
    timestamps = _parse_floats(df["timestamp"])
    values = _parse_floats(df["value"])
    machine_ids = df["machine_id"].str.strip()

    bad = ~np.isfinite(timestamps)
    if bad.any():
        i = int(np.argmax(bad))
        raise MalformedRow(int(lines[i]), f"timestamp '{df['timestamp'].iloc[i]}' is not a finite number")
    bad = ~np.isfinite(values)
    if bad.any():
        i = int(np.argmax(bad))
        raise MalformedRow(int(lines[i]), f"value '{df['value'].iloc[i]}' is not a finite number")
    bad = (machine_ids == "").to_numpy()
    if bad.any():
        i = int(np.argmax(bad))
        raise MalformedRow(int(lines[i]), "empty machine_id")

    metric_of: Dict[str, MetricKind] = {}
    for name, line in zip(df["metric"], lines):
        if name in metric_of:
            continue
        try:
            metric_of[name] = MetricKind(name.strip())
        except ValueError:
            raise UnknownMetric(name, line=int(line)) from None

    frame = pd.DataFrame(
        {
            "machine_id": machine_ids.to_numpy(),
            "metric": df["metric"].map(metric_of).to_numpy(),
            "timestamp": timestamps,
            "value": values,
            "line": lines,
        }
    )
    dup = frame.duplicated(subset=["machine_id", "metric", "timestamp"], keep="first").to_numpy()
    if dup.any():
        row = frame.iloc[int(np.argmax(dup))]
        raise DuplicateSample(int(row["line"]), row["machine_id"], row["metric"].value, float(row["timestamp"]))

    streams: Dict[Tuple[str, MetricKind], SampleStream] = {}
    for (machine, metric), group in frame.groupby(["machine_id", "metric"], sort=False):
        group = group.sort_values("timestamp", kind="stable")
        streams[(machine, metric)] = SampleStream(
            timestamps=group["timestamp"].to_numpy(), values=group["value"].to_numpy()
        )
    logger.debug(f"Parsed {len(frame)} samples into {len(streams)} streams from {path}")
    return RawTraceSet(task_id=task_id, streams=streams)


def write_trace(traces: RawTraceSet, path: Path, fmt: Optional[TraceFormat] = None) -> None:
    """Write a trace file, rows ordered by machine, catalog metric order, then time"""
    path = Path(path)
    fmt = fmt or trace_format_for(path)
    frames = []
    for machine in traces.machine_ids():
        for metric in CATALOG:
            if (machine, metric) not in traces.streams:
                continue
            stream = traces.stream(machine, metric)
            frames.append(
                pd.DataFrame(
                    {
                        "timestamp": stream.timestamps,
                        "machine_id": machine,
                        "metric": metric.value,
                        "value": stream.values,
                    }
                )
            )
    df = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=TRACE_COLUMNS)
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt == TraceFormat.CSV:
        df.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")
    else:
        with open(path, "wb") as fh:
            for record in df.to_dict(orient="records"):
                fh.write(orjson.dumps(record, option=orjson.OPT_SERIALIZE_NUMPY) + b"\n")


# --- Alignment ---

def _grid(first: float, last: float, grid_interval: float) -> np.ndarray:
    start = np.ceil(first / grid_interval - _GRID_EPS) * grid_interval
    end = np.floor(last / grid_interval + _GRID_EPS) * grid_interval
    if start > end:
        raise EmptyOverlap(f"no grid point in the common range [{first}, {last}]")
    n = int(round((end - start) / grid_interval)) + 1
    return start + np.arange(n) * grid_interval


def nearest_indices(timestamps: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Index of the sample nearest each grid point; ties go to the earlier sample"""
    right = np.searchsorted(timestamps, grid, side="left")
    right = np.clip(right, 0, timestamps.size - 1)
    left = np.clip(right - 1, 0, timestamps.size - 1)
    take_left = np.abs(grid - timestamps[left]) <= np.abs(timestamps[right] - grid)
    return np.where(take_left, left, right)


def _overlap(streams: Sequence[SampleStream]) -> Tuple[float, float]:
    for stream in streams:
        if len(stream) == 0:
            raise EmptyOverlap("a machine stream holds no samples")
    return max(float(s.timestamps[0]) for s in streams), min(float(s.timestamps[-1]) for s in streams)


def _resample(streams: Sequence[SampleStream], grid: np.ndarray) -> np.ndarray:
    return np.vstack([s.values[nearest_indices(s.timestamps, grid)] for s in streams])


def align(raw: RawTraceSet, metric: MetricKind, grid_interval: float = 1.0) -> AlignedTensor:
    """Resample one metric of every machine onto the common time grid"""
    machines = raw.machines(metric)
    if len(machines) < 2:
        raise TooFewMachines(f"{metric.value}: {len(machines)} machine(s) carry the metric, need at least 2")
    streams = [raw.stream(m, metric) for m in machines]
    grid = _grid(*_overlap(streams), grid_interval)
    return AlignedTensor(
        task_id=raw.task_id,
        metric=metric,
        machine_ids=machines,
        grid_start=float(grid[0]),
        grid_interval=grid_interval,
        values=_resample(streams, grid),
    )


def align_task(
    raw: RawTraceSet, metrics: Optional[Sequence[MetricKind]] = None, grid_interval: float = 1.0
) -> TaskTensors:
    """Align every requested metric onto one grid shared across machines and metrics"""
    metrics = catalog_order(metrics) if metrics is not None else raw.metrics()
    if not metrics:
        raise GridMismatch(f"task {raw.task_id}: no metrics to align")
    carriers = [set(raw.machines(m)) for m in metrics]
    machines = sorted(set.intersection(*carriers))
    dropped = sorted(set.union(*carriers) - set(machines))
    if dropped:
        logger.warning(f"Task {raw.task_id}: dropping machines missing some metrics: {dropped}")
    if len(machines) < 2:
        raise TooFewMachines(f"task {raw.task_id}: {len(machines)} machine(s) carry every metric, need at least 2")

    per_metric = {m: [raw.stream(machine, m) for machine in machines] for m in metrics}
    first, last = _overlap([s for streams in per_metric.values() for s in streams])
    grid = _grid(first, last, grid_interval)
    tensors = {
        m: AlignedTensor(
            task_id=raw.task_id,
            metric=m,
            machine_ids=machines,
            grid_start=float(grid[0]),
            grid_interval=grid_interval,
            values=_resample(streams, grid),
        )
        for m, streams in per_metric.items()
    }
    return TaskTensors.build(raw.task_id, tensors)


# --- Normalization ---

def normalize_minmax(
    tensor: AlignedTensor, bounds: Optional[Mapping[MetricKind, Tuple[float, float]]] = None
) -> AlignedTensor:
    if tensor.normalized:
        raise AlreadyNormalized(f"{tensor.task_id}/{tensor.metric.value} is already normalized")
    lo, hi = (bounds or DEFAULT_BOUNDS).get(tensor.metric, DEFAULT_BOUNDS[tensor.metric])
    scaled = np.clip((tensor.values - lo) / (hi - lo), 0.0, 1.0)
    return tensor.with_values(scaled, normalized=True)


def normalize_task(
    task: TaskTensors, bounds: Optional[Mapping[MetricKind, Tuple[float, float]]] = None
) -> TaskTensors:
    return TaskTensors.build(task.task_id, {m: normalize_minmax(t, bounds) for m, t in task.tensors.items()})


# --- Windowing ---

def _check_window(n_steps: int, w: int, stride: int) -> None:
    if w < 2 or stride < 1:
        raise ValueError(f"window length must be >= 2 and stride >= 1, got w={w} stride={stride}")
    if w > n_steps:
        raise WindowTooLong(f"window length {w} exceeds the {n_steps} available timesteps")


def window_starts(n_steps: int, w: int, stride: int = 1) -> np.ndarray:
    _check_window(n_steps, w, stride)
    return np.arange(0, n_steps - w + 1, stride)


def window_iter(tensor: AlignedTensor, w: int, stride: int = 1) -> Iterator[Window]:
    """Windows machine by machine, each machine's in time order"""
    starts = window_starts(tensor.n_steps, w, stride)
    for machine_index in range(tensor.n_machines):
        row = tensor.values[machine_index]
        for start in starts:
            yield Window(
                machine_index=machine_index,
                metric=tensor.metric,
                start_index=int(start),
                data=row[start : start + w],
            )


def window_matrix(values: np.ndarray, w: int, stride: int = 1) -> np.ndarray:
    """machines x n_windows x w (x K for stacked input) view over a tensor's rows"""
    _check_window(values.shape[1], w, stride)
    view = sliding_window_view(values, w, axis=1)[:, ::stride]
    if values.ndim == 3:
        # sliding_window_view puts the window axis last
        view = np.moveaxis(view, -1, 2)
    return view


# --- Tensor cache ---

def save_task_tensors(task: TaskTensors, path: Path) -> None:
    metrics = task.metrics
    header = {
        "task_id": task.task_id,
        "machine_ids": task.machine_ids,
        "grid_start": task.grid_start,
        "grid_interval": task.grid_interval,
        "metrics": [m.value for m in metrics],
        "normalized": [task[m].normalized for m in metrics],
    }
    binio.write_container(path, TENSOR_FORMAT_VERSION, header, {m.value: task[m].values for m in metrics})


def load_task_tensors(path: Path) -> TaskTensors:
    header, arrays = binio.read_container(path, TENSOR_FORMAT_VERSION)
    tensors = {}
    for name, normalized in zip(header["metrics"], header["normalized"]):
        metric = MetricKind(name)
        tensors[metric] = AlignedTensor(
            task_id=header["task_id"],
            metric=metric,
            machine_ids=header["machine_ids"],
            grid_start=header["grid_start"],
            grid_interval=header["grid_interval"],
            values=arrays[name],
            normalized=normalized,
        )
    return TaskTensors.build(header["task_id"], tensors)

