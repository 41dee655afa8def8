"""Synthetic cluster telemetry with injectable, labeled machine faults"""
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple
import logging

import numpy as np
import orjson

from app.core.errors import ProfileOutOfBounds
from app.core.worker_pool import map_ordered
from app.models.catalog import CATALOG, DEFAULT_BOUNDS, MetricKind
from app.models.faults import FaultType
from app.schemas.simulation import (
    ClusterSpec,
    CorpusEntry,
    CorpusManifest,
    CorpusSplit,
    EffectKind,
    FaultProfile,
    FaultRecord,
    GroundTruth,
    LabeledTask,
    Perturbation,
    Waveform,
    WaveformKind,
)
from app.schemas.traces import RawTraceSet, SampleStream
from app.services.preprocessing import parse_trace, write_trace

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"

# Normalized operating bands per metric family: (level range, amplitude range)
_LOW_SIGNAL = ((0.04, 0.08), (0.0, 0.01))
_MID_SIGNAL = ((0.45, 0.65), (0.05, 0.12))
_HIGH_SIGNAL = ((0.7, 0.85), (0.03, 0.08))

_SQUARE_METRICS = {
    MetricKind.GPU_DUTY_CYCLE,
    MetricKind.GPU_SM_ACTIVITY,
    MetricKind.GPU_TENSOR_CORE_ACTIVITY,
}
_LOW_METRICS = {
    MetricKind.PFC_TX_PACKET_RATE,
    MetricKind.ECN_PACKET_RATE,
    MetricKind.CNP_PACKET_RATE,
}
_HIGH_METRICS = {
    MetricKind.CPU_USAGE,
    MetricKind.GPU_MEMORY_USED,
    MetricKind.MEMORY_USAGE,
    MetricKind.GPU_TEMPERATURE,
    MetricKind.GPU_CLOCKS,
}
_COMPOSITE_METRICS = {MetricKind.GPU_POWER_DRAW, MetricKind.NVLINK_BANDWIDTH}


# --- Waveforms and clusters ---

def default_waveforms(rng: np.random.Generator, metrics: Optional[Sequence[MetricKind]] = None) -> Dict[MetricKind, Waveform]:
    """One shared base signal per metric, drawn from the metric family's operating band"""
    metrics = list(metrics) if metrics is not None else list(CATALOG)
    waveforms: Dict[MetricKind, Waveform] = {}
    for metric in CATALOG:
        # draw for every catalog metric so a subset does not shift the others
        period = float(rng.uniform(30.0, 120.0))
        phase = float(rng.uniform(0.0, 2.0 * np.pi))
        u_level, u_amp = rng.random(), rng.random()
        if metric not in metrics:
            continue
        if metric in _LOW_METRICS:
            (lo, hi), (a_lo, a_hi) = _LOW_SIGNAL
        elif metric in _HIGH_METRICS:
            (lo, hi), (a_lo, a_hi) = _HIGH_SIGNAL
        else:
            (lo, hi), (a_lo, a_hi) = _MID_SIGNAL
        level = lo + (hi - lo) * u_level
        amplitude = a_lo + (a_hi - a_lo) * u_amp
        if metric in _SQUARE_METRICS:
            # compute / communicate phases of a training step
            waveforms[metric] = Waveform(
                kind=WaveformKind.SQUARE, level=level, period=period, phase=phase, low=-amplitude, high=amplitude
            )
        elif metric in _COMPOSITE_METRICS:
            waveforms[metric] = Waveform(
                kind=WaveformKind.COMPOSITE,
                level=level,
                components=[
                    Waveform(kind=WaveformKind.SINE, level=0.0, amplitude=amplitude, period=period, phase=phase),
                    Waveform(kind=WaveformKind.SQUARE, level=0.0, period=period / 2.0, low=-amplitude / 2, high=amplitude / 2),
                ],
            )
        else:
            waveforms[metric] = Waveform(
                kind=WaveformKind.SINE, level=level, amplitude=amplitude, period=period, phase=phase
            )
    return waveforms


def to_physical(values: np.ndarray, bounds: Tuple[float, float]) -> np.ndarray:
    lo, hi = bounds
    return lo + (hi - lo) * values


def gen_cluster(spec: ClusterSpec) -> RawTraceSet:
    """Shared waveform per metric plus iid Gaussian noise seeded per (machine, metric)"""
    t = np.arange(spec.n_steps, dtype=np.float64) * spec.grid_interval
    timestamps = spec.start_time + t
    streams: Dict[Tuple[str, MetricKind], SampleStream] = {}
    for metric, waveform in spec.waveforms.items():
        base = waveform.evaluate(t)
        sigma = spec.sigma_for(metric)
        for i, machine in enumerate(spec.machine_ids):
            rng = np.random.default_rng(np.random.SeedSequence([spec.seed, i, metric.index]))
            noisy = base + rng.normal(0.0, sigma, size=base.shape) if sigma > 0 else base
            streams[(machine, metric)] = SampleStream(
                timestamps=timestamps, values=to_physical(noisy, spec.bounds_for(metric))
            )
    return RawTraceSet(task_id=spec.task_id, streams=streams)


# --- Fault injection ---

def _trace_extent(traces: RawTraceSet) -> Tuple[float, float]:
    """(start, length in seconds) of a trace, counting the last sample's interval"""
    first = min(float(s.timestamps[0]) for s in traces.streams.values() if len(s))
    last = max(float(s.timestamps[-1]) for s in traces.streams.values() if len(s))
    steps = [float(np.min(np.diff(s.timestamps))) for s in traces.streams.values() if len(s) > 1]
    interval = min(steps) if steps else 0.0
    return first, last - first + interval


def _apply(
    values: np.ndarray, timestamps: np.ndarray, mask: np.ndarray, effect: Perturbation, onset: float, bounds: Tuple[float, float]
) -> np.ndarray:
    lo, hi = bounds
    out = values.copy()
    if effect.effect in (EffectKind.DROP_TO, EffectKind.SURGE_TO):
        out[mask] = lo + (hi - lo) * effect.level
    elif effect.effect == EffectKind.RAMP:
        out[mask] = values[mask] + (hi - lo) * effect.slope * (timestamps[mask] - onset)
    else:
        out[mask] = values[np.argmax(mask)]
    return out


def inject_fault(
    traces: RawTraceSet,
    profile: FaultProfile,
    bounds: Optional[Mapping[MetricKind, Tuple[float, float]]] = None,
) -> Tuple[RawTraceSet, GroundTruth]:
    """Rewrite the target machine's perturbed metrics over [onset, onset + duration).

    Perturbation levels and slopes are in normalized units and are mapped to
    physical units with the metric bounds.
    """
    if not traces.streams:
        raise ProfileOutOfBounds(f"{traces.task_id}: empty trace")
    machines = traces.machine_ids()
    if profile.target_machine >= len(machines):
        raise ProfileOutOfBounds(f"target machine {profile.target_machine} but the task has {len(machines)} machines")
    start, length = _trace_extent(traces)
    if profile.onset + profile.duration > length + 1e-9:
        raise ProfileOutOfBounds(
            f"fault [{profile.onset}, {profile.onset + profile.duration}) s exceeds the {length} s trace"
        )
    target = machines[profile.target_machine]
    for p in profile.perturbations:
        if (target, p.metric) not in traces.streams:
            raise ProfileOutOfBounds(f"{target} carries no {p.metric.value} stream")

    onset = start + profile.onset
    truth = GroundTruth(
        task_id=traces.task_id,
        faults=[FaultRecord(machine_id=target, fault_type=profile.fault_type, onset=onset, duration=profile.duration)],
    )
    if profile.duration == 0:
        return traces, truth

    bounds = bounds or DEFAULT_BOUNDS
    injected = traces
    for p in profile.perturbations:
        stream = traces.stream(target, p.metric)
        mask = (stream.timestamps >= onset) & (stream.timestamps < onset + profile.duration)
        if not mask.any():
            continue
        values = _apply(stream.values, stream.timestamps, mask, p, onset, bounds.get(p.metric, DEFAULT_BOUNDS[p.metric]))
        injected = injected.replace_stream(target, p.metric, SampleStream(timestamps=stream.timestamps, values=values))
    logger.debug(f"Injected {profile.fault_type.value} on {target} at +{profile.onset}s for {profile.duration}s")
    return injected, truth


# --- Fault-type templates ---

def default_profiles(
    duration: float = 360.0, surge_level: float = 0.9, drop_level: float = 0.02
) -> Dict[FaultType, FaultProfile]:
    """One template per fault type; perturbed metrics follow each type's most indicative metrics"""

    def drop(metric: MetricKind) -> Perturbation:
        return Perturbation(metric=metric, effect=EffectKind.DROP_TO, level=drop_level)

    def surge(metric: MetricKind) -> Perturbation:
        return Perturbation(metric=metric, effect=EffectKind.SURGE_TO, level=surge_level)

    def flat(metric: MetricKind) -> Perturbation:
        return Perturbation(metric=metric, effect=EffectKind.FLATLINE)

    def ramp(metric: MetricKind, slope: float) -> Perturbation:
        return Perturbation(metric=metric, effect=EffectKind.RAMP, slope=slope)

    M = MetricKind
    perturbations: Dict[FaultType, List[Perturbation]] = {
        FaultType.ECC_ERROR: [drop(M.CPU_USAGE), drop(M.GPU_DUTY_CYCLE), drop(M.MEMORY_USAGE)],
        FaultType.PCIE_DOWNGRADING: [surge(M.PFC_TX_PACKET_RATE)],
        FaultType.NIC_DROPOUT: [
            drop(M.CPU_USAGE),
            drop(M.GPU_DUTY_CYCLE),
            drop(M.TCP_RDMA_THROUGHPUT),
            drop(M.MEMORY_USAGE),
        ],
        FaultType.GPU_CARD_DROP: [
            drop(M.CPU_USAGE),
            drop(M.GPU_DUTY_CYCLE),
            drop(M.GPU_SM_ACTIVITY),
            drop(M.GPU_POWER_DRAW),
        ],
        FaultType.NVLINK_ERROR: [drop(M.CPU_USAGE), drop(M.NVLINK_BANDWIDTH), drop(M.MEMORY_USAGE)],
        # weak second-level signature: a slow throughput decline
        FaultType.AOC_ERROR: [ramp(M.TCP_RDMA_THROUGHPUT, -0.002)],
        FaultType.CUDA_EXEC_ERROR: [drop(M.CPU_USAGE), drop(M.GPU_DUTY_CYCLE), drop(M.MEMORY_USAGE)],
        # the host keeps running while the hung GPU idles
        FaultType.GPU_EXEC_ERROR: [drop(M.GPU_DUTY_CYCLE), flat(M.GPU_SM_ACTIVITY)],
        FaultType.HDFS_ERROR: [drop(M.CPU_USAGE), drop(M.GPU_DUTY_CYCLE)],
        FaultType.MACHINE_UNREACHABLE: [
            flat(M.TCP_THROUGHPUT),
            flat(M.TCP_RDMA_THROUGHPUT),
            drop(M.CPU_USAGE),
        ],
    }
    return {
        fault_type: FaultProfile(fault_type=fault_type, duration=duration, perturbations=perturbations[fault_type])
        for fault_type in FaultType
    }


# --- Corpora ---

def _draw_fault(u: float, fault_mix: Mapping[FaultType, float]) -> Optional[FaultType]:
    cumulative = 0.0
    for fault_type in FaultType:
        cumulative += fault_mix.get(fault_type, 0.0)
        if u < cumulative:
            return fault_type
    return None


def _gen_task(args) -> LabeledTask:
    index, seed, settings, fault_mix, profiles, bounds = args
    rng = np.random.default_rng(np.random.SeedSequence([seed, index]))
    machines = int(rng.choice(settings.machine_choices))
    task_seed = int(rng.integers(0, 2**31 - 1))
    u_fault = float(rng.random())
    u_target = float(rng.random())
    u_onset = float(rng.random())
    task_id = f"task-{index:04d}"
    spec = ClusterSpec(
        task_id=task_id,
        machines=machines,
        duration=settings.duration,
        grid_interval=settings.grid_interval,
        waveforms=default_waveforms(np.random.default_rng(task_seed)),
        noise_sigma=settings.noise_sigma,
        bounds=dict(bounds),
        seed=task_seed,
    )
    traces = gen_cluster(spec)
    fault_type = _draw_fault(u_fault, fault_mix)
    if fault_type is None:
        return LabeledTask(traces=traces, truth=GroundTruth(task_id=task_id), seed=task_seed, machines=machines)
    template = profiles[fault_type]
    target = min(int(u_target * machines), machines - 1)
    latest = max(spec.n_steps * spec.grid_interval - template.duration, 0.0)
    onset = float(np.floor(u_onset * latest / spec.grid_interval) * spec.grid_interval)
    profile = template.placed(target, onset)
    traces, truth = inject_fault(traces, profile, bounds)
    return LabeledTask(traces=traces, truth=truth, seed=task_seed, machines=machines, profile=profile)


def gen_labeled_corpus(
    n_tasks: int,
    settings,
    fault_mix: Optional[Mapping[FaultType, float]] = None,
    seed: Optional[int] = None,
    bounds: Optional[Mapping[MetricKind, Tuple[float, float]]] = None,
    workers: int = 1,
) -> List[LabeledTask]:
    """Deterministic corpus; each task draws its own seed, machine count and fault from the mix.

    ``settings`` is a SimulatorSettings; ``fault_mix`` and ``seed`` default to its values.
    """
    fault_mix = dict(settings.fault_mix if fault_mix is None else fault_mix)
    if any(p < 0 for p in fault_mix.values()) or sum(fault_mix.values()) > 1.0 + 1e-9:
        raise ValueError("fault mix proportions must be >= 0 and sum to <= 1")
    seed = settings.seed if seed is None else seed
    profiles = default_profiles(settings.fault_duration, settings.surge_level, settings.drop_level)
    bounds = dict(bounds or DEFAULT_BOUNDS)
    jobs = [(i, seed, settings, fault_mix, profiles, bounds) for i in range(n_tasks)]
    corpus = map_ordered(_gen_task, jobs, workers)
    n_faulty = sum(1 for task in corpus if task.truth.is_faulty)
    logger.info(f"Generated {n_tasks} tasks ({n_faulty} faulty) with seed {seed}")
    return corpus


def _dump(doc) -> bytes:
    return orjson.dumps(doc, option=orjson.OPT_INDENT_2 | orjson.OPT_SORT_KEYS | orjson.OPT_NON_STR_KEYS)


def truth_path(directory: Path, task_id: str) -> Path:
    return Path(directory) / f"{task_id}.truth.json"


def trace_path(directory: Path, task_id: str) -> Path:
    return Path(directory) / f"{task_id}.csv"


def write_corpus(
    corpus: Sequence[LabeledTask], directory: Path, seed: int, train_fraction: float = 0.5, settings=None
) -> CorpusManifest:
    """One trace CSV and one ground-truth JSON per task plus a replay manifest.

    The first ``round(n * train_fraction)`` tasks form the training split.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    n_train = int(round(len(corpus) * train_fraction))
    entries = []
    for i, task in enumerate(corpus):
        write_trace(task.traces, trace_path(directory, task.task_id))
        truth_path(directory, task.task_id).write_bytes(_dump(task.truth.dict()))
        entries.append(
            CorpusEntry(
                task_id=task.task_id,
                seed=task.seed,
                machines=task.machines,
                split=CorpusSplit.TRAIN if i < n_train else CorpusSplit.EVAL,
                fault_type=task.truth.fault_type,
                profile=task.profile,
            )
        )
    manifest = CorpusManifest(seed=seed, tasks=entries, settings=settings.dict() if settings is not None else {})
    (directory / MANIFEST_NAME).write_bytes(_dump(manifest.dict()))
    logger.info(f"Wrote {len(corpus)} tasks to {directory} ({n_train} train)")
    return manifest


def read_manifest(directory: Path) -> CorpusManifest:
    return CorpusManifest.parse_obj(orjson.loads((Path(directory) / MANIFEST_NAME).read_bytes()))


def read_truth(directory: Path, task_id: str) -> GroundTruth:
    return GroundTruth.parse_obj(orjson.loads(truth_path(directory, task_id).read_bytes()))


def read_corpus(directory: Path, split: Optional[CorpusSplit] = None) -> List[Tuple[RawTraceSet, GroundTruth]]:
    manifest = read_manifest(directory)
    entries = manifest.tasks if split is None else manifest.split(split)
    return [
        (parse_trace(trace_path(directory, e.task_id), task_id=e.task_id), read_truth(directory, e.task_id))
        for e in entries
    ]
