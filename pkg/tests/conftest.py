from typing import Dict, List, Optional

import numpy as np
import pytest

from app.core.config import Settings, SimulatorSettings
from app.core.worker_pool import shutdown_worker_pool
from app.models.catalog import MetricKind
from app.schemas.simulation import ClusterSpec, Waveform, WaveformKind
from app.schemas.traces import AlignedTensor, RawTraceSet, TaskTensors
from app.schemas.vae import VaeHyperparams, VaeModel
from app.services.lstm_vae import train_model
from app.services.preprocessing import align_task, normalize_task, window_matrix
from app.services.simulator import gen_cluster


def make_tensors(
    values: Dict[MetricKind, np.ndarray],
    task_id: str = "task-test",
    machine_ids: Optional[List[str]] = None,
    grid_start: float = 0.0,
    grid_interval: float = 1.0,
    normalized: bool = True,
) -> TaskTensors:
    """Bundle machines x timesteps arrays into TaskTensors"""
    first = next(iter(values.values()))
    machine_ids = machine_ids or [f"node-{i:03d}" for i in range(first.shape[0])]
    return TaskTensors.build(
        task_id,
        {
            metric: AlignedTensor(
                task_id=task_id,
                metric=metric,
                machine_ids=machine_ids,
                grid_start=grid_start,
                grid_interval=grid_interval,
                values=arr,
                normalized=normalized,
            )
            for metric, arr in values.items()
        },
    )


def outlier_values(
    machines: int = 6, steps: int = 120, outlier: int = 2, onset: int = 40, seed: int = 0, level: float = 0.5
) -> np.ndarray:
    """Shared sine plus small noise; one machine drops to zero from `onset` on"""
    rng = np.random.default_rng(seed)
    t = np.arange(steps)
    base = level + 0.1 * np.sin(2 * np.pi * t / 30.0)
    values = np.clip(base + rng.normal(0.0, 0.005, size=(machines, steps)), 0.0, 1.0)
    values[outlier, onset:] = 0.0
    return values


# a typical host metric in the normal regime: 0.75 +- 0.05 with a one-minute period
NORMAL_CPU = Waveform(kind=WaveformKind.SINE, level=0.75, amplitude=0.05, period=60.0)
TRAIN_MACHINES = 6


def normal_cluster(machines: int = 8, seed: int = 0) -> RawTraceSet:
    spec = ClusterSpec(
        task_id="task-normal",
        machines=machines,
        waveforms={MetricKind.CPU_USAGE: NORMAL_CPU},
        noise_sigma=SimulatorSettings().noise_sigma,
        seed=seed,
    )
    return gen_cluster(spec)


@pytest.fixture(scope="session")
def trained_cpu_model() -> VaeModel:
    """CPU model with the default hyperparameters, fit on the first machines of a clean cluster"""
    hp = VaeHyperparams()
    tensors = normalize_task(align_task(normal_cluster()))
    windows = window_matrix(tensors[MetricKind.CPU_USAGE].values[:TRAIN_MACHINES], hp.w).reshape(-1, hp.w)
    return train_model(windows, hp, [MetricKind.CPU_USAGE])


@pytest.fixture
def tiny_hp() -> VaeHyperparams:
    return VaeHyperparams(w=4, hidden_size=3, latent_size=2, epochs=2, batch_size=16, max_windows=64, seed=3)


@pytest.fixture
def settings(tmp_path) -> Settings:
    return Settings(
        run_dir=tmp_path / "run",
        workers=1,
        vae={"w": 8, "hidden_size": 4, "latent_size": 4, "epochs": 1, "batch_size": 64, "max_windows": 256},
        simulator={"tasks": 6, "machine_choices": [4], "duration": 300.0, "fault_duration": 120.0},
        detector={"lookback_seconds": 300.0, "continuity_seconds": 60.0},
        prioritization={"span_seconds": 60.0},
    )


@pytest.fixture(autouse=True)
def _close_pool():
    yield
    shutdown_worker_pool()
