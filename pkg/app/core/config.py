from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple
import logging
import os

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from pydantic import BaseModel, BaseSettings, Field, validator

from app.models.catalog import DEFAULT_BOUNDS, DETECTION_METRICS, MetricKind
from app.models.faults import INCIDENT_FREQUENCIES, FaultType
from app.schemas.detection import DetectorConfig
from app.schemas.vae import VaeHyperparams

logger = logging.getLogger(__name__)

DEFAULT_CONFIG_FILE = "fleetwatch.toml"
CONFIG_ENV = "FLEETWATCH_CONFIG"


class PrioritizationSettings(BaseModel):
    max_depth: int = Field(7, ge=1)
    min_samples_leaf: int = Field(1, ge=1)
    span_seconds: float = Field(240.0, gt=0, description="Length of one labeled span")


class BaselineSettings(BaseModel):
    pca_components: int = Field(4, ge=1, description="Upper bound; the effective count is min(k, M - 1)")
    covariance_reg: float = Field(1e-6, ge=0)
    covariance_shrinkage: float = Field(0.2, ge=0, le=1, description="Weight of the average-variance identity in the shrunk covariance")


class SimulatorSettings(BaseModel):
    tasks: int = Field(20, ge=1)
    machine_choices: List[int] = Field(default_factory=lambda: [4, 8, 16])
    duration: float = Field(907.0, description="Seconds per task; 907 s yields 900 windows of 8")
    grid_interval: float = Field(1.0, gt=0)
    noise_sigma: float = Field(0.005, ge=0)
    fault_duration: float = Field(360.0, ge=0)
    fault_mix: Dict[FaultType, float] = Field(default_factory=lambda: dict(INCIDENT_FREQUENCIES))
    surge_level: float = Field(0.9, ge=0, le=1)
    drop_level: float = Field(0.02, ge=0, le=1)
    seed: int = 0

    @validator("machine_choices")
    def at_least_two(cls, v):
        if not v or min(v) < 2:
            raise ValueError("machine counts must be >= 2")
        return v

    @validator("fault_mix")
    def mix_is_distribution(cls, v):
        if any(p < 0 for p in v.values()) or sum(v.values()) > 1.0 + 1e-9:
            raise ValueError("fault mix proportions must be >= 0 and sum to <= 1")
        return v


class Settings(BaseSettings):
    run_dir: Path = Path("runs/default")
    workers: int = Field(4, ge=1)
    train_fraction: float = Field(0.5, ge=0, le=1, description="Share of the corpus used for training")
    log_level: str = "INFO"
    detection_metrics: List[MetricKind] = Field(default_factory=lambda: list(DETECTION_METRICS))
    bounds: Dict[MetricKind, Tuple[float, float]] = Field(default_factory=lambda: dict(DEFAULT_BOUNDS))
    vae: VaeHyperparams = Field(default_factory=VaeHyperparams)
    detector: DetectorConfig = Field(default_factory=DetectorConfig)
    prioritization: PrioritizationSettings = Field(default_factory=PrioritizationSettings)
    simulator: SimulatorSettings = Field(default_factory=SimulatorSettings)
    baselines: BaselineSettings = Field(default_factory=BaselineSettings)

    class Config:
        env_file = ".env"
        env_prefix = "FLEETWATCH_"
        extra = "ignore"

    @validator("bounds")
    def complete_bounds(cls, v):
        merged = dict(DEFAULT_BOUNDS)
        merged.update(v)
        for metric, (lo, hi) in merged.items():
            if not lo < hi:
                raise ValueError(f"{metric.value}: bounds must satisfy min < max, got ({lo}, {hi})")
        return merged

    @validator("log_level")
    def known_level(cls, v):
        level = v.upper()
        # getLevelNamesMapping() is Python 3.11+; it returns a copy of _nameToLevel
        names = logging.getLevelNamesMapping() if hasattr(logging, "getLevelNamesMapping") else dict(logging._nameToLevel)
        if level not in names:
            raise ValueError(f"unknown log level {v}")
        return level


def _deep_merge(base: Dict[str, Any], update: Mapping[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in update.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), Mapping):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def read_config_file(path: Path) -> Dict[str, Any]:
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def load_settings(config_path: Optional[Path] = None, overrides: Optional[Mapping[str, Any]] = None) -> Settings:
    """Build settings with precedence overrides > config file > environment > defaults.

    Without an explicit path the file named by FLEETWATCH_CONFIG is read, then ./fleetwatch.toml if present.
    """
    values: Dict[str, Any] = {}
    path = config_path
    if path is None and os.environ.get(CONFIG_ENV):
        path = Path(os.environ[CONFIG_ENV])
    elif path is None and Path(DEFAULT_CONFIG_FILE).is_file():
        path = Path(DEFAULT_CONFIG_FILE)
    if path is not None:
        values = read_config_file(Path(path))
        logger.debug(f"Loaded config file {path}")
    if overrides:
        values = _deep_merge(values, overrides)
    return Settings(**values)

