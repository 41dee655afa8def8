from pathlib import Path
from typing import Dict, Iterable, List, Optional
import logging
import threading

from cachetools import LRUCache
from pydantic import ValidationError

from app.core import binio
from app.core.errors import MissingModel, ModelFormatError
from app.models.catalog import MetricKind
from app.schemas.vae import FORMAT_VERSION, VaeHyperparams, VaeModel

logger = logging.getLogger(__name__)

INTEGRATED_NAME = "integrated"


def serialize(model: VaeModel) -> bytes:
    header = {
        "kind": "lstm-vae",
        "metrics": [m.value for m in model.metrics],
        "hyperparams": model.hyperparams.dict(),
    }
    return binio.pack(model.version, header, model.weights)


def deserialize(blob: bytes) -> VaeModel:
    header, tensors = binio.unpack(blob, FORMAT_VERSION)
    if header.get("kind") != "lstm-vae":
        raise ModelFormatError(f"not a model file (kind={header.get('kind')!r})")
    try:
        return VaeModel(
            metrics=[MetricKind(m) for m in header["metrics"]],
            hyperparams=VaeHyperparams(**header["hyperparams"]),
            weights=tensors,
            version=FORMAT_VERSION,
        )
    except (KeyError, ValueError, ValidationError) as e:
        raise ModelFormatError(f"inconsistent model file: {e}") from e


def model_filename(metrics: List[MetricKind]) -> str:
    if len(metrics) == 1:
        return f"{metrics[0].value}.vae"
    return f"{INTEGRATED_NAME}.vae"


class ModelStore:
    """Model files of one run directory, with an LRU cache of loaded models"""

    def __init__(self, models_dir: Path, cache_size: int = 32):
        self.models_dir = Path(models_dir)
        self._cache: LRUCache = LRUCache(maxsize=cache_size)
        self._lock = threading.Lock()

    def path_for(self, metrics: List[MetricKind]) -> Path:
        return self.models_dir / model_filename(metrics)

    def save(self, model: VaeModel) -> Path:
        path = self.path_for(model.metrics)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(serialize(model))
        with self._lock:
            self._cache[path.name] = model
        logger.info(f"Saved model {path}")
        return path

    def _load_file(self, path: Path) -> VaeModel:
        with self._lock:
            if path.name in self._cache:
                return self._cache[path.name]
        if not path.is_file():
            raise MissingModel(f"no model file at {path}")
        model = deserialize(path.read_bytes())
        with self._lock:
            self._cache[path.name] = model
        return model

    def load(self, metric: MetricKind) -> VaeModel:
        model = self._load_file(self.path_for([metric]))
        if model.metrics != [metric]:
            raise ModelFormatError(f"{metric.value}.vae holds a model for {[m.value for m in model.metrics]}")
        return model

    def load_integrated(self) -> VaeModel:
        return self._load_file(self.models_dir / f"{INTEGRATED_NAME}.vae")

    def load_many(self, metrics: Iterable[MetricKind]) -> Dict[MetricKind, VaeModel]:
        return {m: self.load(m) for m in metrics}

    def available(self) -> List[MetricKind]:
        """Metrics with a per-metric model file on disk"""
        found = []
        for metric in MetricKind:
            if self.path_for([metric]).is_file():
                found.append(metric)
        return found

    def clear_cache(self, name: Optional[str] = None) -> None:
        with self._lock:
            if name is None:
                self._cache.clear()
            else:
                self._cache.pop(name, None)
