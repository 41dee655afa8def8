from app.models.catalog import (
    AUXILIARY_GPU_METRICS,
    CATALOG,
    DEFAULT_BOUNDS,
    DETECTION_METRICS,
    GPU_METRICS,
    MetricKind,
    catalog_order,
    parse_metric,
)
from app.models.faults import INCIDENT_FREQUENCIES, FaultType

__all__ = [
    "AUXILIARY_GPU_METRICS",
    "CATALOG",
    "DEFAULT_BOUNDS",
    "DETECTION_METRICS",
    "GPU_METRICS",
    "MetricKind",
    "catalog_order",
    "parse_metric",
    "INCIDENT_FREQUENCIES",
    "FaultType",
]
