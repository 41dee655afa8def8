from enum import Enum
from typing import Dict, List, Tuple


class MetricKind(str, Enum):
    """Monitoring metrics collected per machine, in catalog order"""

    CPU_USAGE = "CpuUsage"
    PFC_TX_PACKET_RATE = "PfcTxPacketRate"
    MEMORY_USAGE = "MemoryUsage"
    DISK_USAGE = "DiskUsage"
    TCP_THROUGHPUT = "TcpThroughput"
    TCP_RDMA_THROUGHPUT = "TcpRdmaThroughput"
    GPU_MEMORY_USED = "GpuMemoryUsed"
    GPU_DUTY_CYCLE = "GpuDutyCycle"
    GPU_POWER_DRAW = "GpuPowerDraw"
    GPU_TEMPERATURE = "GpuTemperature"
    GPU_SM_ACTIVITY = "GpuSmActivity"
    GPU_CLOCKS = "GpuClocks"
    GPU_TENSOR_CORE_ACTIVITY = "GpuTensorCoreActivity"
    GPU_GRAPHICS_ENGINE_ACTIVITY = "GpuGraphicsEngineActivity"
    GPU_FP_ENGINE_ACTIVITY = "GpuFpEngineActivity"
    GPU_MEMORY_BANDWIDTH_UTIL = "GpuMemoryBandwidthUtil"
    PCIE_BANDWIDTH = "PcieBandwidth"
    PCIE_USAGE = "PcieUsage"
    NVLINK_BANDWIDTH = "NvlinkBandwidth"
    ECN_PACKET_RATE = "EcnPacketRate"
    CNP_PACKET_RATE = "CnpPacketRate"

    @property
    def index(self) -> int:
        """Position in catalog order, used for deterministic tie-breaking"""
        return CATALOG.index(self)


CATALOG: List[MetricKind] = list(MetricKind)

# Physical (min, max) limits used for min-max normalization
DEFAULT_BOUNDS: Dict[MetricKind, Tuple[float, float]] = {
    MetricKind.CPU_USAGE: (0.0, 100.0),  # percent
    MetricKind.PFC_TX_PACKET_RATE: (0.0, 1.0e6),  # packets/s
    MetricKind.MEMORY_USAGE: (0.0, 100.0),
    MetricKind.DISK_USAGE: (0.0, 100.0),
    MetricKind.TCP_THROUGHPUT: (0.0, 25.0),  # Gbps
    MetricKind.TCP_RDMA_THROUGHPUT: (0.0, 200.0),  # Gbps
    MetricKind.GPU_MEMORY_USED: (0.0, 80.0),  # GiB
    MetricKind.GPU_DUTY_CYCLE: (0.0, 100.0),
    MetricKind.GPU_POWER_DRAW: (0.0, 400.0),  # W
    MetricKind.GPU_TEMPERATURE: (0.0, 100.0),  # Celsius
    MetricKind.GPU_SM_ACTIVITY: (0.0, 100.0),
    MetricKind.GPU_CLOCKS: (0.0, 2000.0),  # MHz
    MetricKind.GPU_TENSOR_CORE_ACTIVITY: (0.0, 100.0),
    MetricKind.GPU_GRAPHICS_ENGINE_ACTIVITY: (0.0, 100.0),
    MetricKind.GPU_FP_ENGINE_ACTIVITY: (0.0, 100.0),
    MetricKind.GPU_MEMORY_BANDWIDTH_UTIL: (0.0, 100.0),
    MetricKind.PCIE_BANDWIDTH: (0.0, 64.0),  # GB/s
    MetricKind.PCIE_USAGE: (0.0, 100.0),
    MetricKind.NVLINK_BANDWIDTH: (0.0, 600.0),  # GB/s
    MetricKind.ECN_PACKET_RATE: (0.0, 1.0e5),
    MetricKind.CNP_PACKET_RATE: (0.0, 1.0e5),
}

# Collected but left out of detection by default; the "more GPU metrics" variant adds them back
AUXILIARY_GPU_METRICS: List[MetricKind] = [
    MetricKind.GPU_TEMPERATURE,
    MetricKind.GPU_CLOCKS,
    MetricKind.GPU_MEMORY_BANDWIDTH_UTIL,
    MetricKind.GPU_FP_ENGINE_ACTIVITY,
]

DETECTION_METRICS: List[MetricKind] = [m for m in CATALOG if m not in AUXILIARY_GPU_METRICS]

GPU_METRICS: List[MetricKind] = [m for m in CATALOG if m.value.startswith("Gpu")]


def parse_metric(name: str) -> MetricKind:
    """Resolve a metric name, raising UnknownMetric when it is not in the catalog"""
    from app.core.errors import UnknownMetric

    try:
        return MetricKind(name)
    except ValueError:
        raise UnknownMetric(str(name)) from None


def catalog_order(metrics) -> List[MetricKind]:
    """Sort metrics by catalog position"""
    return sorted(set(metrics), key=lambda m: m.index)
