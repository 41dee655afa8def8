from enum import Enum
from typing import Dict
import logging

logger = logging.getLogger(__name__)


class FaultType(str, Enum):
    ECC_ERROR = "EccError"  # corrupted or lost data in GPU memory
    PCIE_DOWNGRADING = "PcieDowngrading"  # slow PCIe link
    NIC_DROPOUT = "NicDropout"  # NIC missing from the OS
    GPU_CARD_DROP = "GpuCardDrop"  # disconnected GPU card
    NVLINK_ERROR = "NvlinkError"  # link fault between two GPUs
    AOC_ERROR = "AocError"  # active optical cable fault, host or switch side
    CUDA_EXEC_ERROR = "CudaExecError"  # failed CUDA program
    GPU_EXEC_ERROR = "GpuExecError"  # GPU hang, page fault, out-of-memory
    HDFS_ERROR = "HdfsError"  # checkpoint load/save failures
    MACHINE_UNREACHABLE = "MachineUnreachable"  # SSH or VM service failure

    @classmethod
    def _missing_(cls, value):
        if not value:
            return None
        key = str(value).replace("_", "").replace("-", "").lower()
        for member in cls:
            if member.value.lower() == key:
                return member
        logger.debug(f"Unknown fault type: {value}")
        return None


# Observed share of each fault type among production incidents; "others" (10.3%)
# is left to fault-free tasks when used as a sampling mix
INCIDENT_FREQUENCIES: Dict[FaultType, float] = {
    FaultType.ECC_ERROR: 0.389,
    FaultType.PCIE_DOWNGRADING: 0.066,
    FaultType.NIC_DROPOUT: 0.057,
    FaultType.GPU_CARD_DROP: 0.020,
    FaultType.NVLINK_ERROR: 0.017,
    FaultType.AOC_ERROR: 0.009,
    FaultType.CUDA_EXEC_ERROR: 0.146,
    FaultType.GPU_EXEC_ERROR: 0.077,
    FaultType.HDFS_ERROR: 0.057,
    FaultType.MACHINE_UNREACHABLE: 0.060,
}
