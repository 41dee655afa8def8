from typing import Optional


class FleetWatchError(Exception):
    """Base error carrying a human-readable detail and a CLI exit status"""

    exit_code: int = 1

    def __init__(self, detail: str, *, exit_code: Optional[int] = None):
        super().__init__(detail)
        self.detail = detail
        if exit_code is not None:
            self.exit_code = exit_code

    def __str__(self) -> str:
        return self.detail


class UsageError(FleetWatchError):
    pass


# --- Trace ingestion and alignment ---

class MalformedRow(FleetWatchError, ValueError):
    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line


class DuplicateSample(FleetWatchError, ValueError):
    def __init__(self, line: int, machine_id: str, metric: str, timestamp: float):
        super().__init__(
            f"line {line}: duplicate sample for machine={machine_id} metric={metric} timestamp={timestamp}"
        )
        self.line = line


class UnknownMetric(FleetWatchError, ValueError):
    def __init__(self, name: str, line: Optional[int] = None):
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}unknown metric '{name}'")
        self.name = name
        self.line = line


class TooFewMachines(FleetWatchError, ValueError):
    pass


class EmptyOverlap(FleetWatchError, ValueError):
    pass


class AlreadyNormalized(FleetWatchError, ValueError):
    pass


class WindowTooLong(FleetWatchError, ValueError):
    pass


class IndexOutOfRange(FleetWatchError, IndexError):
    pass


class GridMismatch(FleetWatchError, ValueError):
    pass


# --- Models ---

class ShapeMismatch(FleetWatchError, ValueError):
    pass


class NonFiniteLoss(FleetWatchError, ArithmeticError):
    pass


class NoTrainingData(FleetWatchError, ValueError):
    pass


class MetricMismatch(FleetWatchError, ValueError):
    pass


class MissingModel(FleetWatchError, LookupError):
    pass


class ModelFormatError(FleetWatchError, ValueError):
    pass


# --- Prioritization ---

class SpanUncovered(FleetWatchError, ValueError):
    pass


class SingleClassDataset(FleetWatchError, ValueError):
    pass


# --- Detection and baselines ---

class LengthMismatch(FleetWatchError, ValueError):
    pass


class WindowOutOfRange(FleetWatchError, IndexError):
    pass


class OutOfOrderVerdict(FleetWatchError, ValueError):
    pass


class RankDeficient(FleetWatchError, ValueError):
    pass


# --- Simulation and evaluation ---

class ProfileOutOfBounds(FleetWatchError, ValueError):
    pass


class TaskSetMismatch(FleetWatchError, ValueError):
    pass
