from typing import Dict, List, Optional

from pydantic import BaseModel, Field

from app.schemas.detection import Pipeline


class Counts(BaseModel):
    tp: int = Field(0, ge=0)
    fn: int = Field(0, ge=0)
    tn: int = Field(0, ge=0)
    fp: int = Field(0, ge=0)

    @property
    def precision(self) -> Optional[float]:
        denom = self.tp + self.fp
        return self.tp / denom if denom else None

    @property
    def recall(self) -> Optional[float]:
        denom = self.tp + self.fn
        return self.tp / denom if denom else None

    @property
    def f1(self) -> Optional[float]:
        p, r = self.precision, self.recall
        if p is None or r is None or p + r == 0:
            return None
        return 2 * p * r / (p + r)

    def __add__(self, other: "Counts") -> "Counts":
        return Counts(tp=self.tp + other.tp, fn=self.fn + other.fn, tn=self.tn + other.tn, fp=self.fp + other.fp)


class TimingSummary(BaseModel):
    calls: int = 0
    mean_seconds: float = 0.0
    max_seconds: float = 0.0
    total_seconds: float = 0.0

    @classmethod
    def from_samples(cls, seconds: List[float]) -> "TimingSummary":
        if not seconds:
            return cls()
        return cls(
            calls=len(seconds),
            mean_seconds=sum(seconds) / len(seconds),
            max_seconds=max(seconds),
            total_seconds=sum(seconds),
        )


class EvalReport(BaseModel):
    """Detection outcome of one pipeline variant against ground truth"""

    pipeline: Pipeline
    variant: str = Field("default", description="Label of the configuration the alerts came from")
    counts: Counts
    per_fault_type: Dict[str, Counts] = Field(default_factory=dict)
    timings: Optional[TimingSummary] = None

    @property
    def precision(self) -> Optional[float]:
        return self.counts.precision

    @property
    def recall(self) -> Optional[float]:
        return self.counts.recall

    @property
    def f1(self) -> Optional[float]:
        return self.counts.f1

    def to_document(self, include_timings: bool = True) -> Dict:
        doc = {
            "pipeline": self.pipeline.value,
            "variant": self.variant,
            "counts": self.counts.dict(),
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "per_fault_type": {k: v.dict() for k, v in sorted(self.per_fault_type.items())},
        }
        if include_timings and self.timings is not None:
            doc["timings"] = self.timings.dict()
        return doc
