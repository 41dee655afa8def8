"""Scoring alerts against ground truth, and the markdown report"""
from typing import Dict, Iterable, List, Mapping, Optional, Sequence
import logging

from app.core.errors import TaskSetMismatch
from app.schemas.detection import Alert, Pipeline
from app.schemas.evaluation import Counts, EvalReport, TimingSummary
from app.schemas.simulation import GroundTruth

logger = logging.getLogger(__name__)

CLEAN = "none"


def task_counts(alerts: Sequence[Alert], truth: GroundTruth) -> Counts:
    """Outcome of one task; alert metrics are ignored, only machine identity counts"""
    flagged = {a.machine_id for a in alerts}
    if truth.is_faulty:
        hit = bool(flagged & set(truth.faulty_machines))
        return Counts(tp=1) if hit else Counts(fn=1)
    return Counts(fp=1) if flagged else Counts(tn=1)


def evaluate(
    alerts: Mapping[str, Sequence[Alert]],
    truth: Mapping[str, GroundTruth],
    pipeline: Pipeline = Pipeline.VAE,
    variant: str = "default",
    timings: Optional[Iterable[float]] = None,
) -> EvalReport:
    """Per-task TP/FN (faulty) or TN/FP (clean), aggregated overall and per fault type"""
    if set(alerts) != set(truth):
        only_alerts = sorted(set(alerts) - set(truth))
        only_truth = sorted(set(truth) - set(alerts))
        raise TaskSetMismatch(f"tasks without ground truth: {only_alerts[:5]}; tasks without alerts: {only_truth[:5]}")
    total = Counts()
    per_type: Dict[str, Counts] = {}
    for task_id in sorted(truth):
        counts = task_counts(alerts[task_id], truth[task_id])
        total = total + counts
        fault_type = truth[task_id].fault_type
        key = fault_type.value if fault_type is not None else CLEAN
        per_type[key] = per_type.get(key, Counts()) + counts
    timing = TimingSummary.from_samples(list(timings)) if timings is not None else None
    report = EvalReport(pipeline=pipeline, variant=variant, counts=total, per_fault_type=per_type, timings=timing)
    logger.info(
        f"{pipeline.value}/{variant}: TP={total.tp} FN={total.fn} TN={total.tn} FP={total.fp} "
        f"precision={_fmt(report.precision)} recall={_fmt(report.recall)} f1={_fmt(report.f1)}"
    )
    return report


def _fmt(value: Optional[float]) -> str:
    return "n/a" if value is None else f"{value:.3f}"


def _table(header: List[str], rows: List[List[str]]) -> List[str]:
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    lines += ["| " + " | ".join(row) + " |" for row in rows]
    return lines


def summary_table(reports: Sequence[EvalReport]) -> List[str]:
    rows = [
        [
            r.pipeline.value,
            r.variant,
            str(r.counts.tp),
            str(r.counts.fn),
            str(r.counts.tn),
            str(r.counts.fp),
            _fmt(r.precision),
            _fmt(r.recall),
            _fmt(r.f1),
        ]
        for r in reports
    ]
    return _table(["pipeline", "variant", "TP", "FN", "TN", "FP", "precision", "recall", "F1"], rows)


def fault_type_table(report: EvalReport) -> List[str]:
    rows = []
    for fault_type, c in sorted(report.per_fault_type.items()):
        if fault_type == CLEAN:
            continue
        rows.append([fault_type, str(c.tp), str(c.fn), _fmt(c.recall)])
    return _table(["fault type", "TP", "FN", "recall"], rows)


def render_report(sections: Mapping[str, Sequence[EvalReport]], title: str = "Detection report") -> str:
    """Markdown tables, one per section; timings are left out so replays stay byte-identical"""
    lines = [f"# {title}", ""]
    for name, reports in sections.items():
        if not reports:
            continue
        lines += [f"## {name}", ""]
        lines += summary_table(reports)
        lines.append("")
    primary = next((r for reports in sections.values() for r in reports if r.pipeline == Pipeline.VAE), None)
    if primary is not None and primary.per_fault_type:
        lines += [f"## Per fault type ({primary.pipeline.value}/{primary.variant})", ""]
        lines += fault_type_table(primary)
        lines.append("")
    return "\n".join(lines)
