import numpy as np
import pytest
from hypothesis import given, settings as hsettings, strategies as st

from app.core.errors import LengthMismatch, MissingModel, OutOfOrderVerdict, TooFewMachines, WindowOutOfRange
from app.models.catalog import MetricKind
from app.models.faults import FaultType
from app.schemas.detection import DetectorConfig, DistanceKind, SessionStats, WindowVerdict
from app.schemas.prioritization import PriorityList
from app.schemas.simulation import EffectKind, FaultProfile, Perturbation
from app.schemas.vae import VaeHyperparams, VaeModel, parameter_shapes
from app.services.baselines import RawDetector
from app.services.detector import (
    ContinuityTracker,
    FaultDetector,
    confirm,
    continuity_update,
    detect_session,
    detect_window,
    distance_sums,
    normal_scores,
    replay_calls,
    scan_range,
    window_distance_sums,
)
from app.services.lstm_vae import init_model
from app.services.preprocessing import align_task, normalize_task
from app.services.simulator import inject_fault
from tests.conftest import make_tensors, normal_cluster, outlier_values

CPU = MetricKind.CPU_USAGE
MEM = MetricKind.MEMORY_USAGE
DUTY = MetricKind.GPU_DUTY_CYCLE
PFC = MetricKind.PFC_TX_PACKET_RATE

PAIRWISE = {
    DistanceKind.EUCLIDEAN: lambda a, b: np.sqrt(np.sum((a - b) ** 2)),
    DistanceKind.MANHATTAN: lambda a, b: np.sum(np.abs(a - b)),
    DistanceKind.CHEBYSHEV: lambda a, b: np.max(np.abs(a - b)),
}


# --- Similarity ---

def test_distance_sums_on_a_line():
    sums = distance_sums([np.array([0.0]), np.array([0.0]), np.array([1.0])])
    np.testing.assert_allclose(sums, [1.0, 1.0, 2.0])
    np.testing.assert_array_equal(distance_sums([np.ones(3)] * 4), np.zeros(4))


def test_distance_sums_errors():
    with pytest.raises(LengthMismatch):
        distance_sums([np.zeros(2), np.zeros(3)])
    with pytest.raises(TooFewMachines):
        distance_sums([np.zeros(2)])


@given(
    seed=st.integers(0, 2**16),
    machines=st.integers(2, 12),
    dim=st.integers(1, 16),
    kind=st.sampled_from(list(DistanceKind)),
)
@hsettings(max_examples=1000, deadline=None)
def test_distance_sums_match_brute_force(seed, machines, dim, kind):
    points = np.random.default_rng(seed).normal(size=(machines, dim))
    expected = [sum(PAIRWISE[kind](points[i], points[j]) for j in range(machines) if j != i) for i in range(machines)]
    np.testing.assert_allclose(distance_sums(list(points), kind), expected, rtol=1e-10)
    batched = window_distance_sums(points[:, None, :], kind)
    np.testing.assert_allclose(batched[:, 0], expected, rtol=1e-10)


def test_normal_scores():
    np.testing.assert_allclose(normal_scores(np.array([1.0, 1.0, 2.0])), np.array([-1, -1, 2]) / np.sqrt(2))
    np.testing.assert_array_equal(normal_scores(np.full(4, 3.0)), np.zeros(4))


@given(
    sums=st.lists(st.floats(0.0, 100.0), min_size=2, max_size=10),
    scale=st.floats(0.1, 10.0),
    shift=st.floats(-50.0, 50.0),
)
@hsettings(max_examples=60, deadline=None)
def test_normal_scores_ignore_scale_and_shift(sums, scale, shift):
    sums = np.array(sums)
    if sums.std() < 1e-2:
        return
    np.testing.assert_allclose(normal_scores(sums * scale + shift), normal_scores(sums), rtol=1e-6, atol=1e-8)


def test_verdict_requires_candidate_exactly_above_threshold():
    with pytest.raises(ValueError):
        WindowVerdict(window_start=0, candidate_machine=None, normal_scores=[2.0, -1.0], machine_ids=["a", "b"], threshold=1.5)
    with pytest.raises(ValueError):
        WindowVerdict(window_start=0, candidate_machine="a", normal_scores=[1.0, -1.0], machine_ids=["a", "b"], threshold=1.5)


def test_config_lookback_must_cover_continuity():
    with pytest.raises(ValueError):
        DetectorConfig(continuity_seconds=900.0, lookback_seconds=900.0)
    assert DetectorConfig(continuity_seconds=0.0).required_hits(1.0) == 1
    assert DetectorConfig(continuity_seconds=240.0, stride=2).required_hits(1.0) == 120


# --- Window verdicts ---

CFG = DetectorConfig(similarity_threshold=1.5, continuity_seconds=60.0, lookback_seconds=300.0)


def zero_model(metric, w=8):
    hp = VaeHyperparams(w=w, hidden_size=2, latent_size=2)
    return VaeModel(metrics=[metric], hyperparams=hp, weights={n: np.zeros(s) for n, s in parameter_shapes(hp, 1).items()})


def test_detect_window_on_identical_embeddings():
    tensors = make_tensors({CPU: outlier_values(steps=60)})
    verdict = detect_window(tensors[CPU], zero_model(CPU), 45, CFG)
    assert verdict.candidate_machine is None
    np.testing.assert_array_equal(verdict.normal_scores, 0.0)
    with pytest.raises(WindowOutOfRange):
        detect_window(tensors[CPU], zero_model(CPU), 53, CFG)


def test_detect_window_never_fires_with_infinite_threshold():
    tensors = make_tensors({CPU: outlier_values(steps=60)})
    model = init_model([CPU], VaeHyperparams(w=8, hidden_size=3, latent_size=2, seed=1))
    cfg = CFG.copy(update={"similarity_threshold": float("inf")})
    assert detect_window(tensors[CPU], model, 45, cfg).candidate_machine is None


@pytest.mark.parametrize("order", [[5, 4, 3, 2, 1, 0], [2, 0, 1, 3, 5, 4]])
def test_detect_window_follows_machine_relabeling(order):
    tensors = make_tensors({CPU: outlier_values(steps=60)})
    model = init_model([CPU], VaeHyperparams(w=8, hidden_size=3, latent_size=2, seed=1))
    base = detect_window(tensors[CPU], model, 45, CFG)
    permuted = detect_window(tensors[CPU].permuted(order), model, 45, CFG)
    assert permuted.candidate_machine == base.candidate_machine
    np.testing.assert_allclose(permuted.normal_scores, base.normal_scores[order], atol=1e-9)


# --- Continuity ---

MACHINES = ["A", "B", "C"]


def verdict(start, candidate, cfg=None):
    cfg = cfg or DetectorConfig()
    scores = np.full(3, -1.0)
    if candidate is not None:
        scores[MACHINES.index(candidate)] = 2.0
    return WindowVerdict(
        metric=CPU, window_start=start, candidate_machine=candidate, normal_scores=scores, machine_ids=MACHINES, threshold=cfg.similarity_threshold
    )


def run(candidates, cfg=None):
    cfg = cfg or DetectorConfig()
    return confirm([verdict(i, c, cfg) for i, c in enumerate(candidates)], "t", cfg, CPU, 0.0, 1.0)


def test_one_window_short_of_continuity():
    assert run(["A"] * 239) == []


def test_alert_at_continuity():
    (alert,) = run(["A"] * 240)
    assert alert.machine_id == "A"
    assert alert.consecutive_hits == 240
    assert alert.first_window_start == 0
    assert alert.last_window_start == 239


def test_candidate_change_restarts_the_run():
    (alert,) = run(["A"] * 120 + ["B"] + ["A"] * 240)
    assert alert.machine_id == "A"
    assert alert.first_window_start == 121
    assert alert.consecutive_hits == 240


def test_repeat_alerts_are_suppressed():
    alerts = run(["A"] * 300 + [None] + ["A"] * 300)
    assert len(alerts) == 1


def test_gap_in_window_order_breaks_the_run():
    cfg = DetectorConfig(continuity_seconds=3.0)
    tracker = ContinuityTracker("t", cfg, CPU)
    assert tracker.update(verdict(0, "A", cfg)) is None
    assert tracker.update(verdict(1, "A", cfg)) is None
    assert tracker.update(verdict(5, "A", cfg)) is None
    assert tracker.update(verdict(6, "A", cfg)) is None
    alert = continuity_update(tracker, verdict(7, "A", cfg), cfg)
    assert alert.first_window_start == 5


def test_out_of_order_verdicts():
    tracker = ContinuityTracker("t", DetectorConfig(), CPU)
    tracker.update(verdict(5, "A"))
    with pytest.raises(OutOfOrderVerdict):
        tracker.update(verdict(5, "A"))


def test_zero_continuity_alerts_on_the_first_candidate():
    (alert,) = run([None, "B"], DetectorConfig(continuity_seconds=0.0))
    assert alert.machine_id == "B"
    assert alert.consecutive_hits == 1


# --- Sessions ---

def session_tensors(steps=120, onset=40):
    flat = np.tile(0.5 + 0.1 * np.sin(np.arange(steps) / 5.0), (6, 1))
    return make_tensors(
        {
            PFC: flat,
            CPU: outlier_values(steps=steps, onset=onset, outlier=2, seed=1),
            MEM: outlier_values(steps=steps, onset=onset, outlier=4, seed=2),
        }
    )


def test_session_stops_at_the_first_alerting_metric():
    tensors = session_tensors()
    priority = PriorityList.catalog_default([PFC, CPU, MEM])
    stats = SessionStats(task_id=tensors.task_id, pipeline=RawDetector.pipeline)
    alerts = RawDetector(priority, CFG).detect_session(tensors, stats)
    assert {(a.machine_id, a.metric) for a in alerts} == {("node-002", CPU)}
    assert stats.evaluated_metrics == [PFC, CPU]


def test_exhaustive_session_scans_every_metric():
    tensors = session_tensors()
    priority = PriorityList.catalog_default([PFC, CPU, MEM])
    stats = SessionStats(task_id=tensors.task_id, pipeline=RawDetector.pipeline)
    cfg = CFG.copy(update={"exhaustive": True})
    alerts = RawDetector(priority, cfg).detect_session(tensors, stats)
    assert {(a.machine_id, a.metric) for a in alerts} == {("node-002", CPU), ("node-004", MEM)}
    assert stats.evaluated_metrics == [PFC, CPU, MEM]


def test_session_skips_metrics_the_task_lacks():
    tensors = session_tensors()
    priority = PriorityList.catalog_default([DUTY, CPU])
    stats = SessionStats(task_id=tensors.task_id, pipeline=RawDetector.pipeline)
    RawDetector(priority, CFG).detect_session(tensors, stats)
    assert stats.evaluated_metrics == [CPU]


def test_vae_session_needs_a_model_per_metric():
    tensors = session_tensors()
    priority = PriorityList.catalog_default([PFC, CPU])
    with pytest.raises(MissingModel):
        FaultDetector({PFC: zero_model(PFC)}, priority, CFG).detect_session(tensors)


def test_vae_session_with_uninformative_models_is_clean():
    tensors = session_tensors()
    models = {m: zero_model(m) for m in (PFC, CPU, MEM)}
    priority = PriorityList.catalog_default([PFC, CPU, MEM])
    assert detect_session(tensors, models, priority, CFG) == []


def test_scan_range_covers_the_lookback():
    cfg = DetectorConfig(lookback_seconds=100.0, continuity_seconds=60.0)
    first, starts = scan_range(500, 1.0, cfg)
    assert first == 500 - 107
    assert starts[0] == first and starts[-1] == 500 - cfg.window_w
    with pytest.raises(WindowOutOfRange):
        scan_range(4, 1.0, cfg)


def test_replay_calls_follow_the_call_interval():
    tensors = session_tensors()
    cfg = DetectorConfig(lookback_seconds=70.0, continuity_seconds=20.0, call_interval_seconds=30.0, similarity_threshold=1.5)
    calls = replay_calls(RawDetector(PriorityList.catalog_default([CPU]), cfg), tensors)
    assert [t for t, _ in calls] == [77.0, 107.0]
    assert any(a.machine_id == "node-002" for _, alerts in calls for a in alerts)


@given(
    seed=st.integers(0, 1000),
    thresholds=st.tuples(st.floats(0.5, 2.2), st.floats(0.5, 2.2)).map(sorted),
    continuity=st.tuples(st.integers(0, 30), st.integers(0, 30)).map(sorted),
)
@hsettings(max_examples=25, deadline=None)
def test_stricter_settings_never_add_alerts(seed, thresholds, continuity):
    rng = np.random.default_rng(seed)
    tensors = make_tensors(
        {
            CPU: outlier_values(steps=80, onset=int(rng.integers(10, 70)), outlier=int(rng.integers(0, 6)), seed=seed),
            MEM: np.clip(0.5 + rng.normal(0.0, 0.05, size=(6, 80)), 0.0, 1.0),
        }
    )
    priority = PriorityList.catalog_default([CPU, MEM])

    def alert_set(threshold, seconds):
        cfg = DetectorConfig(
            similarity_threshold=threshold, continuity_seconds=float(seconds), lookback_seconds=100.0, exhaustive=True
        )
        return {(a.machine_id, a.metric) for a in RawDetector(priority, cfg).detect_session(tensors)}

    low, high = thresholds
    short, long = continuity
    assert alert_set(high, short) <= alert_set(low, short)
    assert alert_set(low, long) <= alert_set(low, short)


@pytest.mark.slow
def test_trained_detector_finds_an_injected_cpu_drop(trained_cpu_model):
    profile = FaultProfile(
        fault_type=FaultType.ECC_ERROR,
        duration=400.0,
        perturbations=[Perturbation(metric=CPU, effect=EffectKind.DROP_TO, level=0.02)],
    ).placed(4, 300.0)
    clean = normal_cluster(seed=3)
    faulty, truth = inject_fault(clean, profile)
    detector = FaultDetector({CPU: trained_cpu_model}, PriorityList.catalog_default([CPU]), DetectorConfig())

    alerts = detector.detect_session(normalize_task(align_task(faulty)))
    assert [a.machine_id for a in alerts] == truth.faulty_machines == ["node-004"]
    assert alerts[0].metric == CPU
    assert detector.detect_session(normalize_task(align_task(clean))) == []
