import logging

import numpy as np
import pytest
from hypothesis import given, settings as hsettings, strategies as st
from hypothesis.extra.numpy import arrays
from scipy import stats
from scipy.stats import ortho_group
from sklearn.decomposition import PCA

from app.core.errors import MissingModel, RankDeficient, ShapeMismatch, WindowOutOfRange
from app.models.catalog import MetricKind
from app.schemas.detection import DetectorConfig, Pipeline, SessionStats
from app.schemas.prioritization import PriorityList
from app.schemas.vae import VaeHyperparams
from app.services.baselines import (
    AblationMode,
    ConcatDetector,
    IntegratedDetector,
    MdDetector,
    RawDetector,
    ablation_detect,
    mahalanobis_sums,
    md_detect,
    pca_fit,
    pca_project,
    stat_features,
    window_moments,
)
from app.services.detector import FaultDetector, distance_sums, normal_scores
from app.services.lstm_vae import init_model
from tests.conftest import make_tensors, outlier_values

CPU = MetricKind.CPU_USAGE
MEM = MetricKind.MEMORY_USAGE
CFG = DetectorConfig(similarity_threshold=1.5, continuity_seconds=60.0, lookback_seconds=300.0)


# --- Moments ---

@given(arrays(np.float64, st.integers(2, 16), elements=st.integers(-50, 50).map(float)))
@hsettings(max_examples=1000, deadline=None)
def test_moments_match_scipy(window):
    mean, var, skew, kurt = window_moments(window)
    assert mean == pytest.approx(window.mean(), rel=1e-9, abs=1e-9)
    assert var == pytest.approx(window.var(), rel=1e-9, abs=1e-9)
    if window.var() == 0:
        assert (skew, kurt) == (0.0, 0.0)
    else:
        assert skew == pytest.approx(stats.skew(window, bias=True), rel=1e-9, abs=1e-9)
        assert kurt == pytest.approx(stats.kurtosis(window, fisher=False, bias=True), rel=1e-9)


def test_hand_computed_moments():
    f = stat_features(np.array([0.0, 1.0]), "m1")
    assert (f.mean, f.variance, f.skewness, f.kurtosis) == (0.5, 0.25, 0.0, 1.0)
    assert stat_features(np.full(8, 0.3)).as_array().tolist() == [pytest.approx(0.3), 0.0, 0.0, 0.0]
    with pytest.raises(ShapeMismatch):
        stat_features(np.array([1.0]))


def test_moments_are_batched_over_leading_axes():
    windows = np.random.default_rng(0).normal(size=(3, 5, 8))
    batched = window_moments(windows)
    assert batched.shape == (3, 5, 4)
    np.testing.assert_allclose(batched[2, 4], window_moments(windows[2, 4]))


# --- PCA and Mahalanobis ---

def aligned_rows(ours, theirs):
    signs = np.sign(np.sum(ours * theirs, axis=1, keepdims=True))
    return ours * signs


def test_pca_matches_sklearn():
    X = np.random.default_rng(3).normal(size=(6, 4))
    fit = pca_fit(X, 2)
    reference = PCA(n_components=2).fit(X)
    np.testing.assert_allclose(fit.explained_variance, reference.explained_variance_, rtol=1e-9)
    np.testing.assert_allclose(aligned_rows(fit.components, reference.components_), reference.components_, atol=1e-9)
    projected = pca_project(X, 2)
    signs = np.sign(np.sum(fit.components * reference.components_, axis=1))
    np.testing.assert_allclose(projected * signs, reference.transform(X), atol=1e-9)


def test_pca_sign_convention():
    fit = pca_fit(np.random.default_rng(8).normal(size=(10, 5)), 3)
    for row in fit.components:
        assert row[np.argmax(np.abs(row))] > 0


def test_pca_reconstructs_rank_one_data():
    direction = np.array([1.0, -2.0, 0.5])
    X = np.outer(np.array([0.3, -1.0, 2.0, 0.7]), direction) + np.array([5.0, 1.0, -1.0])
    fit = pca_fit(X, 1)
    rebuilt = fit.mean + pca_project(X, 1) @ fit.components
    np.testing.assert_allclose(rebuilt, X, atol=1e-9)


def test_pca_spectrum_survives_rotation():
    X = np.random.default_rng(4).normal(size=(9, 4))
    Q = ortho_group.rvs(4, random_state=2)
    np.testing.assert_allclose(pca_fit(X @ Q, 3).explained_variance, pca_fit(X, 3).explained_variance, rtol=1e-8)


def test_rank_deficiency(caplog):
    X = np.outer(np.arange(5.0), np.array([1.0, 1.0, 0.0]))
    with pytest.raises(RankDeficient):
        pca_fit(X, 2, strict=True)
    with caplog.at_level(logging.WARNING, logger="app.services.baselines"):
        fit = pca_fit(X, 2)
    assert fit.components.shape == (1, 3)
    assert "rank 1" in caplog.text
    with pytest.raises(ShapeMismatch):
        pca_fit(X, 4)


def test_identity_covariance_is_euclidean():
    points = np.random.default_rng(5).normal(size=(7, 3))
    np.testing.assert_allclose(
        mahalanobis_sums(points, inverse_cov=np.eye(3)), distance_sums(list(points)), atol=1e-9
    )
    np.testing.assert_array_equal(mahalanobis_sums(np.zeros((4, 0))), np.zeros(4))


def test_md_on_identical_machines_is_silent():
    flat = np.tile(np.linspace(0.2, 0.8, 60), (5, 1))
    tensors = make_tensors({CPU: flat, MEM: flat[:, ::-1].copy()})
    verdict = md_detect(tensors, 10, CFG)
    assert verdict.candidate_machine is None
    assert verdict.window_start == 10
    assert verdict.metric is None
    assert MdDetector(CFG).detect_session(tensors) == []


def test_md_window_bounds():
    tensors = make_tensors({CPU: outlier_values(steps=20)})
    with pytest.raises(WindowOutOfRange):
        md_detect(tensors, 13, CFG)


@pytest.mark.parametrize("machines", [4, 8])
def test_md_singles_out_an_outlier_in_small_clusters(machines):
    rng = np.random.default_rng(machines)
    features = rng.normal(0.0, 0.01, size=(machines, 8))
    features[0, 0] += 5.0
    sums = MdDetector(CFG).window_sums(features)
    scores = normal_scores(sums)
    assert int(np.argmax(scores)) == 0
    assert scores[0] > CFG.similarity_threshold


def test_unshrunk_whitening_flattens_the_sums():
    rng = np.random.default_rng(4)
    features = rng.normal(0.0, 1.0, size=(4, 3))
    features[0] += 5.0
    # four points whitened in three dimensions form a regular simplex
    flat = mahalanobis_sums(features, reg=0.0)
    np.testing.assert_allclose(flat, flat[0], rtol=1e-9)
    shrunk = mahalanobis_sums(features, reg=0.0, shrinkage=0.2)
    assert np.ptp(shrunk) > 0.1


# --- Ablations ---

def tensors_with_outlier():
    return make_tensors({CPU: outlier_values(steps=80, outlier=3, seed=1), MEM: outlier_values(steps=80, outlier=3, seed=2)})


def test_raw_ablation_flags_the_outlier():
    verdict = ablation_detect(AblationMode.RAW, tensors_with_outlier(), 50, CFG, metric=CPU)
    assert verdict.candidate_machine == "node-003"
    assert verdict.metric == CPU
    with pytest.raises(ValueError):
        ablation_detect(AblationMode.RAW, tensors_with_outlier(), 50, CFG)


def test_ablations_need_their_models():
    tensors = tensors_with_outlier()
    with pytest.raises(MissingModel):
        ablation_detect(AblationMode.CON, tensors, 50, CFG)
    with pytest.raises(MissingModel):
        ablation_detect(AblationMode.INT, tensors, 50, CFG)


def test_con_and_int_verdicts():
    tensors = tensors_with_outlier()
    hp = VaeHyperparams(w=8, hidden_size=3, latent_size=2, seed=4)
    models = {CPU: init_model([CPU], hp), MEM: init_model([MEM], hp)}
    integrated = init_model([CPU, MEM], hp)
    con = ablation_detect(AblationMode.CON, tensors, 50, CFG, models=models)
    whole = ConcatDetector(models, CFG).scan(tensors)
    assert con.window_start == 50
    np.testing.assert_allclose(con.normal_scores, whole[50].normal_scores, atol=1e-9)
    verdict = ablation_detect(AblationMode.INT, tensors, 50, CFG, integrated=integrated)
    np.testing.assert_allclose(verdict.normal_scores, IntegratedDetector(integrated, CFG).scan(tensors)[50].normal_scores, atol=1e-9)


def test_every_detector_runs_a_session():
    tensors = tensors_with_outlier()
    hp = VaeHyperparams(w=8, hidden_size=3, latent_size=2, seed=4)
    models = {CPU: init_model([CPU], hp), MEM: init_model([MEM], hp)}
    priority = PriorityList.catalog_default([CPU, MEM])
    detectors = [
        FaultDetector(models, priority, CFG),
        RawDetector(priority, CFG),
        MdDetector(CFG),
        ConcatDetector(models, CFG),
        IntegratedDetector(init_model([CPU, MEM], hp), CFG),
    ]
    assert [d.pipeline for d in detectors] == [Pipeline.VAE, Pipeline.RAW, Pipeline.MD, Pipeline.CON, Pipeline.INT]
    for detector in detectors:
        stats = SessionStats(task_id=tensors.task_id, pipeline=detector.pipeline)
        alerts = detector.detect_session(tensors, stats)
        assert stats.windows_scanned > 0
        assert all(a.pipeline == detector.pipeline for a in alerts)
        if detector.pipeline in (Pipeline.MD, Pipeline.CON, Pipeline.INT):
            assert stats.evaluated_metrics == [None]
            assert all(a.metric is None for a in alerts)


def test_raw_session_finds_the_outlier():
    # the drop has to outlast the 60 s continuity
    tensors = make_tensors({CPU: outlier_values(steps=200, outlier=3, seed=1)})
    alerts = RawDetector(PriorityList.catalog_default([CPU]), CFG).detect_session(tensors)
    assert [a.machine_id for a in alerts] == ["node-003"]
