from collections import OrderedDict

import numpy as np
import pytest
from hypothesis import given, settings as hsettings, strategies as st

from app.core.errors import MetricMismatch, ModelFormatError, MissingModel, NoTrainingData, ShapeMismatch
from app.models.catalog import MetricKind
from app.models.faults import FaultType
from app.schemas.simulation import EffectKind, FaultProfile, Perturbation
from app.schemas.traces import Window
from app.schemas.vae import VaeHyperparams, VaeModel, parameter_shapes
from app.services.lstm_vae import (
    AdamOptimizer,
    LstmWeights,
    decode,
    denoise,
    denoise_batch,
    encode,
    init_model,
    init_params,
    kl_divergence,
    loss_and_gradients,
    lstm_forward,
    reparameterize,
    train_model,
    vae_loss,
)
from app.services.model_store import ModelStore, deserialize, serialize
from app.services.preprocessing import align_task, normalize_task, window_matrix
from app.services.simulator import inject_fault
from tests.conftest import TRAIN_MACHINES, normal_cluster

CPU = MetricKind.CPU_USAGE


def sigmoid(a):
    return 1.0 / (1.0 + np.exp(-a))


def zero_model(hp, metrics=(CPU,)):
    shapes = parameter_shapes(hp, len(metrics))
    return VaeModel(metrics=list(metrics), hyperparams=hp, weights={n: np.zeros(s) for n, s in shapes.items()})


def test_zero_weights_reconstruct_zeros(tiny_hp):
    model = zero_model(tiny_hp)
    window = np.array([0.2, 0.4, 0.6, 0.8])
    rec = denoise(model, window)
    np.testing.assert_array_equal(rec.denoised, np.zeros(4))
    np.testing.assert_array_equal(rec.mu, np.zeros(tiny_hp.latent_size))
    np.testing.assert_array_equal(rec.logvar, np.zeros(tiny_hp.latent_size))
    assert rec.mse == pytest.approx(np.mean(window**2))


def test_lstm_forward_matches_unrolled_cell():
    rng = np.random.default_rng(5)
    hidden, width, steps = 3, 2, 6
    weights = LstmWeights(
        w_x=rng.normal(size=(4 * hidden, width)), w_h=rng.normal(size=(4 * hidden, hidden)), b=rng.normal(size=4 * hidden)
    )
    seq = rng.normal(size=(steps, width))
    h = np.zeros(hidden)
    c = np.zeros(hidden)
    expected = []
    for t in range(steps):
        a = weights.w_x @ seq[t] + weights.w_h @ h + weights.b
        i, f, g, o = sigmoid(a[:3]), sigmoid(a[3:6]), np.tanh(a[6:9]), sigmoid(a[9:])
        c = f * c + i * g
        h = o * np.tanh(c)
        expected.append(h)
    out = lstm_forward([weights], seq)
    np.testing.assert_allclose(out.hidden_states, np.array(expected), rtol=1e-12)
    np.testing.assert_allclose(out.h_final, expected[-1], rtol=1e-12)


def test_lstm_forward_rejects_wrong_width():
    weights = LstmWeights(np.zeros((8, 3)), np.zeros((8, 2)), np.zeros(8))
    with pytest.raises(ShapeMismatch):
        lstm_forward([weights], np.zeros((4, 2)))


def assert_gradients_match_finite_differences(hp, width, batch, rng):
    params = init_params(hp, width, rng)
    x = rng.uniform(0.0, 1.0, size=(batch, hp.w, width))
    eps = rng.standard_normal((batch, hp.latent_size))
    _, grads = loss_and_gradients(params, hp, x, eps)

    h = 1e-6
    for name, value in params.items():
        numeric = np.zeros_like(value)
        for idx in np.ndindex(value.shape):
            original = value[idx]
            value[idx] = original + h
            up, _ = loss_and_gradients(params, hp, x, eps)
            value[idx] = original - h
            down, _ = loss_and_gradients(params, hp, x, eps)
            value[idx] = original
            numeric[idx] = (up - down) / (2 * h)
        np.testing.assert_allclose(grads[name], numeric, rtol=1e-4, atol=1e-8, err_msg=name)


@pytest.mark.parametrize("layers, width", [(1, 1), (2, 2)])
def test_gradients_match_finite_differences(layers, width):
    hp = VaeHyperparams(w=3, hidden_size=2, latent_size=2, lstm_layers=layers, kl_weight=0.3, seed=11)
    assert_gradients_match_finite_differences(hp, width, 2, np.random.default_rng(1))


@pytest.mark.slow
@given(
    seed=st.integers(0, 2**32 - 1),
    layers=st.integers(1, 2),
    width=st.integers(1, 2),
    w=st.integers(2, 4),
    hidden=st.integers(1, 3),
    latent=st.integers(1, 3),
    batch=st.integers(1, 3),
    kl_weight=st.floats(0.0, 1.0),
)
@hsettings(max_examples=120, deadline=None)
def test_gradients_match_finite_differences_on_random_draws(seed, layers, width, w, hidden, latent, batch, kl_weight):
    hp = VaeHyperparams(w=w, hidden_size=hidden, latent_size=latent, lstm_layers=layers, kl_weight=kl_weight)
    assert_gradients_match_finite_differences(hp, width, batch, np.random.default_rng(seed))


def test_kl_is_zero_at_standard_normal():
    assert kl_divergence(np.zeros((2, 3)), np.zeros((2, 3))) == pytest.approx([0.0, 0.0])
    loss = vae_loss(np.ones((1, 4, 1)), np.zeros((1, 4, 1)), np.ones((1, 2)), np.zeros((1, 2)), kl_weight=0.5)
    # mse 1 plus 0.5 * mean(mu^2 / 2)
    assert loss == pytest.approx(1.0 + 0.5 * 0.5)


def test_reparameterize_without_rng_is_the_mean():
    mu = np.array([0.3, -1.0])
    np.testing.assert_array_equal(reparameterize(mu, np.array([5.0, 5.0])), mu)
    z = reparameterize(mu, np.full(2, -60.0), np.random.default_rng(0))
    np.testing.assert_allclose(z, mu, atol=1e-10)
    with pytest.raises(ShapeMismatch):
        reparameterize(mu, np.zeros(3))


def test_encode_decode_shapes(tiny_hp):
    model = init_model([CPU], tiny_hp)
    mu, logvar = encode(model, np.linspace(0, 1, tiny_hp.w))
    assert mu.shape == logvar.shape == (tiny_hp.latent_size,)
    assert decode(model, mu).shape == (tiny_hp.w,)
    assert decode(model, np.stack([mu, mu])).shape == (2, tiny_hp.w, 1)
    with pytest.raises(ShapeMismatch):
        decode(model, np.zeros(tiny_hp.latent_size + 1))


def test_denoise_checks_window_and_metric(tiny_hp):
    model = init_model([CPU], tiny_hp)
    with pytest.raises(ShapeMismatch):
        denoise(model, np.zeros(tiny_hp.w + 1))
    other = Window(machine_index=0, metric=MetricKind.MEMORY_USAGE, start_index=0, data=np.zeros(tiny_hp.w))
    with pytest.raises(MetricMismatch):
        denoise(model, other)


def test_denoise_batch_matches_single_windows(tiny_hp):
    model = init_model([CPU], tiny_hp)
    windows = np.random.default_rng(2).uniform(size=(5, tiny_hp.w))
    batch, _, _ = denoise_batch(model, windows)
    for row, expected in zip(windows, batch):
        np.testing.assert_allclose(denoise(model, row).denoised, expected, rtol=1e-10, atol=1e-12)


def test_adam_moves_against_the_gradient():
    params = OrderedDict(x=np.array([1.0, -1.0]))
    opt = AdamOptimizer(params, learning_rate=0.1)
    opt.step(params, OrderedDict(x=np.array([2.0, -3.0])))
    # the first bias-corrected step has magnitude lr per coordinate
    np.testing.assert_allclose(params["x"], [0.9, -0.9], rtol=1e-6)


def test_zero_epochs_returns_initial_weights(tiny_hp):
    hp = tiny_hp.copy(update={"epochs": 0})
    windows = np.random.default_rng(0).uniform(size=(10, hp.w))
    model = train_model(windows, hp, [CPU])
    init = init_params(hp, 1)
    for name in init:
        np.testing.assert_array_equal(model.weights[name], init[name])


def test_training_is_deterministic(tiny_hp):
    windows = np.random.default_rng(0).uniform(size=(40, tiny_hp.w))
    a = train_model(windows, tiny_hp, [CPU])
    b = train_model(windows, tiny_hp, [CPU])
    assert serialize(a) == serialize(b)


def test_training_input_errors(tiny_hp):
    with pytest.raises(NoTrainingData):
        train_model([], tiny_hp)
    with pytest.raises(NoTrainingData):
        train_model(np.empty((0, tiny_hp.w)), tiny_hp, [CPU])
    with pytest.raises(ShapeMismatch):
        train_model(np.zeros((3, tiny_hp.w + 1)), tiny_hp, [CPU])


def test_training_from_windows_infers_the_metric(tiny_hp):
    windows = [
        Window(machine_index=i, metric=CPU, start_index=0, data=np.full(tiny_hp.w, 0.1 * i)) for i in range(4)
    ]
    assert train_model(windows, tiny_hp).metrics == [CPU]


@pytest.mark.slow
def test_training_fits_constant_windows():
    hp = VaeHyperparams(
        w=8, hidden_size=4, latent_size=2, epochs=60, batch_size=32, learning_rate=1e-2, max_windows=1024, seed=0
    )
    windows = np.full((1024, hp.w), 0.5)
    before = denoise_batch(init_model([CPU], hp), windows)[0]
    after = denoise_batch(train_model(windows, hp, [CPU]), windows)[0]
    mse_before = np.mean((before - windows) ** 2)
    mse_after = np.mean((after - windows) ** 2)
    assert mse_after < mse_before
    assert mse_after < 1e-5


def cpu_windows(traces, machines, w, start=0, stop=None):
    values = normalize_task(align_task(traces))[CPU].values
    return window_matrix(values[machines, start:stop], w).reshape(-1, w)


def reconstruction_mse(model, windows):
    denoised = denoise_batch(model, windows)[0]
    return np.mean((denoised - windows) ** 2, axis=1)


@pytest.mark.slow
def test_default_training_reconstructs_held_out_normal_windows(trained_cpu_model):
    w = trained_cpu_model.hyperparams.w
    held_out = cpu_windows(normal_cluster(), slice(TRAIN_MACHINES, None), w)
    assert reconstruction_mse(trained_cpu_model, held_out).mean() < 1e-4


@pytest.mark.slow
def test_injected_fault_windows_reconstruct_worse_than_normal_ones(trained_cpu_model):
    w = trained_cpu_model.hyperparams.w
    profile = FaultProfile(
        fault_type=FaultType.ECC_ERROR,
        duration=300.0,
        perturbations=[Perturbation(metric=CPU, effect=EffectKind.DROP_TO, level=0.02)],
    ).placed(7, 500.0)
    faulty, _ = inject_fault(normal_cluster(), profile)
    normal = cpu_windows(faulty, slice(6, 7), w)
    dropped = cpu_windows(faulty, slice(7, 8), w, 500, 800)
    normal_mse = reconstruction_mse(trained_cpu_model, normal)
    assert reconstruction_mse(trained_cpu_model, dropped).min() > np.percentile(normal_mse, 99)


def test_serialize_keeps_weights_exactly(tiny_hp):
    model = init_model([CPU, MetricKind.MEMORY_USAGE], tiny_hp)
    back = deserialize(serialize(model))
    assert back.metrics == model.metrics
    assert back.hyperparams == model.hyperparams
    assert list(back.weights) == list(model.weights)
    for name in model.weights:
        np.testing.assert_array_equal(back.weights[name], model.weights[name])


@pytest.mark.parametrize("blob", [b"", b"NOTAMODEL" * 4])
def test_deserialize_rejects_garbage(blob):
    with pytest.raises(ModelFormatError):
        deserialize(blob)


def test_deserialize_rejects_truncated_payload(tiny_hp):
    blob = serialize(init_model([CPU], tiny_hp))
    with pytest.raises(ModelFormatError):
        deserialize(blob[:-8])


def test_model_store(tmp_path, tiny_hp):
    store = ModelStore(tmp_path / "models")
    model = init_model([CPU], tiny_hp)
    path = store.save(model)
    assert path.name == "CpuUsage.vae"
    assert store.available() == [CPU]
    store.clear_cache()
    loaded = store.load(CPU)
    np.testing.assert_array_equal(loaded.weights["output_head.w"], model.weights["output_head.w"])
    with pytest.raises(MissingModel):
        store.load(MetricKind.MEMORY_USAGE)
    with pytest.raises(MissingModel):
        store.load_integrated()
