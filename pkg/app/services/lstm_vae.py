"""LSTM variational autoencoder with hand-derived backpropagation through time.

Gate rows of every LSTM weight matrix are ordered (input, forget, candidate,
output). Inputs are batched as (batch, w, D); a single window of one metric is
the (1, w, 1) special case.
"""
from collections import OrderedDict
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union
import logging

import numpy as np
from scipy.special import expit

from app.core.errors import MetricMismatch, NonFiniteLoss, NoTrainingData, ShapeMismatch
from app.models.catalog import MetricKind
from app.schemas.traces import Window
from app.schemas.vae import Reconstruction, VaeHyperparams, VaeModel, parameter_shapes

logger = logging.getLogger(__name__)

Params = Dict[str, np.ndarray]


class LstmWeights(NamedTuple):
    w_x: np.ndarray  # (4H, D_in)
    w_h: np.ndarray  # (4H, H)
    b: np.ndarray  # (4H,)


class StepCache(NamedTuple):
    x: np.ndarray
    h_prev: np.ndarray
    c_prev: np.ndarray
    i: np.ndarray
    f: np.ndarray
    g: np.ndarray
    o: np.ndarray
    tanh_c: np.ndarray


class LstmOutput(NamedTuple):
    h_final: np.ndarray
    hidden_states: np.ndarray


def layer_weights(params: Params, prefix: str, layers: int) -> List[LstmWeights]:
    return [
        LstmWeights(params[f"{prefix}.{l}.w_x"], params[f"{prefix}.{l}.w_h"], params[f"{prefix}.{l}.b"])
        for l in range(layers)
    ]


# --- Cell ---

def lstm_step(
    x: np.ndarray, h: np.ndarray, c: np.ndarray, weights: LstmWeights
) -> Tuple[np.ndarray, np.ndarray, StepCache]:
    hidden = h.shape[-1]
    a = x @ weights.w_x.T + h @ weights.w_h.T + weights.b
    i = expit(a[:, :hidden])
    f = expit(a[:, hidden : 2 * hidden])
    g = np.tanh(a[:, 2 * hidden : 3 * hidden])
    o = expit(a[:, 3 * hidden :])
    c_new = f * c + i * g
    tanh_c = np.tanh(c_new)
    h_new = o * tanh_c
    return h_new, c_new, StepCache(x, h, c, i, f, g, o, tanh_c)


def lstm_step_backward(
    dh: np.ndarray, dc: np.ndarray, cache: StepCache, weights: LstmWeights, grads: List[np.ndarray]
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Backward through one cell; grads = [dw_x, dw_h, db] accumulated in place.

    Returns (dx, dh_prev, dc_prev).
    """
    x, h_prev, c_prev, i, f, g, o, tanh_c = cache
    do = dh * tanh_c
    dc = dc + dh * o * (1.0 - tanh_c**2)
    da = np.concatenate(
        [
            dc * g * i * (1.0 - i),
            dc * c_prev * f * (1.0 - f),
            dc * i * (1.0 - g**2),
            do * o * (1.0 - o),
        ],
        axis=1,
    )
    grads[0] += da.T @ x
    grads[1] += da.T @ h_prev
    grads[2] += da.sum(axis=0)
    return da @ weights.w_x, da @ weights.w_h, dc * f


def _as_batch(sequence: np.ndarray) -> Tuple[np.ndarray, int]:
    """Lift a (w,), (w, D) or (B, w, D) array to (B, w, D), remembering the input rank"""
    arr = np.asarray(sequence, dtype=np.float64)
    if arr.ndim == 1:
        return arr[None, :, None], 1
    if arr.ndim == 2:
        return arr[None, :, :], 2
    if arr.ndim == 3:
        return arr, 3
    raise ShapeMismatch(f"sequence must have 1 to 3 dims, got {arr.ndim}")


def lstm_forward(
    weights: Sequence[LstmWeights],
    sequence: np.ndarray,
    initial_state: Optional[Sequence[Tuple[np.ndarray, np.ndarray]]] = None,
) -> LstmOutput:
    """Run a stacked LSTM over a sequence; returns the top layer's final and per-step hidden states"""
    x, rank = _as_batch(sequence)
    if x.shape[2] != weights[0].w_x.shape[1]:
        raise ShapeMismatch(f"input width {x.shape[2]}, layer expects {weights[0].w_x.shape[1]}")
    batch, steps = x.shape[0], x.shape[1]
    hidden = weights[0].w_h.shape[1]
    if initial_state is None:
        state = [(np.zeros((batch, hidden)), np.zeros((batch, hidden))) for _ in weights]
    else:
        state = [(np.broadcast_to(h, (batch, hidden)), np.broadcast_to(c, (batch, hidden))) for h, c in initial_state]
    hs = np.empty((batch, steps, hidden))
    for t in range(steps):
        inp = x[:, t]
        for l, layer in enumerate(weights):
            h, c, _ = lstm_step(inp, state[l][0], state[l][1], layer)
            state[l] = (h, c)
            inp = h
        hs[:, t] = inp
    if rank == 3:
        return LstmOutput(hs[:, -1], hs)
    return LstmOutput(hs[0, -1], hs[0])


# --- Forward passes with caches ---

class _Forward(NamedTuple):
    mu: np.ndarray
    logvar: np.ndarray
    z: np.ndarray
    y: np.ndarray
    h_final: np.ndarray
    enc_caches: List[List[StepCache]]
    dec_caches: List[List[StepCache]]
    dec_tops: np.ndarray


def _encode(params: Params, hp: VaeHyperparams, x: np.ndarray):
    layers = layer_weights(params, "encoder", hp.lstm_layers)
    batch, steps = x.shape[0], x.shape[1]
    state = [(np.zeros((batch, hp.hidden_size)), np.zeros((batch, hp.hidden_size))) for _ in layers]
    caches: List[List[StepCache]] = []
    for t in range(steps):
        inp = x[:, t]
        step_caches = []
        for l, layer in enumerate(layers):
            h, c, cache = lstm_step(inp, state[l][0], state[l][1], layer)
            state[l] = (h, c)
            step_caches.append(cache)
            inp = h
        caches.append(step_caches)
    h_final = state[-1][0]
    mu = h_final @ params["mu_head.w"].T + params["mu_head.b"]
    logvar = h_final @ params["logvar_head.w"].T + params["logvar_head.b"]
    return mu, logvar, h_final, caches


def _decoder_state(params: Params, hp: VaeHyperparams, z: np.ndarray) -> List[Tuple[np.ndarray, np.ndarray]]:
    s = z @ params["decoder_init.w"].T + params["decoder_init.b"]
    hidden = hp.hidden_size
    return [
        (s[:, 2 * hidden * l : 2 * hidden * l + hidden], s[:, 2 * hidden * l + hidden : 2 * hidden * (l + 1)])
        for l in range(hp.lstm_layers)
    ]


def _decode(params: Params, hp: VaeHyperparams, z: np.ndarray, width: int):
    layers = layer_weights(params, "decoder", hp.lstm_layers)
    state = _decoder_state(params, hp, z)
    batch = z.shape[0]
    y = np.empty((batch, hp.w, width))
    tops = np.empty((batch, hp.w, hp.hidden_size))
    y_prev = np.zeros((batch, width))
    caches: List[List[StepCache]] = []
    for t in range(hp.w):
        inp = y_prev
        step_caches = []
        for l, layer in enumerate(layers):
            h, c, cache = lstm_step(inp, state[l][0], state[l][1], layer)
            state[l] = (h, c)
            step_caches.append(cache)
            inp = h
        caches.append(step_caches)
        tops[:, t] = inp
        y_prev = inp @ params["output_head.w"].T + params["output_head.b"]
        y[:, t] = y_prev
    return y, tops, caches


def _forward(params: Params, hp: VaeHyperparams, x: np.ndarray, eps: np.ndarray) -> _Forward:
    mu, logvar, h_final, enc_caches = _encode(params, hp, x)
    z = mu + np.exp(0.5 * logvar) * eps
    y, tops, dec_caches = _decode(params, hp, z, x.shape[2])
    return _Forward(mu, logvar, z, y, h_final, enc_caches, dec_caches, tops)


# --- Loss ---

def kl_divergence(mu: np.ndarray, logvar: np.ndarray) -> np.ndarray:
    """Gaussian KL to N(0, I), averaged over latent dimensions; one value per row"""
    return -0.5 * np.sum(1.0 + logvar - mu**2 - np.exp(logvar), axis=-1) / mu.shape[-1]


def vae_loss(
    inputs: np.ndarray, denoised: np.ndarray, mu: np.ndarray, logvar: np.ndarray, kl_weight: float
) -> float:
    """MSE reconstruction plus kl_weight times the latent-averaged KL, both batch means"""
    mse = float(np.mean((np.asarray(denoised) - np.asarray(inputs)) ** 2))
    kl = float(np.mean(kl_divergence(np.asarray(mu), np.asarray(logvar))))
    loss = mse + kl_weight * kl
    if not np.isfinite(loss):
        raise NonFiniteLoss(f"loss diverged (mse={mse}, kl={kl})")
    return loss


def loss_and_gradients(
    params: Params, hp: VaeHyperparams, x: np.ndarray, eps: Optional[np.ndarray] = None
) -> Tuple[float, Params]:
    """Loss on a (B, w, D) batch and its gradient for every parameter"""
    x, _ = _as_batch(x)
    batch, steps, width = x.shape
    latent = hp.latent_size
    if eps is None:
        eps = np.zeros((batch, latent))
    fw = _forward(params, hp, x, eps)
    loss = vae_loss(x, fw.y, fw.mu, fw.logvar, hp.kl_weight)

    grads: Params = OrderedDict((name, np.zeros_like(value)) for name, value in params.items())

    # decoder, newest step first
    dec_layers = layer_weights(params, "decoder", hp.lstm_layers)
    dec_grads = [[grads[f"decoder.{l}.w_x"], grads[f"decoder.{l}.w_h"], grads[f"decoder.{l}.b"]] for l in range(hp.lstm_layers)]
    dy_all = 2.0 * (fw.y - x) / x.size
    dh = [np.zeros((batch, hp.hidden_size)) for _ in dec_layers]
    dc = [np.zeros((batch, hp.hidden_size)) for _ in dec_layers]
    dy_next = np.zeros((batch, width))
    w_out = params["output_head.w"]
    for t in reversed(range(steps)):
        dy = dy_all[:, t] + dy_next
        grads["output_head.w"] += dy.T @ fw.dec_tops[:, t]
        grads["output_head.b"] += dy.sum(axis=0)
        dh[-1] = dh[-1] + dy @ w_out
        for l in reversed(range(hp.lstm_layers)):
            dx, dh[l], dc[l] = lstm_step_backward(dh[l], dc[l], fw.dec_caches[t][l], dec_layers[l], dec_grads[l])
            if l > 0:
                dh[l - 1] = dh[l - 1] + dx
            else:
                # input at step t was the output of step t - 1
                dy_next = dx

    ds = np.concatenate([np.concatenate([dh[l], dc[l]], axis=1) for l in range(hp.lstm_layers)], axis=1)
    grads["decoder_init.w"] += ds.T @ fw.z
    grads["decoder_init.b"] += ds.sum(axis=0)
    dz = ds @ params["decoder_init.w"]

    # reparameterization and KL
    std = np.exp(0.5 * fw.logvar)
    dmu = dz + hp.kl_weight * fw.mu / (latent * batch)
    dlogvar = dz * eps * 0.5 * std + hp.kl_weight * (-0.5 / latent) * (1.0 - np.exp(fw.logvar)) / batch

    grads["mu_head.w"] += dmu.T @ fw.h_final
    grads["mu_head.b"] += dmu.sum(axis=0)
    grads["logvar_head.w"] += dlogvar.T @ fw.h_final
    grads["logvar_head.b"] += dlogvar.sum(axis=0)
    dh_final = dmu @ params["mu_head.w"] + dlogvar @ params["logvar_head.w"]

    # encoder
    enc_layers = layer_weights(params, "encoder", hp.lstm_layers)
    enc_grads = [[grads[f"encoder.{l}.w_x"], grads[f"encoder.{l}.w_h"], grads[f"encoder.{l}.b"]] for l in range(hp.lstm_layers)]
    dh = [np.zeros((batch, hp.hidden_size)) for _ in enc_layers]
    dc = [np.zeros((batch, hp.hidden_size)) for _ in enc_layers]
    dh[-1] = dh_final
    for t in reversed(range(steps)):
        for l in reversed(range(hp.lstm_layers)):
            dx, dh[l], dc[l] = lstm_step_backward(dh[l], dc[l], fw.enc_caches[t][l], enc_layers[l], enc_grads[l])
            if l > 0:
                dh[l - 1] = dh[l - 1] + dx
    return loss, grads


# --- Optimizer ---

class AdamOptimizer:
    """Adam with bias correction over a dict of parameter arrays"""

    def __init__(self, params: Params, learning_rate: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p) for name, p in params.items()}
        self.v = {name: np.zeros_like(p) for name, p in params.items()}

    def step(self, params: Params, grads: Params) -> None:
        self.t += 1
        correction1 = 1.0 - self.beta1**self.t
        correction2 = 1.0 - self.beta2**self.t
        for name, g in grads.items():
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[name] -= self.learning_rate * (m / correction1) / (np.sqrt(v / correction2) + self.eps)


# --- Model lifecycle ---

def init_params(hp: VaeHyperparams, input_size: int, rng: Optional[np.random.Generator] = None) -> Params:
    rng = rng if rng is not None else np.random.default_rng(hp.seed)
    k = 1.0 / np.sqrt(hp.hidden_size)
    return OrderedDict(
        (name, rng.uniform(-k, k, size=shape)) for name, shape in parameter_shapes(hp, input_size).items()
    )


def init_model(metrics: List[MetricKind], hp: VaeHyperparams) -> VaeModel:
    return VaeModel(metrics=list(metrics), hyperparams=hp, weights=init_params(hp, len(metrics)))


TrainingInput = Union[np.ndarray, Sequence[Window]]


def _training_array(windows: TrainingInput, metrics: Optional[List[MetricKind]]) -> Tuple[np.ndarray, List[MetricKind]]:
    if isinstance(windows, np.ndarray):
        if metrics is None:
            raise ValueError("metrics must be given when training from a bare array")
        arr = windows
    else:
        windows = list(windows)
        if not windows:
            raise NoTrainingData("no training windows")
        found = sorted({win.metric for win in windows}, key=lambda m: m.index)
        if metrics is None:
            metrics = found
        if found != list(metrics):
            raise MetricMismatch(f"windows carry {[m.value for m in found]}, expected {[m.value for m in metrics]}")
        arr = np.stack([win.data for win in windows])
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr, list(metrics)


def epoch_learning_rate(hp: VaeHyperparams, epoch: int) -> float:
    """Geometric decay from learning_rate at epoch 0 to learning_rate * lr_final_fraction at the last epoch"""
    if hp.epochs <= 1:
        return hp.learning_rate
    return hp.learning_rate * hp.lr_final_fraction ** (epoch / (hp.epochs - 1))


def train_model(
    windows: TrainingInput, hp: VaeHyperparams, metrics: Optional[List[MetricKind]] = None
) -> VaeModel:
    """Fit an LSTM-VAE with minibatch Adam on a decaying learning rate, keeping the parameters of the best epoch"""
    x, metrics = _training_array(windows, metrics)
    if x.shape[0] == 0:
        raise NoTrainingData(f"no training windows for {[m.value for m in metrics]}")
    if x.shape[1] != hp.w or x.shape[2] != len(metrics):
        raise ShapeMismatch(f"windows of shape {x.shape[1:]} for w={hp.w} and {len(metrics)} metric(s)")
    if not np.all(np.isfinite(x)):
        raise NonFiniteLoss("training windows contain non-finite values")

    params = init_params(hp, len(metrics))
    data_rng = np.random.default_rng([hp.seed, 1])
    if x.shape[0] > hp.max_windows:
        keep = np.sort(data_rng.choice(x.shape[0], size=hp.max_windows, replace=False))
        x = x[keep]
    n = x.shape[0]
    label = "+".join(m.value for m in metrics) if len(metrics) <= 3 else f"{len(metrics)} metrics"

    best_loss = np.inf
    best = OrderedDict((name, p.copy()) for name, p in params.items())
    optimizer = AdamOptimizer(params, learning_rate=hp.learning_rate)
    for epoch in range(hp.epochs):
        optimizer.learning_rate = epoch_learning_rate(hp, epoch)
        order = data_rng.permutation(n)
        total = 0.0
        for start in range(0, n, hp.batch_size):
            batch = x[order[start : start + hp.batch_size]]
            eps = data_rng.standard_normal((batch.shape[0], hp.latent_size))
            loss, grads = loss_and_gradients(params, hp, batch, eps)
            optimizer.step(params, grads)
            total += loss * batch.shape[0]
        epoch_loss = total / n
        if not np.isfinite(epoch_loss):
            raise NonFiniteLoss(f"{label}: epoch {epoch} loss is not finite")
        if not all(np.all(np.isfinite(p)) for p in params.values()):
            raise NonFiniteLoss(f"{label}: parameters diverged in epoch {epoch}")
        logger.debug(f"{label}: epoch {epoch} loss={epoch_loss:.6g}")
        if epoch_loss < best_loss:
            best_loss = epoch_loss
            best = OrderedDict((name, p.copy()) for name, p in params.items())

    if hp.epochs:
        logger.info(f"Trained {label} on {n} windows, best epoch loss {best_loss:.6g}")
    return VaeModel(metrics=metrics, hyperparams=hp, weights=best)


# --- Inference ---

def _check_width(model: VaeModel, x: np.ndarray) -> None:
    hp = model.hyperparams
    if x.shape[1] != hp.w or x.shape[2] != model.input_size:
        raise ShapeMismatch(f"window shape {x.shape[1:]} does not fit w={hp.w}, width={model.input_size}")


def _window_data(model: VaeModel, window: Union[Window, np.ndarray]) -> np.ndarray:
    if isinstance(window, Window):
        if window.metric not in model.metrics:
            raise MetricMismatch(f"window is {window.metric.value}, model covers {[m.value for m in model.metrics]}")
        window = window.data
    x, _ = _as_batch(window)
    _check_width(model, x)
    return x


def encode(model: VaeModel, window: Union[Window, np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
    x = _window_data(model, window)
    mu, logvar, _, _ = _encode(model.weights, model.hyperparams, x)
    return mu[0], logvar[0]


def reparameterize(mu: np.ndarray, logvar: np.ndarray, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """z = mu + exp(logvar / 2) * eps; without an rng this is inference mode and z == mu"""
    mu = np.asarray(mu, dtype=np.float64)
    logvar = np.asarray(logvar, dtype=np.float64)
    if mu.shape != logvar.shape:
        raise ShapeMismatch(f"mu {mu.shape} and logvar {logvar.shape} differ")
    if rng is None:
        return mu.copy()
    return mu + np.exp(0.5 * logvar) * rng.standard_normal(mu.shape)


def decode(model: VaeModel, z: np.ndarray) -> np.ndarray:
    hp = model.hyperparams
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != hp.latent_size or z.ndim not in (1, 2):
        raise ShapeMismatch(f"latent of shape {z.shape}, expected ({hp.latent_size},)")
    batched = z.ndim == 2
    y, _, _ = _decode(model.weights, hp, np.atleast_2d(z), model.input_size)
    if batched:
        return y
    return y[0, :, 0] if model.input_size == 1 else y[0]


def denoise_batch(model: VaeModel, windows: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Inference-mode reconstruction of (N, w) or (N, w, D) windows.

    Returns (denoised, mu, logvar) with denoised shaped like the input.
    """
    arr = np.asarray(windows, dtype=np.float64)
    x = arr[:, :, None] if arr.ndim == 2 else arr
    _check_width(model, x)
    hp = model.hyperparams
    mu, logvar, _, _ = _encode(model.weights, hp, x)
    y, _, _ = _decode(model.weights, hp, mu, model.input_size)
    return y.reshape(arr.shape), mu, logvar


def denoise(model: VaeModel, window: Union[Window, np.ndarray]) -> Reconstruction:
    x = _window_data(model, window)
    y, mu, logvar = denoise_batch(model, x)
    denoised = y[0, :, 0] if model.input_size == 1 else y[0]
    return Reconstruction(
        denoised=denoised, mu=mu[0], logvar=logvar[0], mse=float(np.mean((y - x) ** 2))
    )
