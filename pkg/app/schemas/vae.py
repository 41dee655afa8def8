from collections import OrderedDict
from typing import Dict, List, Tuple

import numpy as np
from pydantic import BaseModel, Field, root_validator, validator

from app.models.catalog import MetricKind

FORMAT_VERSION = 1


class VaeHyperparams(BaseModel):
    w: int = Field(8, ge=2, description="Window length in samples")
    hidden_size: int = Field(4, ge=1)
    latent_size: int = Field(8, ge=1)
    lstm_layers: int = Field(1, ge=1)
    learning_rate: float = Field(5e-3, gt=0)
    lr_final_fraction: float = Field(
        0.01, gt=0, le=1, description="Learning rate of the last epoch as a fraction of learning_rate, decayed geometrically"
    )
    epochs: int = Field(100, ge=0)
    batch_size: int = Field(32, ge=1)
    kl_weight: float = Field(1e-4, ge=0)
    seed: int = 0
    max_windows: int = Field(2048, ge=1, description="Cap on pooled training windows, subsampled with the seed")

    class Config:
        allow_mutation = False


def parameter_shapes(hp: VaeHyperparams, input_size: int) -> "OrderedDict[str, Tuple[int, ...]]":
    """Named weight tensors of the LSTM-VAE in serialization order"""
    h, z, d = hp.hidden_size, hp.latent_size, input_size
    shapes: "OrderedDict[str, Tuple[int, ...]]" = OrderedDict()
    for layer in range(hp.lstm_layers):
        width = d if layer == 0 else h
        shapes[f"encoder.{layer}.w_x"] = (4 * h, width)
        shapes[f"encoder.{layer}.w_h"] = (4 * h, h)
        shapes[f"encoder.{layer}.b"] = (4 * h,)
    shapes["mu_head.w"] = (z, h)
    shapes["mu_head.b"] = (z,)
    shapes["logvar_head.w"] = (z, h)
    shapes["logvar_head.b"] = (z,)
    # (h0, c0) for every decoder layer
    shapes["decoder_init.w"] = (2 * h * hp.lstm_layers, z)
    shapes["decoder_init.b"] = (2 * h * hp.lstm_layers,)
    for layer in range(hp.lstm_layers):
        width = d if layer == 0 else h
        shapes[f"decoder.{layer}.w_x"] = (4 * h, width)
        shapes[f"decoder.{layer}.w_h"] = (4 * h, h)
        shapes[f"decoder.{layer}.b"] = (4 * h,)
    shapes["output_head.w"] = (d, h)
    shapes["output_head.b"] = (d,)
    return shapes


class VaeModel(BaseModel):
    """Weights and hyperparameters of one LSTM-VAE.

    Per-metric models carry a single metric; the integrated model used by the
    INT ablation carries every metric it was trained on, in input-column order.
    """

    metrics: List[MetricKind]
    hyperparams: VaeHyperparams
    weights: Dict[str, np.ndarray]
    version: int = FORMAT_VERSION

    class Config:
        arbitrary_types_allowed = True
        allow_mutation = False

    @validator("metrics")
    def non_empty(cls, v):
        if not v:
            raise ValueError("a model covers at least one metric")
        if len(set(v)) != len(v):
            raise ValueError("duplicate metrics in model")
        return v

    @root_validator(skip_on_failure=True)
    def check_weights(cls, values):
        expected = parameter_shapes(values["hyperparams"], len(values["metrics"]))
        weights = values["weights"]
        if set(weights) != set(expected):
            missing = sorted(set(expected) - set(weights))
            extra = sorted(set(weights) - set(expected))
            raise ValueError(f"weight names mismatch (missing={missing}, unexpected={extra})")
        ordered = OrderedDict()
        for name, shape in expected.items():
            arr = np.array(weights[name], dtype=np.float64)
            if arr.shape != shape:
                raise ValueError(f"{name}: shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name}: non-finite weights")
            arr.setflags(write=False)
            ordered[name] = arr
        values["weights"] = ordered
        return values

    @property
    def metric(self) -> MetricKind:
        if len(self.metrics) != 1:
            raise AttributeError("integrated model spans several metrics")
        return self.metrics[0]

    @property
    def input_size(self) -> int:
        return len(self.metrics)

    @property
    def integrated(self) -> bool:
        return len(self.metrics) > 1


class Reconstruction(BaseModel):
    denoised: np.ndarray
    mu: np.ndarray
    logvar: np.ndarray
    mse: float = Field(..., ge=0)

    class Config:
        arbitrary_types_allowed = True
        allow_mutation = False
