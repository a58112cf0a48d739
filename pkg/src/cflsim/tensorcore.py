"""Dense math core: a two-encoder multimodal classifier plus Adam.

Models are immutable bags of named float64 arrays, so every training step is a
pure function of its inputs and trajectories can be replayed bit-for-bit. The
Adam state exposes its bias-corrected moments, which lets the poverty tracker
estimate per-layer relative parameter change without storing snapshots of the
weights between batches.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ContractError, NumericError

# Denominator guard for relative change at near-zero parameter entries.
EPS_GUARD = 1e-12

# Canonical layer names produced by init_model. Weight and bias count as
# separate layers, which is the granularity used for poverty identification.
ENCODER_A = "encoder_A"
ENCODER_A_BIAS = "encoder_A_bias"
ENCODER_B = "encoder_B"
ENCODER_B_BIAS = "encoder_B_bias"
HEAD = "head"
HEAD_BIAS = "head_bias"
LAYER_ORDER = (ENCODER_A, ENCODER_A_BIAS, ENCODER_B, ENCODER_B_BIAS, HEAD, HEAD_BIAS)


def _frozen_array(values) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ParamLayer:
    """One named parameter array; shape is fixed for the model's lifetime."""

    name: str
    values: np.ndarray

    def __post_init__(self):
        arr = _frozen_array(self.values)
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"layer {self.name!r} contains non-finite entries")
        object.__setattr__(self, "values", arr)


@dataclass(frozen=True)
class ModelParams:
    """Ordered collection of uniquely named layers."""

    layers: tuple[ParamLayer, ...]

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        names = [layer.name for layer in self.layers]
        if len(set(names)) != len(names):
            raise ContractError(f"duplicate layer names in {names}")

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(layer.name for layer in self.layers)

    def get(self, name: str) -> np.ndarray:
        for layer in self.layers:
            if layer.name == name:
                return layer.values
        raise ContractError(f"model has no layer {name!r}")

    def as_dict(self) -> dict[str, np.ndarray]:
        return {layer.name: layer.values for layer in self.layers}

    def compatible_with(self, other: "ModelParams") -> bool:
        """True iff names, order, and shapes all match (aggregation safety)."""
        if self.names != other.names:
            return False
        return all(
            a.values.shape == b.values.shape
            for a, b in zip(self.layers, other.layers)
        )

    def with_values(self, arrays: dict[str, np.ndarray]) -> "ModelParams":
        """New model with some layers replaced; unnamed layers are shared."""
        for name, arr in arrays.items():
            if np.asarray(arr).shape != self.get(name).shape:
                raise ContractError(f"replacement for {name!r} has wrong shape")
        return ModelParams(
            tuple(
                ParamLayer(l.name, arrays[l.name]) if l.name in arrays else l
                for l in self.layers
            )
        )


@dataclass(frozen=True)
class ModelSpec:
    """Architecture knobs for the two-encoder classifier."""

    dim_a: int
    dim_b: int
    hidden: int
    classes: int
    activation: str = "tanh"


def _activation_pair(name: str):
    # Derivative is expressed in terms of the activation output.
    if name == "tanh":
        return np.tanh, lambda out: 1.0 - out * out
    if name == "relu":
        return lambda x: np.maximum(x, 0.0), lambda out: (out > 0.0).astype(np.float64)
    raise ConfigurationError(f"unknown activation {name!r}")


def init_model(spec: ModelSpec, seed: int) -> ModelParams:
    """Deterministic scaled-uniform initialization.

    Each layer draws from U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases use the
    same bound as their weight so no parameter starts exactly at zero, which
    keeps relative-change denominators meaningful.
    """
    for attr in ("dim_a", "dim_b", "hidden", "classes"):
        if getattr(spec, attr) <= 0:
            raise ConfigurationError(f"model spec {attr} must be positive, got {getattr(spec, attr)}")
    _activation_pair(spec.activation)
    rng = np.random.default_rng(seed)

    def uniform(shape, fan_in):
        bound = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    layers = (
        ParamLayer(ENCODER_A, uniform((spec.dim_a, spec.hidden), spec.dim_a)),
        ParamLayer(ENCODER_A_BIAS, uniform((spec.hidden,), spec.dim_a)),
        ParamLayer(ENCODER_B, uniform((spec.dim_b, spec.hidden), spec.dim_b)),
        ParamLayer(ENCODER_B_BIAS, uniform((spec.hidden,), spec.dim_b)),
        ParamLayer(HEAD, uniform((2 * spec.hidden, spec.classes), 2 * spec.hidden)),
        ParamLayer(HEAD_BIAS, uniform((spec.classes,), 2 * spec.hidden)),
    )
    return ModelParams(layers)


@dataclass(frozen=True)
class Batch:
    """One training batch; missing modality vectors are already zero-filled."""

    x_a: np.ndarray
    x_b: np.ndarray
    labels: np.ndarray
    has_missing: bool = False
    mask: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.labels)


def _check_finite(name: str, arr: np.ndarray):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite activations at layer {name!r}")


def forward_loss_grad(model: ModelParams, batch: Batch, activation: str = "tanh"):
    """Mean softmax cross-entropy, per-layer gradients and correct count.

    Returns:
        (loss, grads, correct) where grads maps layer name to an array shaped
        like the layer and correct counts argmax hits over the batch.
    """
    n = len(batch)
    if n == 0:
        raise ContractError("empty batch")
    act, act_deriv = _activation_pair(activation)

    w_a, b_a = model.get(ENCODER_A), model.get(ENCODER_A_BIAS)
    w_b, b_b = model.get(ENCODER_B), model.get(ENCODER_B_BIAS)
    w_h, b_h = model.get(HEAD), model.get(HEAD_BIAS)

    h_a = act(batch.x_a @ w_a + b_a)
    _check_finite(ENCODER_A, h_a)
    h_b = act(batch.x_b @ w_b + b_b)
    _check_finite(ENCODER_B, h_b)
    fused = np.concatenate([h_a, h_b], axis=1)
    logits = fused @ w_h + b_h
    _check_finite(HEAD, logits)

    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)
    rows = np.arange(n)
    log_probs = shifted - np.log(exp.sum(axis=1, keepdims=True))
    loss = float(-log_probs[rows, batch.labels].mean())
    correct = int((logits.argmax(axis=1) == batch.labels).sum())

    d_logits = probs.copy()
    d_logits[rows, batch.labels] -= 1.0
    d_logits /= n

    hidden = h_a.shape[1]
    d_fused = d_logits @ w_h.T
    d_pre_a = d_fused[:, :hidden] * act_deriv(h_a)
    d_pre_b = d_fused[:, hidden:] * act_deriv(h_b)

    grads = {
        ENCODER_A: batch.x_a.T @ d_pre_a,
        ENCODER_A_BIAS: d_pre_a.sum(axis=0),
        ENCODER_B: batch.x_b.T @ d_pre_b,
        ENCODER_B_BIAS: d_pre_b.sum(axis=0),
        HEAD: fused.T @ d_logits,
        HEAD_BIAS: d_logits.sum(axis=0),
    }
    return loss, grads, correct


def forward_logits(model: ModelParams, x_a: np.ndarray, x_b: np.ndarray,
                   activation: str = "tanh") -> np.ndarray:
    """Inference-only forward pass (no loss, no gradients)."""
    act, _ = _activation_pair(activation)
    h_a = act(x_a @ model.get(ENCODER_A) + model.get(ENCODER_A_BIAS))
    h_b = act(x_b @ model.get(ENCODER_B) + model.get(ENCODER_B_BIAS))
    return np.concatenate([h_a, h_b], axis=1) @ model.get(HEAD) + model.get(HEAD_BIAS)


@dataclass(frozen=True)
class AdamState:
    """Adam moments per layer; t counts applied steps."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def initial(cls, model: ModelParams, beta1: float = 0.9, beta2: float = 0.999,
                eps: float = 1e-8) -> "AdamState":
        zeros = {name: _frozen_array(np.zeros_like(arr)) for name, arr in model.as_dict().items()}
        second = {name: _frozen_array(np.zeros_like(arr)) for name, arr in model.as_dict().items()}
        return cls(m=zeros, v=second, t=0, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(model: ModelParams, grads: dict[str, np.ndarray], state: AdamState,
              lr: float):
    """One bias-corrected Adam step; returns (new model, new state)."""
    if lr <= 0:
        raise ConfigurationError(f"learning rate must be positive, got {lr}")
    if set(grads) != set(model.names):
        raise ContractError("gradient keys do not match model layers")
    t = state.t + 1
    corr1 = 1.0 - state.beta1 ** t
    corr2 = 1.0 - state.beta2 ** t
    new_m, new_v, new_values = {}, {}, {}
    for name, theta in model.as_dict().items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != theta.shape:
            raise ContractError(f"gradient for {name!r} has shape {g.shape}, expected {theta.shape}")
        m = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        m_hat = m / corr1
        v_hat = v / corr2
        new_values[name] = theta - lr * m_hat / (np.sqrt(v_hat) + state.eps)
        new_m[name] = _frozen_array(m)
        new_v[name] = _frozen_array(v)
    new_model = model.with_values(new_values)
    new_state = AdamState(m=new_m, v=new_v, t=t, beta1=state.beta1,
                          beta2=state.beta2, eps=state.eps)
    return new_model, new_state


def relative_change_from_adam(state: AdamState, pre_step_model: ModelParams,
                              lr: float) -> dict[str, float]:
    """Per-layer mean relative parameter change of the step just applied.

    Reconstructs |step| = lr*|m_hat|/(sqrt(v_hat)+eps) from the moments and
    divides by |theta_pre| + EPS_GUARD entrywise, so the result equals a
    direct before/after measurement without having to snapshot the weights.
    """
    if state.t < 1:
        raise ContractError("relative change requested before any Adam step")
    corr1 = 1.0 - state.beta1 ** state.t
    corr2 = 1.0 - state.beta2 ** state.t
    rates = {}
    for name, theta in pre_step_model.as_dict().items():
        m_hat = state.m[name] / corr1
        v_hat = state.v[name] / corr2
        step = lr * np.abs(m_hat) / (np.sqrt(v_hat) + state.eps)
        rates[name] = float(np.mean(step / (np.abs(theta) + EPS_GUARD)))
    return rates
