"""Cluster FedAvg and the portfolio-modulated adaptive global update.

Each cluster is treated as an asset: its weighted return and the covariance
of member return histories yield a risk-adjusted coefficient. A positive
coefficient inflates the momentum retention of that cluster's slice of the
global update, damping risky rounds while leaving good rounds untouched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ContractError
from .tensorcore import ModelParams

History = list[tuple[int, float]]  # (round, return) pairs, rounds ascending


def fedavg(models: list[ModelParams], weights) -> ModelParams:
    """Entrywise weighted average with weights renormalized over the list."""
    if not models:
        raise ContractError("fedavg needs at least one model")
    if len(models) != len(weights):
        raise ContractError("models and weights must align")
    ref = models[0]
    for other in models[1:]:
        if not ref.compatible_with(other):
            raise ContractError("models are not aggregation-compatible")
    raw = np.asarray(weights, dtype=np.float64)
    if (raw < 0).any() or raw.sum() <= 0:
        raise ContractError("weights must be nonnegative with a positive sum")
    norm = raw / raw.sum()
    out = {}
    for name in ref.names:
        acc = norm[0] * models[0].get(name)
        for w, model in zip(norm[1:], models[1:]):
            acc = acc + w * model.get(name)
        out[name] = acc
    return ref.with_values(out)


# ---------------------------------------------------------------------------
# cluster risk


def _deviations_direct(history: History) -> dict[int, float]:
    """Return deviation from the client's own prior-mean return, per round.

    Reference path: the prior mean is re-averaged from scratch for every
    element (an empty prior counts as mean 0).
    """
    devs = {}
    for idx, (round_idx, ret) in enumerate(history):
        prior = [r for _, r in history[:idx]]
        mean_prior = sum(prior) / len(prior) if prior else 0.0
        devs[round_idx] = ret - mean_prior
    return devs


def _deviations_prefix(history: History) -> dict[int, float]:
    """Same deviations via a running prefix sum (no re-averaging)."""
    devs = {}
    prefix = 0.0
    for idx, (round_idx, ret) in enumerate(history):
        mean_prior = prefix / idx if idx else 0.0
        devs[round_idx] = ret - mean_prior
        prefix += ret
    return devs


def _risk_from_deviations(devs: list[dict[int, float]], weights) -> float:
    total = 0.0
    n = len(devs)
    for i in range(n):
        for j in range(n):
            common = sorted(set(devs[i]) & set(devs[j]))
            if len(common) < 2:
                continue
            cov = sum(devs[i][r] * devs[j][r] for r in common) / (len(common) - 1)
            total += weights[i] * weights[j] * cov
    return total


def cluster_risk(histories: list[History], weights, rounds_so_far: int | None = None) -> float:
    """Weighted quadratic form of the inter-client return covariance.

    Covariance pairs use the rounds where both clients have returns; a pair
    with fewer than two shared rounds contributes zero, as does a call before
    two rounds exist at all.
    """
    if len(histories) != len(weights):
        raise ContractError("histories and weights must align")
    if rounds_so_far is not None and rounds_so_far < 2:
        return 0.0
    return _risk_from_deviations([_deviations_direct(h) for h in histories], weights)


def cluster_risk_fast(histories: list[History], weights, rounds_so_far: int | None = None) -> float:
    """Prefix-sum accelerated path; must track cluster_risk within 1e-10."""
    if len(histories) != len(weights):
        raise ContractError("histories and weights must align")
    if rounds_so_far is not None and rounds_so_far < 2:
        return 0.0
    return _risk_from_deviations([_deviations_prefix(h) for h in histories], weights)


def rarc(risk: float, ret: float, risk_lambda: float) -> float:
    """Risk-adjusted return coefficient: lambda*risk - (1-lambda)*return."""
    if not 0.0 <= risk_lambda <= 1.0:
        raise ConfigurationError(f"risk lambda must lie in [0, 1], got {risk_lambda}")
    return risk_lambda * risk - (1.0 - risk_lambda) * ret


def dynamic_beta(beta: float, gamma: float, tau_smooth: float) -> float:
    """Momentum retention lifted by tanh(relu(gamma))/tau; capped below 1."""
    if not 0.0 <= beta < 1.0:
        raise ConfigurationError(f"beta must lie in [0, 1), got {beta}")
    if tau_smooth <= 0:
        raise ConfigurationError(f"tau_smooth must be positive, got {tau_smooth}")
    if beta + 1.0 / tau_smooth > 1.0:
        raise ConfigurationError(
            f"beta + 1/tau_smooth must not exceed 1 (got {beta} + 1/{tau_smooth})"
        )
    # tanh saturates to exactly 1.0 in floats; clamp to keep beta* strictly
    # inside [beta, beta + 1/tau_smooth).
    cap = beta + 1.0 / tau_smooth
    value = beta + math.tanh(max(gamma, 0.0)) / tau_smooth
    return min(value, math.nextafter(cap, beta))


# ---------------------------------------------------------------------------
# global update


@dataclass
class GlobalOptState:
    """Per-cluster momentum and accumulated squared-change estimates."""

    beta: float
    eta: float
    tau_adapt: float
    tau_smooth: float
    momentum: dict[int, dict[str, np.ndarray]]
    accum_sq: dict[int, dict[str, np.ndarray]]
    pooled: bool = False

    @classmethod
    def initial(cls, beta: float, eta: float, tau_adapt: float, tau_smooth: float,
                pooled: bool = False) -> "GlobalOptState":
        dynamic_beta(beta, 0.0, tau_smooth)  # validates the constants
        if eta <= 0:
            raise ConfigurationError(f"global learning rate must be positive, got {eta}")
        if tau_adapt <= 0:
            raise ConfigurationError(f"tau_adapt must be positive, got {tau_adapt}")
        return cls(beta=beta, eta=eta, tau_adapt=tau_adapt, tau_smooth=tau_smooth,
                   momentum={}, accum_sq={}, pooled=pooled)

    def _slot(self, key: int, template: ModelParams):
        if key not in self.momentum:
            self.momentum[key] = {n: np.zeros_like(v) for n, v in template.as_dict().items()}
            self.accum_sq[key] = {n: np.zeros_like(v) for n, v in template.as_dict().items()}
        return self.momentum[key], self.accum_sq[key]


def global_aggregate(state: GlobalOptState, global_model: ModelParams,
                     cluster_models: list[ModelParams], cluster_weights,
                     gammas, sequential: bool = False):
    """Adaptive server update driven by per-cluster risk coefficients.

    For each cluster: delta = w_m * (cluster - global); momentum blends with
    the dynamic beta for that cluster's gamma; squared deltas accumulate; the
    global model moves by eta * momentum / (sqrt(accum) + tau_adapt), summed
    over clusters (or applied cluster-by-cluster when sequential=True).

    Returns (new_global, state, per-cluster beta* list). The state is mutated
    in place.
    """
    m = len(cluster_models)
    if len(cluster_weights) != m or len(gammas) != m:
        raise ContractError("cluster models, weights and gammas must align")
    weights = np.asarray(cluster_weights, dtype=np.float64)
    if abs(weights.sum() - 1.0) > 1e-6:
        raise ContractError(f"cluster weights must sum to 1, got {weights.sum()}")
    for model in cluster_models:
        if not global_model.compatible_with(model):
            raise ContractError("cluster model incompatible with the global model")

    if state.pooled:
        return _pooled_aggregate(state, global_model, cluster_models, weights, gammas)

    betas = []
    current = global_model.as_dict()
    summed = None if sequential else {n: np.zeros_like(v) for n, v in current.items()}
    for idx in range(m):
        beta_star = dynamic_beta(state.beta, gammas[idx], state.tau_smooth)
        betas.append(beta_star)
        mtn, acc = state._slot(idx, global_model)
        theta_m = cluster_models[idx].as_dict()
        for name in current:
            delta = weights[idx] * (theta_m[name] - current[name])
            mtn[name] = beta_star * mtn[name] + (1.0 - beta_star) * delta
            acc[name] = acc[name] + delta * delta
            term = mtn[name] / (np.sqrt(acc[name]) + state.tau_adapt)
            if sequential:
                current[name] = current[name] + state.eta * term
            else:
                summed[name] += term
    if not sequential:
        current = {n: current[n] + state.eta * summed[n] for n in current}
    return global_model.with_values(current), state, betas


def _pooled_aggregate(state, global_model, cluster_models, weights, gammas):
    # Ablation mode: one momentum/accumulator pair shared by all clusters,
    # driven by the weight-averaged gamma.
    gamma_eff = float(np.dot(weights, np.asarray(gammas, dtype=np.float64)))
    beta_star = dynamic_beta(state.beta, gamma_eff, state.tau_smooth)
    mtn, acc = state._slot(-1, global_model)
    current = global_model.as_dict()
    out = {}
    for name in current:
        delta = sum(w * (model.get(name) - current[name])
                    for w, model in zip(weights, cluster_models))
        mtn[name] = beta_star * mtn[name] + (1.0 - beta_star) * delta
        acc[name] = acc[name] + delta * delta
        out[name] = current[name] + state.eta * mtn[name] / (np.sqrt(acc[name]) + state.tau_adapt)
    return global_model.with_values(out), state, [beta_star] * len(cluster_models)
