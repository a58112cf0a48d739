"""Poverty-parameter tracking, identification, and in-cluster substitution.

A layer is considered impoverished when it shows the largest mean relative
change on batches that follow a missing-modality batch with complete data.
Clients whose whole round saw no such transitions act as donors and their
matching layer replaces the poverty layer, weighted by dataset size.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .tensorcore import ModelParams

logger = logging.getLogger(__name__)


class ChangeTracker:
    """Accumulates per-layer change rates over one epoch's qualifying batches.

    A batch qualifies when it carries complete modality data and the batch
    immediately before it (in this epoch) carried missing data. The previous
    flag starts clear, so the first batch of an epoch never qualifies.
    """

    def __init__(self, layer_names):
        self.sums = {name: 0.0 for name in layer_names}
        self.count = 0
        self._prev_missing = False

    def observe(self, batch_missing: bool, rates: dict[str, float]):
        missing_keys = set(self.sums) - set(rates)
        if missing_keys:
            raise ContractError(f"change rates missing layers {sorted(missing_keys)}")
        if self._prev_missing and not batch_missing:
            for name in self.sums:
                self.sums[name] += rates[name]
            self.count += 1
        self._prev_missing = batch_missing

    def epoch_means(self) -> dict[str, float] | None:
        """Mean rate per layer over the qualifying batches; None if none seen."""
        if self.count == 0:
            return None
        return {name: total / self.count for name, total in self.sums.items()}


@dataclass(frozen=True)
class PovertyReport:
    """Outcome of one client's round; layer is None when the client is a donor."""

    client_id: int
    round_idx: int
    layer: str | None
    rates: dict[str, float]


def poverty_layer(trackers) -> str | None:
    """Argmax layer of the mean change rate across epochs with observations.

    Returns None when no epoch saw a qualifying batch (donor client). Exact
    ties break toward the lexicographically first layer name.
    """
    per_epoch = [t.epoch_means() for t in trackers]
    per_epoch = [m for m in per_epoch if m is not None]
    if not per_epoch:
        return None
    names = sorted(per_epoch[0])
    averaged = {n: float(np.mean([m[n] for m in per_epoch])) for n in names}
    best = names[0]
    for name in names[1:]:  # strict > keeps the lexicographically first on ties
        if averaged[name] > averaged[best]:
            best = name
    return best


def mean_rates(trackers) -> dict[str, float]:
    """Cross-epoch mean change rates for reporting; empty if nothing observed."""
    per_epoch = [m for m in (t.epoch_means() for t in trackers) if m is not None]
    if not per_epoch:
        return {}
    return {n: float(np.mean([m[n] for m in per_epoch])) for n in sorted(per_epoch[0])}


def substitute(poverty_clients: list[tuple[ModelParams, str]],
               donors: list[tuple[ModelParams, float]]) -> list[ModelParams]:
    """Replace each poverty layer with the donors' weighted average of it.

    Donor weights renormalize to sum 1; every other layer is left untouched.
    With no donors the substitution is skipped and the models pass through.
    """
    if not poverty_clients:
        return []
    if not donors:
        logger.warning("substitution skipped: no donors available in cluster")
        return [model for model, _ in poverty_clients]
    ref = poverty_clients[0][0]
    for model, _ in poverty_clients[1:]:
        if not ref.compatible_with(model):
            raise ContractError("poverty client models are not aggregation-compatible")
    for model, _ in donors:
        if not ref.compatible_with(model):
            raise ContractError("donor models are not aggregation-compatible")
    raw = np.array([w for _, w in donors], dtype=np.float64)
    if (raw < 0).any() or raw.sum() <= 0:
        raise ContractError("donor weights must be nonnegative with a positive sum")
    weights = raw / raw.sum()

    blended: dict[str, np.ndarray] = {}
    updated = []
    for model, layer in poverty_clients:
        if layer not in blended:
            blended[layer] = sum(w * donor.get(layer) for (donor, _), w in zip(donors, weights))
        updated.append(model.with_values({layer: blended[layer]}))
    return updated
