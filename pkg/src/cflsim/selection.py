"""Core-member accounting and temperature-softmax client selection.

A selected client is a core member of its round when removing its term flips
the cluster's weighted return below the success threshold. Core counts and
selection counts then drive a softmax over phi/T ratios that biases future
selection toward historically pivotal clients.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ContractError


@dataclass
class ClientStats:
    selected: int = 0          # T(i)
    core: int = 0              # phi(i)
    last_metric: float = 0.0   # metric from the most recent selected round
    history: list[tuple[int, float]] = field(default_factory=list)  # (round, return)


class SelectionLedger:
    """Per-client counters and return histories, mutated between rounds only."""

    def __init__(self, client_ids):
        self.stats = {cid: ClientStats() for cid in client_ids}

    def record_return(self, client_id: int, round_idx: int, ret: float, metric: float):
        stats = self.stats[client_id]
        stats.history.append((round_idx, ret))
        stats.last_metric = metric

    def update_counters(self, selected, core):
        selected = set(selected)
        core = set(core)
        if not core <= selected:
            raise ContractError("core members must be a subset of the selected set")
        for cid in selected:
            self.stats[cid].selected += 1
        for cid in core:
            self.stats[cid].core += 1

    def snapshot(self) -> dict[int, tuple[int, int]]:
        return {cid: (s.selected, s.core) for cid, s in sorted(self.stats.items())}


def client_return(metric_now: float, metric_prev: float) -> float:
    return metric_now - metric_prev


def coalition_return(weights, returns) -> float:
    if len(weights) != len(returns):
        raise ContractError("weights and returns must align")
    return float(sum(w * r for w, r in zip(weights, returns)))


def identify_core_members(subset, weights, returns, threshold: float) -> set:
    """Swing check: i is core iff the coalition passes but loses without i.

    The leave-one-out value subtracts i's term from the full sum; weights are
    the fixed global dataset-share weights, never renormalized.
    """
    subset = list(subset)
    if len(weights) != len(subset) or len(returns) != len(subset):
        raise ContractError("subset, weights and returns must align")
    if not subset:
        return set()
    total = coalition_return(weights, returns)
    if total < threshold:
        return set()
    return {
        cid
        for cid, w, r in zip(subset, weights, returns)
        if total - w * r < threshold
    }


def selection_probabilities(ledger: SelectionLedger, members, tau: float) -> np.ndarray:
    """Softmax over tau * phi(i)/T(i); the ratio counts as 0 until first selection."""
    if tau <= 0:
        raise ConfigurationError(f"selection temperature must be positive, got {tau}")
    members = list(members)
    if not members:
        raise ContractError("cannot compute probabilities for an empty cluster")
    ratios = np.array([
        ledger.stats[cid].core / ledger.stats[cid].selected
        if ledger.stats[cid].selected > 0 else 0.0
        for cid in members
    ])
    logits = tau * ratios
    logits -= logits.max()
    exp = np.exp(logits)
    return exp / exp.sum()


def sample_clients(members, probabilities, count: int, rng: np.random.Generator) -> list[int]:
    """Sequential weighted sampling without replacement, renormalizing each draw."""
    members = list(members)
    if count <= 0:
        raise ConfigurationError(f"selection count must be positive, got {count}")
    if count > len(members):
        raise ConfigurationError(f"selection count {count} exceeds cluster size {len(members)}")
    probs = np.asarray(probabilities, dtype=np.float64).copy()
    if probs.shape != (len(members),):
        raise ContractError("probability vector must align with members")
    chosen = []
    available = list(range(len(members)))
    for _ in range(count):
        p = probs[available]
        total = p.sum()
        p = np.full(len(available), 1.0 / len(available)) if total <= 0 else p / total
        pick = int(rng.choice(len(available), p=p))
        chosen.append(members[available[pick]])
        available.pop(pick)
    return chosen
