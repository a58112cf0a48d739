"""Round-by-round simulation driver for all three algorithms.

Protocol per round: select clients in each cluster, train them locally from
the cluster model with change tracking, substitute poverty layers from
donors, FedAvg within clusters, account returns and core members, score each
cluster's risk, and fold the cluster models into the global model. Baselines
(fedavg, fedadagrad) run the identical harness with a single cluster and the
three modules disabled.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import aggregation, clustering, pps, selection
from .aggregation import GlobalOptState
from .clustering import ClusterAssignment
from .config import SimConfig, validate
from .data import FederatedData, SamplePool, batch_iter, build_federated_data, concat_pools
from .errors import ContractError
from .selection import SelectionLedger
from .tensorcore import (
    AdamState,
    ModelParams,
    adam_step,
    forward_logits,
    forward_loss_grad,
    init_model,
    relative_change_from_adam,
)

logger = logging.getLogger(__name__)


@dataclass
class MetricsRecord:
    """One row of the metrics stream; wall_time stays out of serialized form."""

    round_idx: int
    global_acc: float
    global_f1: float
    personalized_acc: float
    personalized_f1: float
    clusters: list[dict]
    selected: list[int]
    poverty: list[dict]
    ledger: dict[int, tuple[int, int]]
    train_samples: int
    wall_time: float = 0.0

    def to_json_dict(self) -> dict:
        return {
            "v": 1,
            "round": self.round_idx,
            "global_acc": self.global_acc,
            "global_f1": self.global_f1,
            "personalized_acc": self.personalized_acc,
            "personalized_f1": self.personalized_f1,
            "clusters": self.clusters,
            "selected": self.selected,
            "poverty": self.poverty,
            "ledger": {str(cid): list(tp) for cid, tp in self.ledger.items()},
            "train_samples": self.train_samples,
        }


@dataclass
class RunResult:
    config: SimConfig
    records: list[MetricsRecord]
    global_model: ModelParams
    client_models: dict[int, ModelParams]
    assignment: ClusterAssignment

    def metric_series(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])


# ---------------------------------------------------------------------------
# evaluation


def macro_f1(y_true: np.ndarray, y_pred: np.ndarray, classes: int) -> float:
    """Mean per-class F1 over all classes; empty classes contribute zero."""
    scores = []
    for c in range(classes):
        tp = int(((y_pred == c) & (y_true == c)).sum())
        fp = int(((y_pred == c) & (y_true != c)).sum())
        fn = int(((y_pred != c) & (y_true == c)).sum())
        denom = 2 * tp + fp + fn
        scores.append(0.0 if denom == 0 else 2 * tp / denom)
    return float(np.mean(scores))


def evaluate_model(model: ModelParams, pool: SamplePool, classes: int,
                   activation: str = "tanh") -> tuple[float, float]:
    """(accuracy, macro-F1) of the model on a complete-modality pool."""
    if len(pool) == 0:
        raise ContractError("cannot evaluate on an empty pool")
    logits = forward_logits(model, pool.x_a, pool.x_b, activation)
    pred = logits.argmax(axis=1)
    acc = float((pred == pool.labels).mean())
    return acc, macro_f1(pool.labels, pred, classes)


def evaluate_global(model: ModelParams, global_test: SamplePool, classes: int,
                    activation: str = "tanh") -> tuple[float, float]:
    return evaluate_model(model, global_test, classes, activation)


def evaluate_personalized(models, weights, pools, classes: int,
                          activation: str = "tanh") -> tuple[float, float]:
    """Dataset-share weighted average of per-client (accuracy, macro-F1)."""
    if not (len(models) == len(weights) == len(pools)):
        raise ContractError("models, weights and pools must align")
    total_w = float(sum(weights))
    acc = f1 = 0.0
    for model, w, pool in zip(models, weights, pools):
        a, f = evaluate_model(model, pool, classes, activation)
        acc += w * a
        f1 += w * f
    return acc / total_w, f1 / total_w


# ---------------------------------------------------------------------------
# local training


def train_local(model: ModelParams, dataset, config: SimConfig, round_idx: int,
                track_changes: bool, mask_active: bool | None):
    """Run local epochs over the per-round subset.

    Returns (model, trackers, saw_missing, samples_consumed); saw_missing is
    True when any batch of the round carried missing-modality data, which
    disqualifies the client from donating layers.
    """
    state = AdamState.initial(model)
    trackers = []
    saw_missing = False
    consumed = 0
    for epoch in range(config.local_epochs):
        tracker = pps.ChangeTracker(model.names) if track_changes else None
        for batch in batch_iter(dataset, config.subset_size, config.batch_size,
                                round_idx, config.seed_data, epoch=epoch,
                                mask_active=mask_active):
            _, grads, _ = forward_loss_grad(model, batch, config.model_activation)
            new_model, state = adam_step(model, grads, state, config.client_lr)
            if tracker is not None:
                rates = relative_change_from_adam(state, model, config.client_lr)
                tracker.observe(batch.has_missing, rates)
            model = new_model
            saw_missing = saw_missing or batch.has_missing
            if epoch == 0:
                consumed += len(batch)
        if tracker is not None:
            trackers.append(tracker)
    return model, trackers, saw_missing, consumed


# ---------------------------------------------------------------------------
# simulation


def _cluster_clients(fed: FederatedData, config: SimConfig) -> ClusterAssignment:
    ids = [c.client_id for c in fed.clients]
    if config.algorithm != "mmic" or len(ids) == 1:
        return ClusterAssignment({cid: 0 for cid in ids}, 1, 0.0)
    if config.cluster_backend == "lsh":
        descriptors = np.array([clustering.build_descriptor(c, fed.classes) for c in fed.clients])
        sweep = config.cluster_sweep or range(2, max(3, min(10, len(ids) // 3) + 1))
        return clustering.select_clustering(ids, "lsh", sweep, descriptors=descriptors,
                                            n_planes=config.cluster_planes,
                                            seed=config.seed_clustering)
    matrices = [clustering.client_matrix(c) for c in fed.clients]
    dist = clustering.pairwise_subspace_distances(matrices, config.cluster_svd_rank)
    if config.cluster_sweep:
        sweep = config.cluster_sweep
    else:
        off_diag = dist[np.triu_indices(len(ids), 1)]
        sweep = np.quantile(off_diag, np.linspace(0.1, 0.9, 9))
    return clustering.select_clustering(ids, "svd", sweep, dist_matrix=dist,
                                        seed=config.seed_clustering)


def _dynamic_mask_active(dataset, config: SimConfig, round_idx: int) -> bool | None:
    if not config.data_dynamic_missing:
        return None  # static designation decides
    if not dataset.missing_designated:
        return False
    rng = np.random.default_rng([config.seed_data, 91, round_idx, dataset.client_id])
    return bool(rng.random() < config.data_mc)


def run_simulation(config: SimConfig, prebuilt: FederatedData | None = None,
                   on_record=None) -> RunResult:
    """Execute the configured run; deterministic given the config's seeds."""
    validate(config)
    fed = prebuilt if prebuilt is not None else build_federated_data(config.partition_spec())
    by_id = {c.client_id: c for c in fed.clients}
    weights_global = fed.client_weights()

    assignment = _cluster_clients(fed, config)
    members = assignment.members()
    logger.info("%s: %d clusters (scv=%.4f) over %d clients", config.algorithm,
                assignment.n_clusters, assignment.scv, len(fed.clients))

    cluster_weights = [
        sum(weights_global[cid] for cid in group) for group in members
    ]
    cluster_tests = [concat_pools([by_id[cid].test for cid in group]) for group in members]

    init = init_model(config.model_spec(), config.seed_model)
    global_model = init
    cluster_models: list[ModelParams] = [init] * assignment.n_clusters
    client_models: dict[int, ModelParams] = {cid: init for cid in by_id}

    ledger = SelectionLedger(list(by_id))
    opt_state = GlobalOptState.initial(config.beta, config.server_lr, config.tau_adapt,
                                       config.tau_smooth, pooled=config.pooled_server_state)
    cluster_return_history: list[list[float]] = [[] for _ in range(assignment.n_clusters)]

    is_mmic = config.algorithm == "mmic"
    use_pps = is_mmic and config.pps
    use_bpi = is_mmic and config.bpi
    # The portfolio modulation applies to any adaptive server update; on the
    # fedadagrad baseline it yields the MPO-only variant.
    use_mpo = config.mpo and config.algorithm in ("mmic", "fedadagrad")
    warmup = config.effective_warmup

    records: list[MetricsRecord] = []
    personalized_pools = [by_id[cid].test for cid in sorted(by_id)]
    personalized_weights = [weights_global[cid] for cid in sorted(by_id)]

    for round_idx in range(1, config.rounds + 1):
        tic = time.perf_counter()
        round_selected: list[int] = []
        round_poverty: list[dict] = []
        cluster_stats: list[dict] = []
        gammas: list[float] = []
        consumed_total = 0

        for m, group in enumerate(members):
            banzhaf_active = use_bpi and round_idx > warmup
            if banzhaf_active:
                probs = selection.selection_probabilities(ledger, group, config.tau_select)
            else:
                probs = np.full(len(group), 1.0 / len(group))
            count = max(1, round(config.participation * len(group)))
            rng = np.random.default_rng([config.seed_selection, round_idx, m])
            chosen = sorted(selection.sample_clients(group, probs, count, rng))
            round_selected.extend(chosen)

            # Local training from the current cluster model (lazy sync).
            start = cluster_models[m] if is_mmic else global_model
            reports = {}
            clean_round = {}
            for cid in chosen:
                dataset = by_id[cid]
                mask_active = _dynamic_mask_active(dataset, config, round_idx)
                model, trackers, saw_missing, consumed = train_local(
                    start, dataset, config, round_idx, use_pps, mask_active)
                consumed_total += consumed
                client_models[cid] = model
                clean_round[cid] = not saw_missing
                if use_pps:
                    reports[cid] = pps.poverty_layer(trackers)

            # Poverty substitution: only clients whose whole round was free of
            # missing-modality batches qualify as donors.
            if use_pps:
                poverty_ids = [cid for cid in chosen if reports.get(cid) is not None]
                donor_ids = [cid for cid in chosen if clean_round[cid]]
                if poverty_ids:
                    donors = [(client_models[cid], float(by_id[cid].n_train)) for cid in donor_ids]
                    targets = [(client_models[cid], reports[cid]) for cid in poverty_ids]
                    updated = pps.substitute(targets, donors)
                    if donor_ids:
                        for cid, model in zip(poverty_ids, updated):
                            client_models[cid] = model
                            round_poverty.append({"client": cid, "layer": reports[cid]})

            cluster_models[m] = aggregation.fedavg(
                [client_models[cid] for cid in chosen],
                [by_id[cid].n_train for cid in chosen],
            )

            # Return accounting, core members, and the cluster's risk score.
            alphas, subset_weights = [], []
            for cid in chosen:
                acc, _ = evaluate_model(client_models[cid], cluster_tests[m],
                                        fed.classes, config.model_activation)
                alpha = selection.client_return(acc, ledger.stats[cid].last_metric)
                ledger.record_return(cid, round_idx, alpha, acc)
                alphas.append(alpha)
                subset_weights.append(weights_global[cid])
            cluster_return = selection.coalition_return(subset_weights, alphas)
            history = cluster_return_history[m]
            if config.core_threshold == "running_mean" and history:
                threshold = float(np.mean(history))
            else:
                threshold = 0.0
            core = selection.identify_core_members(chosen, subset_weights, alphas, threshold)
            ledger.update_counters(chosen, core)
            history.append(cluster_return)

            if use_mpo:
                histories = [ledger.stats[cid].history for cid in chosen]
                risk = aggregation.cluster_risk(histories, subset_weights, round_idx)
                gamma = aggregation.rarc(risk, cluster_return, config.risk_lambda)
            else:
                risk, gamma = 0.0, 0.0
            gammas.append(gamma)
            cluster_stats.append({
                "cluster": m,
                "ret": cluster_return,
                "risk": risk,
                "rarc": gamma,
                "beta_star": aggregation.dynamic_beta(config.beta, gamma, config.tau_smooth),
                "selected": chosen,
                "core": sorted(core),
                "probs": [float(p) for p in probs],
            })

        # Fold cluster models into the global model.
        if config.algorithm == "fedavg":
            global_model = cluster_models[0]
        else:
            global_model, opt_state, betas = aggregation.global_aggregate(
                opt_state, global_model, cluster_models, cluster_weights, gammas,
                sequential=config.sequential_clusters,
            )
            for stat, beta_star in zip(cluster_stats, betas):
                stat["beta_star"] = beta_star

        g_acc, g_f1 = evaluate_global(global_model, fed.global_test, fed.classes,
                                      config.model_activation)
        p_acc, p_f1 = evaluate_personalized(
            [client_models[cid] for cid in sorted(by_id)], personalized_weights,
            personalized_pools, fed.classes, config.model_activation)

        record = MetricsRecord(
            round_idx=round_idx,
            global_acc=g_acc,
            global_f1=g_f1,
            personalized_acc=p_acc,
            personalized_f1=p_f1,
            clusters=cluster_stats,
            selected=sorted(round_selected),
            poverty=round_poverty,
            ledger=ledger.snapshot(),
            train_samples=consumed_total,
            wall_time=time.perf_counter() - tic,
        )
        records.append(record)
        logger.debug("round %d: global_acc=%.4f personalized_acc=%.4f samples=%d",
                     round_idx, g_acc, p_acc, consumed_total)
        if on_record is not None:
            on_record(record)

    return RunResult(config=config, records=records, global_model=global_model,
                     client_models=dict(sorted(client_models.items())),
                     assignment=assignment)
