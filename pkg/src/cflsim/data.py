"""Synthetic two-modality data, non-IID partitioning, and missing injection.

The pool is a Gaussian mixture: each class owns one prototype per modality and
samples scatter around it. Clients receive Dirichlet-skewed shards, a fixed
fraction of clients is designated to carry missing modalities, and batches
zero-fill the dropped modality vector at the input.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigurationError, ContractError
from .tensorcore import Batch

logger = logging.getLogger(__name__)

# Per-sample modality mask values.
COMPLETE = 0
MISSING_A = 1
MISSING_B = 2

# Bound on proportion-resampling attempts before giving up on a partition.
MAX_PARTITION_TRIES = 2000


@dataclass(frozen=True)
class PartitionSpec:
    """Everything needed to build the federated dataset from seeds."""

    clients: int
    classes: int
    dim_a: int
    dim_b: int
    samples_per_class: int
    beta_diri: float = 0.5
    mm: float = 0.0
    mc: float = 0.0
    noise: float = 1.0
    proto_scale: float = 2.0
    feature_shift: float = 0.0
    min_samples: int = 20
    global_test_frac: float = 0.10
    local_test_frac: float = 0.20
    dynamic_missing: bool = False
    seed: int = 0

    def __post_init__(self):
        problems = []
        if self.clients < 1:
            problems.append("clients must be >= 1")
        for name in ("classes", "dim_a", "dim_b", "samples_per_class"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        for name in ("mm", "mc"):
            val = getattr(self, name)
            if not 0.0 <= val <= 1.0:
                problems.append(f"{name} must lie in [0, 1], got {val}")
        if self.beta_diri <= 0:
            problems.append("beta_diri must be positive")
        if self.noise < 0:
            problems.append("noise must be nonnegative")
        if problems:
            raise ConfigurationError("; ".join(problems))


@dataclass(frozen=True)
class SamplePool:
    """Column-major sample storage: one row per sample in each array."""

    x_a: np.ndarray
    x_b: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, idx: np.ndarray) -> "SamplePool":
        return SamplePool(self.x_a[idx], self.x_b[idx], self.labels[idx])


@dataclass
class ClientDataset:
    """One client's shard: raw train/test samples plus the missing mask."""

    client_id: int
    train: SamplePool
    test: SamplePool
    missing_designated: bool = False
    missing_idx: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    missing_mask: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def n_train(self) -> int:
        return len(self.train)


def gen_synthetic(spec: PartitionSpec) -> SamplePool:
    """Class-prototype Gaussian mixture; deterministic in the spec's seed.

    Prototypes center on feature_shift rather than zero so that the zero
    vector used to fill a dropped modality sits off the data manifold, the
    way it does for real pretrained-embedding features.
    """
    rng = np.random.default_rng([spec.seed, 0])
    proto_a = spec.feature_shift + rng.normal(0.0, spec.proto_scale, size=(spec.classes, spec.dim_a))
    proto_b = spec.feature_shift + rng.normal(0.0, spec.proto_scale, size=(spec.classes, spec.dim_b))
    xs_a, xs_b, ys = [], [], []
    for c in range(spec.classes):
        n = spec.samples_per_class
        xs_a.append(proto_a[c] + rng.normal(0.0, spec.noise, size=(n, spec.dim_a)))
        xs_b.append(proto_b[c] + rng.normal(0.0, spec.noise, size=(n, spec.dim_b)))
        ys.append(np.full(n, c, dtype=np.int64))
    return SamplePool(np.vstack(xs_a), np.vstack(xs_b), np.concatenate(ys))


def stratified_split(labels: np.ndarray, frac: float, rng: np.random.Generator):
    """Return (held_out_idx, remaining_idx) taking ~frac of every class."""
    held, kept = [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = rng.permutation(idx)
        cut = int(round(frac * len(idx)))
        held.append(idx[:cut])
        kept.append(idx[cut:])
    return np.sort(np.concatenate(held)), np.sort(np.concatenate(kept))


def dirichlet_partition(labels: np.ndarray, clients: int, beta_diri: float,
                        seed, min_samples: int = 1) -> list[np.ndarray]:
    """Per-class Dirichlet split of sample indices across clients.

    Proportions are redrawn until every client holds at least min_samples;
    the union of the returned index arrays is exactly the input, disjoint.
    """
    n = len(labels)
    if n == 0:
        raise ContractError("cannot partition an empty pool")
    if clients < 1:
        raise ConfigurationError("clients must be >= 1")
    if clients * min_samples > n:
        raise ConfigurationError(
            f"{clients} clients x {min_samples} min samples exceeds pool of {n}"
        )
    rng = np.random.default_rng(seed)
    if clients == 1:
        return [np.arange(n)]
    class_idx = [rng.permutation(np.flatnonzero(labels == c)) for c in np.unique(labels)]
    for attempt in range(MAX_PARTITION_TRIES):
        shards = [[] for _ in range(clients)]
        for idx in class_idx:
            props = rng.dirichlet(np.full(clients, beta_diri))
            cuts = (np.cumsum(props) * len(idx)).astype(int)[:-1]
            for k, chunk in enumerate(np.split(idx, cuts)):
                shards[k].append(chunk)
        sizes = [sum(len(c) for c in chunks) for chunks in shards]
        if min(sizes) >= min_samples:
            if attempt:
                logger.debug("partition accepted after %d redraws", attempt)
            return [np.sort(np.concatenate(chunks)) for chunks in shards]
    raise ConfigurationError(
        f"could not satisfy min_samples={min_samples} for {clients} clients "
        f"after {MAX_PARTITION_TRIES} proportion redraws"
    )


def designate_missing(clients: list[ClientDataset], mm: float, mc: float, seed,
                      dynamic: bool = False) -> list[ClientDataset]:
    """Mark exactly round(mc*K) clients and fix their missing sample sets.

    Each designated client gets round(mm * n_train) missing train samples;
    every missing sample drops modality A or B with a fair coin. In dynamic
    mode all clients receive a mask set and activation is decided per round
    by the caller instead.
    """
    if not 0.0 <= mm <= 1.0 or not 0.0 <= mc <= 1.0:
        raise ConfigurationError(f"mm and mc must lie in [0, 1], got mm={mm} mc={mc}")
    rng = np.random.default_rng(seed)
    k = len(clients)
    if dynamic:
        chosen = set(range(k))
    else:
        count = int(round(mc * k))
        chosen = set(rng.choice(k, size=count, replace=False).tolist()) if count else set()
    out = []
    for pos, client in enumerate(clients):
        if pos not in chosen or mm == 0.0:
            out.append(replace(client, missing_designated=False,
                               missing_idx=np.zeros(0, dtype=np.int64),
                               missing_mask=np.full(client.n_train, COMPLETE, dtype=np.int64)))
            continue
        n_missing = int(round(mm * client.n_train))
        idx = np.sort(rng.choice(client.n_train, size=n_missing, replace=False))
        mask = np.full(client.n_train, COMPLETE, dtype=np.int64)
        mask[idx] = np.where(rng.random(n_missing) < 0.5, MISSING_A, MISSING_B)
        out.append(replace(client, missing_designated=True, missing_idx=idx,
                           missing_mask=mask))
    return out


def batch_iter(client: ClientDataset, subset_size: int, batch_size: int,
               round_idx: int, seed: int, epoch: int = 0,
               mask_active: bool | None = None):
    """Yield one epoch of batches over the client's per-round subset.

    The subset is drawn once per (seed, client, round); the shuffle order
    additionally varies with the epoch. Masked samples have the dropped
    modality zero-filled and flag the whole batch as has_missing.
    """
    if client.n_train == 0:
        raise ContractError(f"client {client.client_id} has no training data")
    if batch_size < 1:
        raise ConfigurationError(f"batch_size must be >= 1, got {batch_size}")
    if subset_size < 1:
        raise ConfigurationError(f"subset_size must be >= 1, got {subset_size}")
    if mask_active is None:
        mask_active = client.missing_designated

    take = min(subset_size, client.n_train)
    subset_rng = np.random.default_rng([seed, client.client_id, round_idx])
    subset = subset_rng.choice(client.n_train, size=take, replace=False)
    order_rng = np.random.default_rng([seed, client.client_id, round_idx, epoch])
    order = subset[order_rng.permutation(take)]

    full_mask = client.missing_mask if mask_active else np.full(client.n_train, COMPLETE, dtype=np.int64)
    for start in range(0, take, batch_size):
        chunk = order[start:start + batch_size]
        mask = full_mask[chunk]
        x_a = client.train.x_a[chunk].copy()
        x_b = client.train.x_b[chunk].copy()
        x_a[mask == MISSING_A] = 0.0
        x_b[mask == MISSING_B] = 0.0
        yield Batch(x_a=x_a, x_b=x_b, labels=client.train.labels[chunk],
                    has_missing=bool((mask != COMPLETE).any()), mask=mask)


@dataclass(frozen=True)
class FederatedData:
    """Built datasets: per-client shards plus the held-out global test set."""

    clients: list[ClientDataset]
    global_test: SamplePool
    classes: int
    dim_a: int
    dim_b: int

    @property
    def total_train(self) -> int:
        return sum(c.n_train for c in self.clients)

    def client_weights(self) -> dict[int, float]:
        total = self.total_train
        return {c.client_id: c.n_train / total for c in self.clients}


def build_federated_data(spec: PartitionSpec) -> FederatedData:
    """Full pipeline: generate, hold out global test, partition, split, mask."""
    pool = gen_synthetic(spec)
    rng = np.random.default_rng([spec.seed, 1])
    test_idx, rest_idx = stratified_split(pool.labels, spec.global_test_frac, rng)
    global_test = pool.take(test_idx)
    remaining = pool.take(rest_idx)

    shards = dirichlet_partition(remaining.labels, spec.clients, spec.beta_diri,
                                 [spec.seed, 2], min_samples=spec.min_samples)
    clients = []
    for cid, shard in enumerate(shards):
        shard_pool = remaining.take(shard)
        local_rng = np.random.default_rng([spec.seed, 3, cid])
        t_idx, tr_idx = stratified_split(shard_pool.labels, spec.local_test_frac, local_rng)
        clients.append(ClientDataset(client_id=cid,
                                     train=shard_pool.take(tr_idx),
                                     test=shard_pool.take(t_idx)))
    clients = designate_missing(clients, spec.mm, spec.mc, [spec.seed, 4],
                                dynamic=spec.dynamic_missing)
    return FederatedData(clients=clients, global_test=global_test,
                         classes=spec.classes, dim_a=spec.dim_a, dim_b=spec.dim_b)


def concat_pools(pools: list[SamplePool]) -> SamplePool:
    return SamplePool(
        np.vstack([p.x_a for p in pools]),
        np.vstack([p.x_b for p in pools]),
        np.concatenate([p.labels for p in pools]),
    )


# ---------------------------------------------------------------------------
# Columnar text export for reproducibility audits.
#
# Line 1:  <d_a> <d_b> <classes>
# Rows:    <label> <x_a ...> <x_b ...> <mask>
# Floats use repr() so a round trip is bit-exact.


def export_samples(path, pool: SamplePool, mask: np.ndarray,
                   dim_a: int, dim_b: int, classes: int):
    if len(mask) != len(pool):
        raise ContractError("mask length does not match sample count")
    with open(path, "w") as fh:
        fh.write(f"{dim_a} {dim_b} {classes}\n")
        for i in range(len(pool)):
            cols = [str(int(pool.labels[i]))]
            cols += [repr(float(v)) for v in pool.x_a[i]]
            cols += [repr(float(v)) for v in pool.x_b[i]]
            cols.append(str(int(mask[i])))
            fh.write(" ".join(cols) + "\n")


def import_samples(path):
    """Inverse of export_samples; returns (pool, mask, (d_a, d_b, classes))."""
    with open(path) as fh:
        header = fh.readline().split()
        if len(header) != 3:
            raise ContractError(f"malformed header in {path}")
        dim_a, dim_b, classes = (int(v) for v in header)
        labels, xs_a, xs_b, masks = [], [], [], []
        for line in fh:
            parts = line.split()
            if len(parts) != 2 + dim_a + dim_b:
                raise ContractError(f"malformed row in {path}")
            labels.append(int(parts[0]))
            xs_a.append([float(v) for v in parts[1:1 + dim_a]])
            xs_b.append([float(v) for v in parts[1 + dim_a:1 + dim_a + dim_b]])
            masks.append(int(parts[-1]))
    pool = SamplePool(np.array(xs_a, dtype=np.float64).reshape(len(labels), dim_a),
                      np.array(xs_b, dtype=np.float64).reshape(len(labels), dim_b),
                      np.array(labels, dtype=np.int64))
    return pool, np.array(masks, dtype=np.int64), (dim_a, dim_b, classes)
