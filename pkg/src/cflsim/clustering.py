"""One-shot client clustering with silhouette-driven hyperparameter choice.

Two backends: random-hyperplane sign sketches fed to k-means, or pairwise SVD
subspace distances fed to average-linkage hierarchical clustering. The sweep
keeps whichever candidate scores the highest silhouette value.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.cluster.hierarchy import fcluster, linkage
from scipy.spatial.distance import squareform

from .data import ClientDataset
from .errors import ConfigurationError, ContractError, SingleClusterError

logger = logging.getLogger(__name__)


def build_descriptor(client: ClientDataset, classes: int) -> np.ndarray:
    """Client summary vector: class histogram plus per-modality feature means."""
    hist = np.bincount(client.train.labels, minlength=classes) / client.n_train
    return np.concatenate([hist, client.train.x_a.mean(axis=0), client.train.x_b.mean(axis=0)])


def client_matrix(client: ClientDataset) -> np.ndarray:
    """Stacked per-sample feature rows used by the SVD backend."""
    return np.hstack([client.train.x_a, client.train.x_b])


# ---------------------------------------------------------------------------
# LSH sketching


def random_hyperplanes(dim: int, n_planes: int, seed) -> np.ndarray:
    if dim < 1:
        raise ContractError("descriptor dimension must be >= 1")
    if n_planes < 1:
        raise ConfigurationError("n_planes must be >= 1")
    rng = np.random.default_rng(seed)
    planes = rng.normal(size=(n_planes, dim))
    return planes / np.linalg.norm(planes, axis=1, keepdims=True)


def sign_sketch(descriptor: np.ndarray, planes: np.ndarray) -> np.ndarray:
    """Sign vector of the descriptor against given hyperplanes; sign(0) -> +1."""
    descriptor = np.asarray(descriptor, dtype=np.float64)
    if descriptor.size == 0:
        raise ContractError("empty descriptor")
    return np.where(planes @ descriptor >= 0.0, 1.0, -1.0)


def lsh_sketch(descriptor: np.ndarray, n_planes: int, seed) -> np.ndarray:
    descriptor = np.asarray(descriptor, dtype=np.float64)
    return sign_sketch(descriptor, random_hyperplanes(descriptor.size, n_planes, seed))


# ---------------------------------------------------------------------------
# k-means (Lloyd's with k-means++ seeding)


@dataclass(frozen=True)
class KMeansResult:
    labels: np.ndarray
    centers: np.ndarray
    inertia_path: tuple[float, ...]


def _pp_init(points, k, rng):
    centers = [points[rng.integers(len(points))]]
    for _ in range(1, k):
        d2 = np.min([((points - c) ** 2).sum(axis=1) for c in centers], axis=0)
        total = d2.sum()
        if total <= 0.0:
            centers.append(points[rng.integers(len(points))])
            continue
        centers.append(points[rng.choice(len(points), p=d2 / total)])
    return np.array(centers)


def kmeans(points: np.ndarray, k: int, seed, max_iter: int = 100) -> KMeansResult:
    """Deterministic Lloyd's algorithm; empty clusters grab the farthest point."""
    points = np.asarray(points, dtype=np.float64)
    if k <= 0:
        raise ConfigurationError(f"k must be positive, got {k}")
    if k > len(points):
        raise ContractError(f"k={k} exceeds {len(points)} points")
    rng = np.random.default_rng(seed)
    centers = _pp_init(points, k, rng)
    labels = np.zeros(len(points), dtype=np.int64)
    inertias = []
    for _ in range(max_iter):
        d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_labels = d2.argmin(axis=1)
        for _ in range(k):  # reseeding may cascade, but at most k times
            empties = [c for c in range(k) if not (new_labels == c).any()]
            if not empties:
                break
            assigned = d2[np.arange(len(points)), new_labels]
            centers[empties[0]] = points[int(assigned.argmax())]
            d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
            new_labels = d2.argmin(axis=1)
        inertias.append(float(d2[np.arange(len(points)), new_labels].sum()))
        if (new_labels == labels).all() and len(inertias) > 1:
            break
        labels = new_labels
        for c in range(k):
            member = labels == c
            if member.any():
                centers[c] = points[member].mean(axis=0)
    return KMeansResult(labels=labels, centers=centers, inertia_path=tuple(inertias))


# ---------------------------------------------------------------------------
# SVD subspace distance


def svd_subspace_distance(data_i: np.ndarray, data_j: np.ndarray, q: int) -> float:
    """1 - mean squared cosine of principal angles between top-q row spaces."""
    data_i = np.asarray(data_i, dtype=np.float64)
    data_j = np.asarray(data_j, dtype=np.float64)
    if q < 1:
        raise ConfigurationError(f"q must be >= 1, got {q}")
    if len(data_i) < q or len(data_j) < q:
        raise ContractError(f"matrices need at least q={q} rows")

    def top_subspace(x):
        _, s, vh = np.linalg.svd(x, full_matrices=False)
        tol = max(x.shape) * np.finfo(np.float64).eps * (s[0] if len(s) else 0.0)
        return vh, int((s > tol).sum())

    vh_i, rank_i = top_subspace(data_i)
    vh_j, rank_j = top_subspace(data_j)
    q_eff = min(q, rank_i, rank_j, vh_i.shape[0], vh_j.shape[0])
    if q_eff < q:
        warnings.warn(f"rank below q={q}; using q={q_eff}", RuntimeWarning, stacklevel=2)
    if q_eff == 0:
        return 1.0
    cosines = np.linalg.svd(vh_i[:q_eff] @ vh_j[:q_eff].T, compute_uv=False)
    cosines = np.clip(cosines, 0.0, 1.0)
    return float(np.clip(1.0 - np.mean(cosines ** 2), 0.0, 1.0))


def pairwise_subspace_distances(matrices: list[np.ndarray], q: int) -> np.ndarray:
    n = len(matrices)
    dist = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            d = svd_subspace_distance(matrices[i], matrices[j], q)
            dist[i, j] = dist[j, i] = d
    return dist


# ---------------------------------------------------------------------------
# hierarchical clustering


def _validate_distance_matrix(dist: np.ndarray):
    dist = np.asarray(dist, dtype=np.float64)
    if dist.ndim != 2 or dist.shape[0] != dist.shape[1]:
        raise ContractError("distance matrix must be square")
    if np.abs(dist - dist.T).max(initial=0.0) > 1e-12:
        raise ContractError("distance matrix must be symmetric")
    if (dist < 0).any():
        raise ContractError("distance matrix must be nonnegative")
    if np.abs(np.diag(dist)).max(initial=0.0) > 0.0:
        raise ContractError("distance matrix must have a zero diagonal")
    return dist


def hierarchical_cluster(dist: np.ndarray, threshold: float) -> np.ndarray:
    """Average-linkage agglomeration; merging stops above the threshold."""
    dist = _validate_distance_matrix(dist)
    n = len(dist)
    if n == 1:
        return np.zeros(1, dtype=np.int64)
    tree = linkage(squareform(dist, checks=False), method="average")
    raw = fcluster(tree, t=threshold, criterion="distance")
    # Relabel to 0-based ids in first-appearance order for determinism.
    remap = {}
    labels = np.empty(n, dtype=np.int64)
    for i, r in enumerate(raw):
        labels[i] = remap.setdefault(r, len(remap))
    return labels


# ---------------------------------------------------------------------------
# silhouette


def silhouette(points_or_dist: np.ndarray, labels: np.ndarray,
               precomputed: bool = False) -> float:
    """Mean silhouette value; singleton-cluster points contribute zero."""
    labels = np.asarray(labels)
    uniq = np.unique(labels)
    if len(uniq) < 2:
        raise SingleClusterError("silhouette undefined for a single cluster")
    if precomputed:
        dist = _validate_distance_matrix(points_or_dist)
    else:
        pts = np.asarray(points_or_dist, dtype=np.float64)
        if pts.ndim == 1:
            pts = pts[:, None]
        diff = pts[:, None, :] - pts[None, :, :]
        dist = np.sqrt((diff ** 2).sum(axis=2))
    n = len(labels)
    scores = np.zeros(n)
    for i in range(n):
        own = labels == labels[i]
        if own.sum() == 1:
            continue
        a = dist[i, own].sum() / (own.sum() - 1)
        b = min(dist[i, labels == other].mean() for other in uniq if other != labels[i])
        denom = max(a, b)
        scores[i] = 0.0 if denom == 0.0 else (b - a) / denom
    return float(scores.mean())


# ---------------------------------------------------------------------------
# sweep selection


@dataclass(frozen=True)
class ClusterAssignment:
    """Disjoint total cover of the clients plus the winning silhouette."""

    labels: dict[int, int]
    n_clusters: int
    scv: float

    def members(self) -> list[list[int]]:
        groups = [[] for _ in range(self.n_clusters)]
        for cid in sorted(self.labels):
            groups[self.labels[cid]].append(cid)
        return groups


def _canonical(labels: np.ndarray) -> np.ndarray:
    remap = {}
    out = np.empty(len(labels), dtype=np.int64)
    for i, lab in enumerate(labels):
        out[i] = remap.setdefault(int(lab), len(remap))
    return out


def select_clustering(client_ids: list[int], backend: str, sweep, *,
                      descriptors: np.ndarray | None = None,
                      dist_matrix: np.ndarray | None = None,
                      n_planes: int = 32, seed=0) -> ClusterAssignment:
    """Evaluate the hyperparameter sweep and keep the max-silhouette candidate.

    Backend "lsh" runs k-means over sign sketches of the descriptors and
    scores candidates by silhouette in descriptor space; backend "svd" runs
    hierarchical clustering over the given distance matrix and scores on it.
    Ties break toward fewer clusters; if every candidate collapses to one
    cluster the assignment falls back to a single cluster with scv = 0.
    """
    sweep = list(sweep)
    if not sweep:
        raise ConfigurationError("hyperparameter sweep must not be empty")
    n = len(client_ids)
    candidates = []
    if backend == "lsh":
        if descriptors is None:
            raise ContractError("lsh backend needs descriptors")
        descriptors = np.asarray(descriptors, dtype=np.float64)
        planes = random_hyperplanes(descriptors.shape[1], n_planes, seed)
        sketches = np.array([sign_sketch(d, planes) for d in descriptors])
        for k in sweep:
            k = int(k)
            if k < 1 or k > n:
                continue
            labels = _canonical(kmeans(sketches, k, seed=seed).labels)
            m = int(labels.max()) + 1
            if m < 2:
                continue
            candidates.append((silhouette(descriptors, labels), m, labels))
    elif backend == "svd":
        if dist_matrix is None:
            raise ContractError("svd backend needs a distance matrix")
        dist_matrix = _validate_distance_matrix(dist_matrix)
        for t in sweep:
            labels = _canonical(hierarchical_cluster(dist_matrix, float(t)))
            m = int(labels.max()) + 1
            if m < 2 or (m == n and n > 2):
                # Single-cluster and all-singleton labelings are unusable.
                continue
            candidates.append((silhouette(dist_matrix, labels, precomputed=True), m, labels))
    else:
        raise ConfigurationError(f"unknown clustering backend {backend!r}")

    if not candidates:
        logger.warning("clustering sweep produced no multi-cluster candidate; using one cluster")
        return ClusterAssignment({cid: 0 for cid in client_ids}, 1, 0.0)
    candidates.sort(key=lambda c: (-c[0], c[1]))
    scv, m, labels = candidates[0]
    return ClusterAssignment({cid: int(lab) for cid, lab in zip(client_ids, labels)}, m, float(scv))
