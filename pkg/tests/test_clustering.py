import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cflsim.clustering import (
    ClusterAssignment,
    hierarchical_cluster,
    kmeans,
    lsh_sketch,
    pairwise_subspace_distances,
    random_hyperplanes,
    select_clustering,
    sign_sketch,
    silhouette,
    svd_subspace_distance,
)
from cflsim.errors import ConfigurationError, ContractError, SingleClusterError


def blobs(counts, centers, spread, seed):
    rng = np.random.default_rng(seed)
    pts, labels = [], []
    for i, (n, c) in enumerate(zip(counts, centers)):
        pts.append(np.asarray(c) + rng.normal(0, spread, size=(n, len(c))))
        labels += [i] * n
    return np.vstack(pts), np.array(labels)


# ---------------------------------------------------------------------------
# LSH sketch


def test_sketch_identity_planes():
    planes = np.eye(2)
    np.testing.assert_array_equal(sign_sketch(np.array([1.0, -1.0]), planes), [1.0, -1.0])


def test_sketch_scale_invariant():
    desc = np.array([0.3, -2.0, 1.1, 0.0])
    a = lsh_sketch(desc, n_planes=64, seed=5)
    b = lsh_sketch(2.0 * desc, n_planes=64, seed=5)
    np.testing.assert_array_equal(a, b)


def test_sketch_deterministic():
    desc = np.array([1.0, 2.0, 3.0])
    np.testing.assert_array_equal(lsh_sketch(desc, 32, seed=9), lsh_sketch(desc, 32, seed=9))


def test_sketch_collision_probability():
    # Monte-Carlo estimate of the cosine-LSH agreement bound 1 - phi/pi.
    phi = np.pi / 3
    u = np.array([1.0, 0.0])
    v = np.array([np.cos(phi), np.sin(phi)])
    planes = random_hyperplanes(2, 10000, seed=123)
    agree = (sign_sketch(u, planes) == sign_sketch(v, planes)).mean()
    assert abs(agree - (1 - phi / np.pi)) < 0.02


def test_sketch_rejects_empty_descriptor():
    with pytest.raises(ContractError):
        sign_sketch(np.zeros(0), np.zeros((3, 0)))


# ---------------------------------------------------------------------------
# k-means


def test_kmeans_k_equals_n():
    pts = np.array([[0.0, 0.0], [5.0, 5.0], [9.0, 0.0]])
    res = kmeans(pts, k=3, seed=0)
    assert len(set(res.labels.tolist())) == 3
    assert res.inertia_path[-1] == pytest.approx(0.0, abs=1e-12)


def test_kmeans_two_blobs():
    pts, truth = blobs([20, 20], [[0, 0], [10, 10]], spread=0.5, seed=1)
    res = kmeans(pts, k=2, seed=3)
    # Blob purity: each true blob maps to exactly one label.
    assert len(set(res.labels[truth == 0])) == 1
    assert len(set(res.labels[truth == 1])) == 1
    assert res.labels[0] != res.labels[-1]


def test_kmeans_inertia_nonincreasing():
    pts, _ = blobs([30, 30, 30], [[0, 0], [6, 0], [0, 6]], spread=1.0, seed=2)
    res = kmeans(pts, k=3, seed=7)
    path = np.array(res.inertia_path)
    assert np.all(np.diff(path) <= 1e-9)


def test_kmeans_rejects_bad_k():
    pts = np.zeros((4, 2))
    with pytest.raises(ConfigurationError):
        kmeans(pts, k=0, seed=0)
    with pytest.raises(ContractError):
        kmeans(pts, k=5, seed=0)


# ---------------------------------------------------------------------------
# SVD subspace distance


def test_subspace_distance_identical():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(20, 6))
    assert svd_subspace_distance(x, x, q=3) == pytest.approx(0.0, abs=1e-10)


def test_subspace_distance_orthogonal():
    a = np.array([[1.0, 0.0, 0.0]])
    b = np.array([[0.0, 1.0, 0.0]])
    assert svd_subspace_distance(a, b, q=1) == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_subspace_distance_symmetric(seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(15, 5))
    b = rng.normal(size=(12, 5))
    assert svd_subspace_distance(a, b, 2) == pytest.approx(svd_subspace_distance(b, a, 2), abs=1e-12)


def test_subspace_distance_rank_deficient_warns():
    a = np.ones((5, 4))  # rank 1
    b = np.random.default_rng(0).normal(size=(5, 4))
    with pytest.warns(RuntimeWarning):
        d = svd_subspace_distance(a, b, q=3)
    assert 0.0 <= d <= 1.0


def test_subspace_distance_requires_rows():
    with pytest.raises(ContractError):
        svd_subspace_distance(np.ones((2, 4)), np.ones((5, 4)), q=3)


# ---------------------------------------------------------------------------
# hierarchical clustering


def two_blob_distance_matrix():
    # 4 points: {0,1} close together, {2,3} close together, blobs far apart.
    d = np.zeros((4, 4))
    pairs = {(0, 1): 0.1, (2, 3): 0.1, (0, 2): 5.0, (0, 3): 5.1, (1, 2): 5.2, (1, 3): 5.3}
    for (i, j), v in pairs.items():
        d[i, j] = d[j, i] = v
    return d


def test_hierarchical_threshold_below_all():
    labels = hierarchical_cluster(two_blob_distance_matrix(), threshold=0.05)
    assert len(set(labels.tolist())) == 4


def test_hierarchical_threshold_above_all():
    labels = hierarchical_cluster(two_blob_distance_matrix(), threshold=10.0)
    assert len(set(labels.tolist())) == 1


def test_hierarchical_intermediate_threshold():
    labels = hierarchical_cluster(two_blob_distance_matrix(), threshold=1.0)
    assert labels[0] == labels[1]
    assert labels[2] == labels[3]
    assert labels[0] != labels[2]


def test_hierarchical_rejects_asymmetric():
    d = two_blob_distance_matrix()
    d[0, 1] = 9.0
    with pytest.raises(ContractError):
        hierarchical_cluster(d, 1.0)


# ---------------------------------------------------------------------------
# silhouette


def test_silhouette_hand_computed():
    pts = np.array([0.0, 0.1, 10.0, 10.1])
    labels = np.array([0, 0, 1, 1])
    assert silhouette(pts, labels) == pytest.approx(0.990, abs=1e-3)


def test_silhouette_random_labels_near_zero():
    pts, _ = blobs([20, 20], [[0, 0], [4, 4]], spread=1.0, seed=6)
    rng = np.random.default_rng(0)
    vals = []
    for _ in range(200):
        labels = rng.permutation(np.repeat([0, 1], 20))
        vals.append(silhouette(pts, labels))
    assert abs(np.mean(vals)) < 0.05


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_silhouette_range_bound(seed):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(10, 3))
    labels = rng.integers(0, 3, size=10)
    if len(np.unique(labels)) < 2:
        labels[0] = (labels[1] + 1) % 3
    val = silhouette(pts, labels)
    assert -1.0 <= val <= 1.0


def test_silhouette_single_cluster_distinct_error():
    with pytest.raises(SingleClusterError):
        silhouette(np.zeros((5, 2)), np.zeros(5, dtype=int))


# ---------------------------------------------------------------------------
# select_clustering


def test_select_three_blobs():
    desc, _ = blobs([8, 8, 8], [[8, 1, 1], [1, 8, 1], [1, 1, 8]], spread=0.4, seed=9)
    assignment = select_clustering(list(range(24)), "lsh", sweep=range(2, 7),
                                   descriptors=desc, n_planes=64, seed=1)
    assert assignment.n_clusters == 3
    labels = np.array([assignment.labels[i] for i in range(24)])
    for blob in range(3):
        assert len(set(labels[blob * 8:(blob + 1) * 8].tolist())) == 1


def test_select_single_sweep_value():
    desc, _ = blobs([10, 10], [[0, 0], [9, 9]], spread=0.3, seed=4)
    assignment = select_clustering(list(range(20)), "lsh", sweep=[2],
                                   descriptors=desc, n_planes=64, seed=1)
    assert assignment.n_clusters == 2


def test_select_scv_self_consistent():
    desc, _ = blobs([10, 10, 10], [[0, 0], [7, 0], [0, 7]], spread=0.5, seed=12)
    assignment = select_clustering(list(range(30)), "lsh", sweep=range(2, 6),
                                   descriptors=desc, n_planes=64, seed=2)
    labels = np.array([assignment.labels[i] for i in range(30)])
    assert assignment.scv == pytest.approx(silhouette(desc, labels), abs=1e-12)


def test_select_svd_backend():
    rng = np.random.default_rng(3)
    basis_a = rng.normal(size=(2, 6))
    basis_b = rng.normal(size=(2, 6))
    mats = [rng.normal(size=(30, 2)) @ basis_a for _ in range(5)]
    mats += [rng.normal(size=(30, 2)) @ basis_b for _ in range(5)]
    dist = pairwise_subspace_distances(mats, q=2)
    sweep = np.quantile(dist[np.triu_indices(10, 1)], [0.2, 0.4, 0.6, 0.8])
    assignment = select_clustering(list(range(10)), "svd", sweep=sweep, dist_matrix=dist)
    assert assignment.n_clusters == 2
    labels = [assignment.labels[i] for i in range(10)]
    assert len(set(labels[:5])) == 1 and len(set(labels[5:])) == 1


def test_select_fallback_single_cluster():
    desc = np.zeros((6, 3))  # indistinguishable clients
    assignment = select_clustering(list(range(6)), "lsh", sweep=[2, 3],
                                   descriptors=desc, n_planes=16, seed=0)
    assert isinstance(assignment, ClusterAssignment)
    assert assignment.n_clusters >= 1
    assert set(assignment.labels) == set(range(6))


def test_select_partition_property():
    desc, _ = blobs([6, 6, 6, 6], [[0, 0], [5, 0], [0, 5], [5, 5]], spread=0.5, seed=8)
    assignment = select_clustering(list(range(24)), "lsh", sweep=range(2, 8),
                                   descriptors=desc, n_planes=64, seed=3)
    assert sorted(assignment.labels) == list(range(24))
    assert set(assignment.labels.values()) == set(range(assignment.n_clusters))
