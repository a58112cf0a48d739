import numpy as np
import pytest

from cflsim.aggregation import (
    GlobalOptState,
    cluster_risk,
    cluster_risk_fast,
    dynamic_beta,
    fedavg,
    global_aggregate,
    rarc,
)
from cflsim.errors import ConfigurationError, ContractError
from cflsim.tensorcore import ModelParams, ParamLayer


def scalar_model(name_values):
    return ModelParams(tuple(ParamLayer(n, np.array(v, dtype=float)) for n, v in name_values))


def random_history(rng, rounds, participation=1.0):
    hist = []
    for r in range(1, rounds + 1):
        if rng.random() <= participation:
            hist.append((r, float(rng.normal(0, 0.2))))
    return hist


def brute_force_risk(histories, weights):
    """Independent oracle: per-pair covariance rebuilt from raw histories."""
    n = len(histories)
    total = 0.0
    for i in range(n):
        for j in range(n):
            common = sorted({r for r, _ in histories[i]} & {r for r, _ in histories[j]})
            if len(common) < 2:
                continue

            def dev(hist, r):
                prior = [a for rr, a in hist if rr < r]
                return dict(hist)[r] - (float(np.mean(prior)) if prior else 0.0)

            cov = sum(dev(histories[i], r) * dev(histories[j], r) for r in common)
            total += weights[i] * weights[j] * cov / (len(common) - 1)
    return total


# ---------------------------------------------------------------------------
# fedavg


def test_fedavg_two_models():
    a = scalar_model([("w", [1.0, 3.0])])
    b = scalar_model([("w", [3.0, 5.0])])
    out = fedavg([a, b], [0.5, 0.5])
    np.testing.assert_allclose(out.get("w"), [2.0, 4.0])


def test_fedavg_single_model_identity():
    a = scalar_model([("w", [1.5, -2.0])])
    np.testing.assert_array_equal(fedavg([a], [7.0]).get("w"), a.get("w"))


def test_fedavg_renormalizes():
    a = scalar_model([("w", [1.0, 3.0])])
    b = scalar_model([("w", [3.0, 5.0])])
    out = fedavg([a, b], [2.0, 2.0])
    np.testing.assert_allclose(out.get("w"), [2.0, 4.0])


def test_fedavg_incompatible_rejected():
    a = scalar_model([("w", [1.0])])
    b = scalar_model([("q", [1.0])])
    with pytest.raises(ContractError):
        fedavg([a, b], [1.0, 1.0])


# ---------------------------------------------------------------------------
# cluster_risk


def test_risk_degenerate_rounds():
    assert cluster_risk([[(1, 0.5)]], [1.0], rounds_so_far=1) == 0.0
    assert cluster_risk([[(1, 0.5)]], [1.0]) == 0.0


def test_risk_single_client_hand_example():
    hist = [(1, 0.1), (2, 0.3)]
    assert cluster_risk([hist], [1.0]) == pytest.approx(0.05, abs=1e-12)


def test_risk_all_zero_returns():
    hist = [(1, 0.0), (2, 0.0), (3, 0.0)]
    assert cluster_risk([hist, hist], [0.5, 0.5]) == 0.0


@pytest.mark.parametrize("seed", range(30))
def test_risk_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    k = rng.integers(1, 8)
    histories = [random_history(rng, rng.integers(1, 30), participation=0.7) for _ in range(k)]
    weights = rng.uniform(0.05, 0.3, k).tolist()
    mine = cluster_risk(histories, weights)
    assert abs(mine - brute_force_risk(histories, weights)) < 1e-10


@pytest.mark.parametrize("seed", range(30))
def test_prefix_path_matches_direct(seed):
    rng = np.random.default_rng(seed + 1000)
    k = rng.integers(1, 8)
    histories = [random_history(rng, rng.integers(1, 50), participation=0.8) for _ in range(k)]
    weights = rng.uniform(0.05, 0.3, k).tolist()
    assert abs(cluster_risk(histories, weights) - cluster_risk_fast(histories, weights)) < 1e-10


@pytest.mark.parametrize("seed", range(50))
def test_risk_nonnegative_on_aligned_histories(seed):
    # With full participation the covariance is a Gram matrix, hence PSD.
    rng = np.random.default_rng(seed + 2000)
    k = rng.integers(1, 6)
    rounds = rng.integers(2, 20)
    histories = [random_history(rng, rounds, participation=1.0) for _ in range(k)]
    weights = rng.uniform(0.01, 0.5, k).tolist()
    assert cluster_risk(histories, weights) >= -1e-12


# ---------------------------------------------------------------------------
# rarc / dynamic beta


def test_rarc_values():
    assert rarc(0.2, 0.1, 0.5) == pytest.approx(0.05)
    assert rarc(0.3, 0.7, 1.0) == pytest.approx(0.3)
    assert rarc(0.3, 0.7, 0.0) == pytest.approx(-0.7)


def test_rarc_rejects_bad_lambda():
    with pytest.raises(ConfigurationError):
        rarc(0.1, 0.1, 1.5)


def test_dynamic_beta_hand_value():
    assert dynamic_beta(0.9, 0.05, 10.0) == pytest.approx(0.9049958, abs=1e-7)


def test_dynamic_beta_nonpositive_gamma():
    assert dynamic_beta(0.9, 0.0, 10.0) == 0.9
    assert dynamic_beta(0.9, -3.0, 10.0) == 0.9


def test_dynamic_beta_asymptote():
    assert dynamic_beta(0.9, 1e9, 10.0) == pytest.approx(0.9 + 0.1, abs=1e-9)
    assert dynamic_beta(0.9, 1e9, 10.0) < 1.0


def test_dynamic_beta_monotone_and_bounded():
    gammas = np.linspace(-1, 5, 50)
    vals = [dynamic_beta(0.85, g, 12.0) for g in gammas]
    assert np.all(np.diff(vals) >= 0)
    assert all(0.85 <= v < 0.85 + 1 / 12.0 + 1e-12 for v in vals)
    for g, v in zip(gammas, vals):
        assert (v == 0.85) == (g <= 0)


def test_dynamic_beta_range_validation():
    with pytest.raises(ConfigurationError):
        dynamic_beta(0.95, 0.1, 10.0)  # 0.95 + 0.1 > 1
    with pytest.raises(ConfigurationError):
        dynamic_beta(1.0, 0.1, 100.0)


# ---------------------------------------------------------------------------
# global_aggregate


def test_global_update_hand_example():
    state = GlobalOptState.initial(beta=0.9, eta=1.0, tau_adapt=1e-3, tau_smooth=10.0)
    g = scalar_model([("w", [0.0])])
    cluster = scalar_model([("w", [0.1])])
    out, _, betas = global_aggregate(state, g, [cluster], [1.0], [-1.0])
    assert betas == [0.9]
    assert out.get("w")[0] == pytest.approx(0.01 / (0.1 + 1e-3), abs=1e-12)
    assert out.get("w")[0] == pytest.approx(0.0990, abs=1e-4)


def test_global_fixed_point_from_fresh_state():
    state = GlobalOptState.initial(beta=0.9, eta=0.5, tau_adapt=1e-3, tau_smooth=10.0)
    g = scalar_model([("w", [0.3, -0.2])])
    out, _, _ = global_aggregate(state, g, [g, g], [0.5, 0.5], [0.0, 0.0])
    np.testing.assert_array_equal(out.get("w"), g.get("w"))


def test_global_momentum_decays_by_beta_star():
    state = GlobalOptState.initial(beta=0.8, eta=1.0, tau_adapt=1e-3, tau_smooth=10.0)
    g = scalar_model([("w", [0.0])])
    cluster = scalar_model([("w", [1.0])])
    global_aggregate(state, g, [cluster], [1.0], [0.0])
    mtn_before = state.momentum[0]["w"].copy()
    # Now the cluster equals the (original) global model: delta becomes zero.
    global_aggregate(state, g, [g], [1.0], [0.0])
    np.testing.assert_allclose(state.momentum[0]["w"], 0.8 * mtn_before)


def test_global_weight_sum_checked():
    state = GlobalOptState.initial(beta=0.9, eta=1.0, tau_adapt=1e-3, tau_smooth=10.0)
    g = scalar_model([("w", [0.0])])
    with pytest.raises(ContractError):
        global_aggregate(state, g, [g, g], [0.7, 0.7], [0.0, 0.0])


def test_accumulator_never_decreases():
    rng = np.random.default_rng(5)
    state = GlobalOptState.initial(beta=0.9, eta=0.1, tau_adapt=1e-3, tau_smooth=10.0)
    g = scalar_model([("w", rng.normal(size=4))])
    prev = np.zeros(4)
    for r in range(20):
        clusters = [scalar_model([("w", rng.normal(size=4))]) for _ in range(2)]
        g, state, _ = global_aggregate(state, g, clusters, [0.5, 0.5], rng.normal(size=2))
        for key in state.accum_sq:
            assert np.all(state.accum_sq[key]["w"] >= -1e-15)
        assert np.all(state.accum_sq[0]["w"] >= prev - 1e-15)
        prev = state.accum_sq[0]["w"].copy()


def test_higher_gamma_retains_more_history():
    # With fixed delta and previous momentum, new momentum must move closer
    # to the previous value as gamma grows.
    mtn_prev, delta = 1.0, 0.2
    gaps = []
    for gamma in [0.0, 0.1, 0.5, 1.0, 2.0]:
        beta_star = dynamic_beta(0.8, gamma, 10.0)
        mtn_new = beta_star * mtn_prev + (1 - beta_star) * delta
        gaps.append(abs(mtn_new - mtn_prev))
    assert all(a > b for a, b in zip(gaps, gaps[1:]))


def reference_fedadagrad(global_arrays, rounds, weights, beta, eta, tau):
    """Plain FedAdagrad reimplementation used as the bitwise oracle."""
    g = {k: v.copy() for k, v in global_arrays.items()}
    m = len(weights)
    mtn = [{k: np.zeros_like(v) for k, v in g.items()} for _ in range(m)]
    ups = [{k: np.zeros_like(v) for k, v in g.items()} for _ in range(m)]
    trajectory = []
    for cluster_arrays in rounds:
        summed = {k: np.zeros_like(v) for k, v in g.items()}
        for idx in range(m):
            for k in g:
                delta = weights[idx] * (cluster_arrays[idx][k] - g[k])
                mtn[idx][k] = beta * mtn[idx][k] + (1.0 - beta) * delta
                ups[idx][k] = ups[idx][k] + delta * delta
                summed[k] += mtn[idx][k] / (np.sqrt(ups[idx][k]) + tau)
        g = {k: g[k] + eta * summed[k] for k in g}
        trajectory.append({k: v.copy() for k, v in g.items()})
    return trajectory


def test_nonpositive_gamma_bitwise_matches_fedadagrad():
    rng = np.random.default_rng(11)
    layer_shapes = {"w": (3, 2), "b": (2,)}
    start = {k: rng.normal(size=s) for k, s in layer_shapes.items()}
    weights = [0.25, 0.75]
    rounds = []
    for _ in range(50):
        rounds.append([{k: rng.normal(size=s) for k, s in layer_shapes.items()} for _ in weights])

    oracle = reference_fedadagrad(start, rounds, weights, beta=0.9, eta=0.1, tau=1e-3)

    state = GlobalOptState.initial(beta=0.9, eta=0.1, tau_adapt=1e-3, tau_smooth=10.0)
    g = ModelParams(tuple(ParamLayer(k, start[k]) for k in ["w", "b"]))
    gammas = [-0.3, 0.0]
    for r, cluster_arrays in enumerate(rounds):
        clusters = [ModelParams(tuple(ParamLayer(k, arrs[k]) for k in ["w", "b"]))
                    for arrs in cluster_arrays]
        g, state, betas = global_aggregate(state, g, clusters, weights, gammas)
        assert betas == [0.9, 0.9]
        for k in ["w", "b"]:
            assert np.array_equal(g.get(k), oracle[r][k]), f"round {r} layer {k} diverged"


def test_sequential_mode_runs_and_differs():
    rng = np.random.default_rng(3)
    start = scalar_model([("w", rng.normal(size=3))])
    clusters = [scalar_model([("w", rng.normal(size=3))]) for _ in range(2)]
    s1 = GlobalOptState.initial(0.9, 0.1, 1e-3, 10.0)
    s2 = GlobalOptState.initial(0.9, 0.1, 1e-3, 10.0)
    summed, _, _ = global_aggregate(s1, start, clusters, [0.5, 0.5], [0.2, 0.0])
    seq, _, _ = global_aggregate(s2, start, clusters, [0.5, 0.5], [0.2, 0.0],
                                 sequential=True)
    assert not np.array_equal(summed.get("w"), seq.get("w"))


def test_pooled_mode_runs():
    state = GlobalOptState.initial(0.9, 0.1, 1e-3, 10.0, pooled=True)
    g = scalar_model([("w", [0.0, 0.0])])
    clusters = [scalar_model([("w", [1.0, 0.0])]), scalar_model([("w", [0.0, 1.0])])]
    out, _, betas = global_aggregate(state, g, clusters, [0.5, 0.5], [0.5, -0.5])
    assert len(betas) == 2 and betas[0] == betas[1]
    assert not np.array_equal(out.get("w"), g.get("w"))
