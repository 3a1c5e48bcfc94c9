import math

import numpy as np
import pytest

from rankcore.validators import (
    MixtureModel,
    ScoreDistribution,
    TwoClusterModel,
    greedy_epsilon_net,
    solve_tau,
    validate_discrepancy,
    validate_epsilon_coverage,
    validate_interference,
    validate_mixture,
    validate_sps_consistency,
    validate_topk_bias,
)


def two_prototype_model(distance_sq=4.0, weights=(0.5, 0.5)):
    side = math.sqrt(distance_sq / 4.0)
    return MixtureModel(
        prototypes=(np.zeros((2, 2)), np.full((2, 2), side)),
        weights=np.asarray(weights),
    )


def uniform_model():
    return TwoClusterModel(
        pi_p=0.5,
        dist_p=ScoreDistribution.uniform(0.0, 1.0),
        dist_q=ScoreDistribution.uniform(0.5, 1.5),
        rho=0.5,
    )


# ---------------------------------------------------------------------------
# averaging interference

def test_interference_one_hot_heads():
    report = validate_interference(n_heads=2, n_regions=4, support_size=1, seed=0)
    assert report["ok"]
    assert report["min_head_entropy"] == 0.0
    assert report["avg_entropy"] == pytest.approx(math.log(2), abs=1e-12)


def test_interference_single_head_skipped():
    report = validate_interference(n_heads=1, n_regions=4)
    assert report["skipped"]
    assert "identical heads" in report["note"]


def test_interference_random_heads_many_seeds():
    for seed in range(10):
        for h in (2, 4, 8):
            report = validate_interference(n_heads=h, n_regions=16, support_size=2,
                                           seed=seed)
            assert report["support_union_ok"], (h, seed)
            assert report["entropy_inflation_ok"], (h, seed)


def test_interference_infeasible_partition():
    with pytest.raises(ValueError, match="infeasible"):
        validate_interference(n_heads=4, n_regions=4, support_size=2)


# ---------------------------------------------------------------------------
# mixture perturbation magnitude

def test_mixture_isotropic_two_prototypes():
    report = validate_mixture(two_prototype_model(), trials=10**4, seed=0)
    assert report["ok"]
    assert report["analytic_value"] == pytest.approx(2.0, abs=1e-12)
    assert abs(report["empirical_mean_delta"] - 2.0) <= 4 * report["standard_error"]


def test_mixture_pure_archetype():
    report = validate_mixture(two_prototype_model(weights=(1.0, 0.0)), trials=2000, seed=1)
    assert report["analytic_value"] == 0.0
    assert report["empirical_mean_delta"] == 0.0
    assert report["ok"]


def test_mixture_gini_bounds_random_models():
    rng = np.random.default_rng(2)
    for trial in range(10):
        protos = tuple(rng.standard_normal((3, 3)) for _ in range(3))
        weights = rng.dirichlet(np.ones(3))
        model = MixtureModel(prototypes=protos, weights=weights)
        report = validate_mixture(model, trials=2000, seed=trial)
        assert report["bounds"]["lower"] <= report["analytic_value"] <= report["bounds"]["upper"]
        assert report["bounds"]["ok"]


def test_mixture_rejects_degenerate_prototypes():
    with pytest.raises(ValueError, match="coincide"):
        MixtureModel(prototypes=(np.ones((2, 2)), np.ones((2, 2))),
                     weights=np.array([0.5, 0.5]))


# ---------------------------------------------------------------------------
# selection-threshold equation

def test_solve_tau_hand_value():
    # 0.5*t + 0.5*(t - 0.5) = 0.5 has solution t = 0.75
    assert solve_tau(uniform_model()) == pytest.approx(0.75, abs=1e-9)


def test_solve_tau_equal_distributions():
    model = TwoClusterModel(
        pi_p=0.4,
        dist_p=ScoreDistribution.uniform(0.0, 1.0),
        dist_q=ScoreDistribution.uniform(0.0, 1.0),
        rho=0.3,
    )
    assert solve_tau(model) == pytest.approx(0.3, abs=1e-9)


def test_solve_tau_small_rho_approaches_infimum():
    model = TwoClusterModel(
        pi_p=0.5,
        dist_p=ScoreDistribution.uniform(0.0, 1.0),
        dist_q=ScoreDistribution.uniform(0.5, 1.5),
        rho=1e-9,
    )
    assert solve_tau(model) == pytest.approx(0.0, abs=1e-6)


def test_topk_bias_uniform_example():
    report = validate_topk_bias(uniform_model(), n_grid=(10**3, 10**4), trials=100, seed=0)
    assert report["asserted"]
    assert report["limit"] == pytest.approx(0.75, abs=1e-9)
    assert report["delta"] == pytest.approx(0.25, abs=1e-9)
    assert report["ok"]
    assert report["delta_ok"]


def test_topk_bias_no_gap_reported_not_asserted():
    model = TwoClusterModel(
        pi_p=0.5,
        dist_p=ScoreDistribution.uniform(0.0, 1.0),
        dist_q=ScoreDistribution.uniform(0.0, 1.0),
        rho=0.5,
    )
    report = validate_topk_bias(model, n_grid=(2000,), trials=50, seed=0)
    assert not report["asserted"]
    assert report["ok"]  # nothing asserted when the hypothesis fails
    assert report["delta"] == pytest.approx(0.0, abs=1e-9)
    # with identical score laws the selected fraction still matches pi_p
    final = report["per_n"]["2000"]["mean"]
    assert abs(final - 0.5) < 0.05


def test_topk_bias_normal_clusters():
    model = TwoClusterModel(
        pi_p=0.3,
        dist_p=ScoreDistribution.normal(0.0, 1.0),
        dist_q=ScoreDistribution.normal(1.0, 1.0),
        rho=0.2,
    )
    report = validate_topk_bias(model, n_grid=(10**3, 10**4), trials=100, seed=1)
    assert report["ok"]


# ---------------------------------------------------------------------------
# epsilon-coverage and expectation discrepancy

def cluster_pool(seed=0, spread=0.05):
    rng = np.random.default_rng(seed)
    pool = [np.zeros((3, 3)) + spread * rng.standard_normal((3, 3)) for _ in range(20)]
    pool += [np.full((3, 3), 2.0) + spread * rng.standard_normal((3, 3)) for _ in range(20)]
    return pool


def test_greedy_net_sizes():
    pool = cluster_pool()
    diameter = max(
        float(np.linalg.norm(a - b)) for a in pool for b in pool
    )
    assert len(greedy_epsilon_net(pool, diameter + 1.0)) == 1
    intra = max(
        float(np.linalg.norm(a - b))
        for group in (pool[:20], pool[20:])
        for a in group
        for b in group
    )
    assert len(greedy_epsilon_net(pool, intra)) == 2


def test_coverage_select_everything():
    pool = cluster_pool()
    report = validate_epsilon_coverage(pool, eps=1e-6, delta=0.5, trials=20, seed=0)
    # bound far exceeds the pool, so every trial selects the whole pool
    assert report["bound_vacuous_at_this_scale"]
    assert report["m_effective"] == len(pool)
    assert report["empirical_coverage"] == 1.0
    assert report["ok"]


def test_coverage_single_ball():
    pool = cluster_pool()
    diameter = max(float(np.linalg.norm(a - b)) for a in pool for b in pool)
    report = validate_epsilon_coverage(pool, eps=diameter + 1.0, delta=0.1,
                                       trials=50, seed=1)
    assert report["n_eps"] == 1
    assert report["empirical_coverage"] == 1.0


def test_coverage_two_clusters_at_bound():
    pool = cluster_pool(seed=3)
    intra = max(
        float(np.linalg.norm(a - b))
        for group in (pool[:20], pool[20:])
        for a in group
        for b in group
    )
    report = validate_epsilon_coverage(pool, eps=intra, delta=0.1, trials=200, seed=2)
    assert report["empirical_coverage"] >= 1.0 - 0.1 - 3.0 * report["coverage_se"]
    assert report["ok"]


def test_discrepancy_identity_projection():
    pool = cluster_pool(seed=4)
    weights = np.full(len(pool), 1.0 / len(pool))
    report = validate_discrepancy(pool, weights, list(range(len(pool))),
                                  f=lambda m: float(np.linalg.norm(m)), lipschitz=1.0,
                                  eps=0.5)
    assert report["discrepancy"] == 0.0
    assert report["ok"]


def test_discrepancy_constant_function():
    pool = cluster_pool(seed=5)
    weights = np.full(len(pool), 1.0 / len(pool))
    projection = [0] * 20 + [20] * 20  # collapse each cluster onto one point
    eps = max(float(np.linalg.norm(pool[i] - pool[j])) for i, j in enumerate(projection))
    report = validate_discrepancy(pool, weights, projection,
                                  f=lambda m: 3.25, lipschitz=0.0, eps=eps)
    assert report["discrepancy"] == 0.0
    assert report["bound"] == 0.0
    assert report["ok"]


def test_discrepancy_lipschitz_anchor_distance():
    pool = cluster_pool(seed=6)
    rng = np.random.default_rng(7)
    weights = rng.dirichlet(np.ones(len(pool)))
    eps = 1.0
    projection = []
    for i, m in enumerate(pool):
        near = [j for j, other in enumerate(pool) if float(np.linalg.norm(m - other)) <= eps]
        projection.append(int(near[rng.integers(len(near))]))
    anchor = pool[3]
    report = validate_discrepancy(pool, weights, projection,
                                  f=lambda m: float(np.linalg.norm(m - anchor)),
                                  lipschitz=1.0, eps=eps)
    assert report["discrepancy"] <= report["bound"] + 1e-12
    assert report["ok"]


def test_discrepancy_rejects_bad_projection():
    pool = cluster_pool(seed=8)
    weights = np.full(len(pool), 1.0 / len(pool))
    projection = [39] + list(range(1, len(pool)))  # point 0 mapped across clusters
    with pytest.raises(ValueError, match="violates"):
        validate_discrepancy(pool, weights, projection,
                             f=lambda m: 0.0, lipschitz=1.0, eps=0.1)


# ---------------------------------------------------------------------------
# running-mean consistency

@pytest.mark.parametrize("kind, analytic", [("uniform", 1.0), ("ar1", 1.0), ("mixture", 2.0)])
def test_sps_consistency_streams(kind, analytic):
    report = validate_sps_consistency(kind, l_grid=(100, 1000, 10000), seed=0)
    assert report["analytic_mean"] == pytest.approx(analytic, abs=1e-12)
    assert report["ok"], report
    assert report["trace"][-1]["abs_error"] <= 0.05 * analytic
