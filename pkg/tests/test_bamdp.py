import numpy as np
import pytest

from oracles import bayes_expectimax, enumerate_policy_trees
from rl3lab.bamdp import (Belief, ImpossibleObservation, OracleSizeError, belief_update, bellman_consistency,
                          random_task_set, solve_bamdp, verify_bounds)
from rl3lab.envs import TabularMdp
from rl3lab.tabular_rl import value_iteration


def bandit(p):
    return TabularMdp(np.ones((1, len(p), 1)), np.array([p], dtype=float), reward_noise="bernoulli",
                      task_horizon=None, info={"family": "bandits"})


TWO_ARM = [bandit([1.0, 0.0]), bandit([0.0, 1.0])]


# ----------------------------------------------------------------------------- beliefs


def test_single_success_posterior():
    b = belief_update(Belief([bandit([0.2]), bandit([0.8])], [0.5, 0.5]), 0, 0, 1.0, 0)
    np.testing.assert_allclose(b.weights, [0.2, 0.8], rtol=0, atol=1e-15)


def test_impossible_under_one_task_gets_zero_mass():
    b = belief_update(Belief(TWO_ARM, [0.3, 0.7]), 0, 0, 1.0, 0)
    assert b.weights[1] == 0.0 and b.weights[0] == 1.0
    assert list(b.support) == [0]


def test_sequential_equals_product_of_likelihoods():
    tasks = [bandit([0.2, 0.6]), bandit([0.7, 0.1]), bandit([0.5, 0.5])]
    prior = np.array([0.2, 0.3, 0.5])
    obs = [(0, 1.0), (1, 0.0), (0, 1.0)]
    b = Belief(tasks, prior)
    for a, r in obs:
        b = belief_update(b, 0, a, r, 0)
    lik = np.array([np.prod([m.mean_reward[0, a] if r else 1 - m.mean_reward[0, a] for a, r in obs])
                    for m in tasks])
    np.testing.assert_allclose(b.weights, prior * lik / (prior * lik).sum(), rtol=0, atol=1e-15)


def test_impossible_observation_everywhere_raises():
    with pytest.raises(ImpossibleObservation):
        belief_update(Belief([bandit([1.0]), bandit([1.0])], [0.5, 0.5]), 0, 0, 0.0, 0)


def test_belief_validation():
    with pytest.raises(ValueError):
        Belief(TWO_ARM, [0.6, 0.6])
    with pytest.raises(ValueError):
        Belief(TWO_ARM, [1.0])


# ----------------------------------------------------------------------------- solver


def test_single_task_equals_object_level_value():
    rng = np.random.default_rng(0)
    for _ in range(10):
        (m,) = random_task_set(rng, n_tasks=1, n_states=3, n_actions=2)
        for H in (1, 3, 5):
            sol = solve_bamdp([m], [1.0], H, start_state=0)
            for node in sol.nodes.values():
                rem = H - node.depth
                ref = value_iteration(m, rem, bellman_tol=0.0).q[node.state] if rem else np.zeros(2)
                np.testing.assert_allclose(node.q, ref, rtol=0, atol=1e-12)


def test_identical_tasks_equal_single_task():
    rng = np.random.default_rng(1)
    for _ in range(10):
        (m,) = random_task_set(rng, n_tasks=1, n_states=2, n_actions=2)
        w = rng.uniform(0.05, 0.95)
        two = solve_bamdp([m, m], [w, 1 - w], 4, start_state=0).value
        one = solve_bamdp([m], [1.0], 4, start_state=0).value
        assert abs(two - one) <= 1e-12


def test_worked_two_arm_example():
    sol = solve_bamdp(TWO_ARM, [0.5, 0.5], 2)
    assert sol.value == pytest.approx(1.5, abs=1e-12)
    assert enumerate_policy_trees(TWO_ARM, [0.5, 0.5], 2) == pytest.approx(1.5, abs=1e-12)
    assert bayes_expectimax(TWO_ARM, [0.5, 0.5], 2) == pytest.approx(1.5, abs=1e-12)


def test_random_instances_match_enumeration_oracle():
    rng = np.random.default_rng(2)
    for _ in range(15):
        tasks = random_task_set(rng, n_tasks=2, n_states=2, n_actions=2)
        prior = rng.dirichlet([1, 1])
        sol = solve_bamdp(tasks, prior, 2, start_state=0)
        assert abs(sol.value - enumerate_policy_trees(tasks, prior, 2)) <= 1e-12
        sol3 = solve_bamdp(tasks, prior, 3, start_state=0)
        assert abs(sol3.value - bayes_expectimax(tasks, prior, 3)) <= 1e-12


def test_bellman_recompute():
    rng = np.random.default_rng(3)
    for _ in range(20):
        tasks = random_task_set(rng, n_tasks=3, n_states=3, n_actions=2)
        sol = solve_bamdp(tasks, rng.dirichlet(np.ones(3)), 4, start_state=0)
        assert bellman_consistency(sol) <= 1e-12


def test_size_limits_and_rejections():
    tasks = random_task_set(np.random.default_rng(0), n_tasks=5)
    with pytest.raises(OracleSizeError):
        solve_bamdp(tasks, np.full(5, 0.2), 2, start_state=0)
    with pytest.raises(OracleSizeError):
        solve_bamdp(tasks[:2], [0.5, 0.5], 7, start_state=0)
    g = TabularMdp(np.ones((1, 2, 1)), np.zeros((1, 2)), reward_noise="normal", task_horizon=None)
    with pytest.raises(ValueError, match="Gaussian"):
        solve_bamdp([g], [1.0], 2)
    T = np.zeros((2, 1, 2))
    T[:, 0, 1] = 1
    term = TabularMdp(T, np.zeros((2, 1)), task_horizon=None, terminal_states=(1,))
    with pytest.raises(ValueError, match="terminal"):
        solve_bamdp([term], [1.0], 2)
    with pytest.raises(OracleSizeError):
        solve_bamdp(TWO_ARM, [0.5, 0.5], 6, max_nodes=3)


# ----------------------------------------------------------------------------- bounds


def test_single_task_bound_is_tight():
    (m,) = random_task_set(np.random.default_rng(4), n_tasks=1, n_states=3, n_actions=2)
    rep = verify_bounds([m], [1.0], 4, start_state=0)
    assert rep.ok
    gaps = [row[5] for row in rep.node_rows]
    assert max(abs(g) for g in gaps) <= 1e-12


def test_two_arm_bound_and_collapse():
    rep = verify_bounds(TWO_ARM, [0.5, 0.5], 2)
    root = next(r for r in rep.node_rows if r[1] == 0)
    assert root[4] == 2.0 and root[3] == pytest.approx(1.5)
    collapsed = [r for r in rep.node_rows if r[6]]
    assert collapsed and all(r[7] <= 1e-12 for r in collapsed)
    assert rep.ok and rep.eq4_checked == len(collapsed)
    assert "state,depth,belief" in rep.nodes_csv() and "upper-bound violations" in rep.text()


def test_error_trace_reaches_zero_after_collapse():
    rep = verify_bounds(TWO_ARM, [0.5, 0.5], 3)
    err = {task: [r[6] for r in rep.error_rows if r[0] == task] for task in (0, 1)}
    # the first pull (arm 0) collapses the belief; the estimate is exact only once the
    # good arm has been sampled: immediately in task 0, one step later in task 1
    assert err[0] == [2.5, 0.0, 0.0, 0.0]
    assert err[1] == [2.5, 2.0, 0.0, 0.0]
    assert rep.kappa == {0: 1.0, 1: 2.0}


def test_identical_q_tasks_share_greedy_sets():
    rng = np.random.default_rng(5)
    for _ in range(10):
        (m,) = random_task_set(rng, n_tasks=1, n_states=2, n_actions=2, reward_kind="none")
        twin = TabularMdp(m.transition.copy(), m.mean_reward.copy(), reward_noise="none", task_horizon=None)
        rep = verify_bounds([m, twin], [0.4, 0.6], 4, start_state=0)
        assert rep.eq4_checked > 0 and rep.greedy_mismatches == 0 and rep.eq4_violations == 0


def test_bound_property_random_instances():
    rng = np.random.default_rng(6)
    for _ in range(30):
        n = int(rng.integers(1, 4))
        tasks = random_task_set(rng, n_tasks=n, n_states=int(rng.integers(1, 4)), n_actions=2)
        rep = verify_bounds(tasks, rng.dirichlet(np.ones(n)), int(rng.integers(1, 5)), start_state=0)
        assert rep.eq2_violations == 0 and rep.max_bellman_error <= 1e-12
