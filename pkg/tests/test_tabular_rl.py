import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import expectimax_q
from rl3lab.envs import TabularMdp, generate_random_mdp
from rl3lab.tabular_rl import (ModelEstimate, QTable, bellman_residual, estimate_transition_row, meta_oracle,
                               model_update, oracle_solve, value_iteration)


def random_mdp(rng, S, A, terminal=()):
    T = rng.dirichlet(np.ones(S), size=(S, A))
    T /= T.sum(axis=2, keepdims=True)
    return TabularMdp(T, rng.normal(size=(S, A)), terminal_states=frozenset(terminal))


# ----------------------------------------------------------------------------- model estimate


def test_single_update():
    m = model_update(ModelEstimate(4, 2), 0, 1, 2.0, 3, False)
    assert m.sa_counts[0, 1] == 1 and m.reward_sum[0, 1] == 2.0
    assert m.transition_counts[0, 1, 3] == 1 and m.sa_counts.sum() == 1


def test_mean_reward_is_sample_mean():
    m = ModelEstimate(2, 2)
    m.update(0, 1, 1.0, 1).update(0, 1, 3.0, 0)
    assert m.mean_reward(0, 1) == 2.0


def test_unseen_pair_zero_reward_uniform_row():
    m = ModelEstimate(5, 2)
    for s in range(4):
        m.update(s, 0, 1.0, s)
    assert m.mean_reward(0, 1) == 0.0
    np.testing.assert_array_equal(estimate_transition_row(m, 0, 1), [0.25] * 4)


def test_smoothed_row_formula():
    m = ModelEstimate(2, 1)
    for s2 in (0, 0, 0, 1):
        m.update(0, 0, 0.0, s2)
    np.testing.assert_allclose(m.transition_row(0, 0), [3.1 / 4.2, 1.1 / 4.2], rtol=0, atol=1e-15)


def test_mle_dominance_limit():
    m = ModelEstimate(2, 1)
    m.transition_counts[0, 0, 0] = m.sa_counts[0, 0] = 10**6
    m.visited[:] = True
    assert abs(m.transition_row(0, 0)[0] - 1) < 1e-6


def test_row_restricted_to_visited_states():
    m = ModelEstimate(10, 1)
    m.update(2, 0, 0.0, 7)
    idx, T, R, term = m.build()
    assert list(idx) == [2, 7] and T.shape == (2, 1, 2)
    np.testing.assert_allclose(T.sum(axis=2), 1.0)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 1),
                          st.floats(-1e6, 1e6, allow_nan=False), st.integers(0, 3)),
                min_size=1, max_size=40),
       st.randoms(use_true_random=False))
def test_order_invariance(transitions, shuffler):
    a, b = ModelEstimate(4, 2), ModelEstimate(4, 2)
    for s, act, r, s2 in transitions:
        a.update(s, act, r, s2)
    perm = list(transitions)
    shuffler.shuffle(perm)
    for s, act, r, s2 in perm:
        b.update(s, act, r, s2)
    assert a.same_as(b)
    qa, qb = value_iteration(a, 5), value_iteration(b, 5)
    assert qa.q.tobytes() == qb.q.tobytes()


def test_model_consistency():
    # exploring policy: every (s, a) is tried 10^5 times
    rng = np.random.default_rng(3)
    S, A, n = 3, 2, 100_000
    mdp = random_mdp(rng, S, A)
    m = ModelEstimate(S, A)
    for s in range(S):
        for a in range(A):
            for s2 in rng.choice(S, size=n, p=mdp.transition[s, a]):
                m.update(s, a, 0.0, int(s2))
    _, T, _, _ = m.build()
    assert np.abs(T - mdp.transition).max() < 0.01


def test_terminal_transition_records_reward_but_no_outgoing_mass():
    m = ModelEstimate(3, 1)
    m.update(0, 0, 5.0, 2, done=True)
    assert m.terminal[2] and m.sa_counts[2].sum() == 0 and m.reward_sum[0, 0] == 5.0
    q = value_iteration(m, 3, 0.0).q
    # smoothing leaves 0.1/1.2 self-transition mass on state 0
    p = 0.1 / 1.2
    assert q[2, 0] == 0.0 and q[0, 0] == pytest.approx(5 + p * (5 + p * 5), abs=1e-12)


def test_serialisation_round_trip():
    m = ModelEstimate(3, 2)
    m.update(0, 1, 0.5, 2).update(2, 0, -1.0, 0, True)
    m2 = ModelEstimate.from_dict(m.to_dict())
    assert m.same_as(m2)
    qt = value_iteration(m, 4)
    qt2 = QTable.from_dict(qt.to_dict())
    assert np.array_equal(qt.q, qt2.q) and np.array_equal(qt.known, qt2.known)


# ----------------------------------------------------------------------------- value iteration


def test_two_state_chain():
    T = np.zeros((2, 1, 2))
    T[0, 0, 1] = T[1, 0, 1] = 1
    mdp = TabularMdp(T, np.array([[1.0], [0.0]]), terminal_states={1})
    assert value_iteration(mdp, 2, 0.0).q[0, 0] == 1.0


def test_self_loop_geometric_sum():
    mdp = TabularMdp(np.ones((1, 1, 1)), np.array([[0.37]]))
    for h in (1, 4, 9):
        assert value_iteration(mdp, h, 0.0).q[0, 0] == pytest.approx(h * 0.37, abs=1e-14)


def test_matches_expectimax_4x3_h4():
    rng = np.random.default_rng(0)
    for _ in range(5):
        mdp = random_mdp(rng, 4, 3, terminal=[3] if rng.random() < 0.5 else [])
        q = value_iteration(mdp, 4, 0.0).q
        oracle = expectimax_q(mdp.transition, mdp.mean_reward, mdp.terminal_mask, 4)
        assert np.abs(q - oracle).max() <= 1e-10


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5), st.integers(1, 3), st.integers(1, 5), st.integers(0, 2**32),
       st.floats(0.0, 0.5))
def test_early_stop_residual_or_exact(S, A, h, seed, tol):
    mdp = random_mdp(np.random.default_rng(seed), S, A)
    qt = value_iteration(mdp, h, tol)
    k = qt.sweeps
    qk = expectimax_q(mdp.transition, mdp.mean_reward, mdp.terminal_mask, k)
    assert np.abs(qt.q - qk).max() <= 1e-10
    if k < h:
        assert qt.residual < tol
        prev = expectimax_q(mdp.transition, mdp.mean_reward, mdp.terminal_mask, k - 1)
        r = bellman_residual(mdp.transition, mdp.mean_reward, mdp.terminal_mask, prev, qt.q)
        assert r <= 1e-10  # qt.q is exactly one backup of the previous iterate
    else:
        assert k == h


def test_horizon_must_be_positive():
    with pytest.raises(ValueError):
        value_iteration(ModelEstimate(2, 2), 0)


def test_fresh_model_gives_zero_q():
    qt = value_iteration(ModelEstimate(3, 2), 5)
    assert not qt.q.any() and not qt.known.any()


# ----------------------------------------------------------------------------- oracle


def test_oracle_bandit():
    mdp = TabularMdp(np.ones((1, 2, 1)), np.array([[0.2, 0.8]]), reward_noise="bernoulli", task_horizon=1)
    assert oracle_solve(mdp, 1)[1] == 0.8


def test_oracle_corridor():
    # 0 -> 1 -> 2 -> 3 (terminal); action 0 advances, action 1 stays with a worse reward
    T = np.zeros((4, 2, 4))
    for s in range(3):
        T[s, 0, s + 1] = 1
        T[s, 1, s] = 1
    T[3, :, 3] = 1
    R = np.array([[-1.0, -5.0], [-2.0, -5.0], [10.0, -5.0], [0.0, 0.0]])
    mdp = TabularMdp(T, R, terminal_states={3})
    assert oracle_solve(mdp, 3)[1] == -1 - 2 + 10


def test_oracle_equals_full_vi_and_expectimax():
    mdp = generate_random_mdp(1.0, np.random.default_rng(8))
    qt, ret = oracle_solve(mdp, 10)
    assert qt.sweeps == 10
    full = value_iteration(mdp, 10, bellman_tol=-1.0)
    assert np.array_equal(qt.q, full.q) and ret == full.q[0].max()
    short = oracle_solve(mdp, 2)[0].q
    np.testing.assert_allclose(short, expectimax_q(mdp.transition, mdp.mean_reward, mdp.terminal_mask, 2),
                               atol=1e-10, rtol=0)


def test_meta_oracle_restarts_episodes():
    bandit = TabularMdp(np.ones((1, 2, 1)), np.array([[0.2, 0.8]]), reward_noise="bernoulli", task_horizon=1)
    assert meta_oracle(bandit, 10)[0] == pytest.approx(8.0, abs=1e-12)
    mdp = generate_random_mdp(1.0, np.random.default_rng(2))
    one = oracle_solve(mdp, 10)[1]
    assert meta_oracle(mdp, 10)[0] == pytest.approx(one, abs=1e-10)
    assert meta_oracle(mdp, 20)[0] == pytest.approx(2 * one, abs=1e-10)
