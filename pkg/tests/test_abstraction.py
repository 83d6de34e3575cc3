import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rl3lab.abstraction import (StateAbstraction, abstract_q_lookup, assign_abstract, grid_manhattan,
                                identity_distance)
from rl3lab.envs import TaskDistributionSpec
from rl3lab.vamdp import VamdpEnv

N = 13


def cell(r, c):
    return r * N + c


def test_neighbours_share_then_cluster_fills():
    ab = StateAbstraction(grid_manhattan(N))
    a = assign_abstract(ab, cell(0, 0))
    assert assign_abstract(ab, cell(0, 1)) == a
    assert assign_abstract(ab, cell(0, 2)) != a
    assert ab.num_abstract == 2


def test_far_cells_distinct():
    ab = StateAbstraction(grid_manhattan(N))
    assert assign_abstract(ab, cell(0, 0)) != assign_abstract(ab, cell(5, 5))


def test_reassignment_is_stable():
    ab = StateAbstraction(grid_manhattan(N))
    first = ab.assign(cell(3, 3))
    ab.assign(cell(3, 4))
    assert ab.assign(cell(3, 3)) == first and ab.num_abstract == 1


def test_tie_goes_to_earliest_visited():
    ab = StateAbstraction(grid_manhattan(N), max_cluster_size=3)
    ab.assign(cell(2, 1))
    ab.assign(cell(5, 5))
    ab.assign(cell(2, 3))
    # (2,2) is at distance 1 from (2,1) and (2,3); (2,1) was visited first
    assert ab.assign(cell(2, 2)) == ab.lookup(cell(2, 1))


def test_clustered_cells_share_q():
    ab = StateAbstraction(grid_manhattan(N))
    ab.assign(cell(1, 1))
    ab.assign(cell(1, 2))
    q = np.arange(N * N * 5, dtype=float).reshape(N * N, 5)
    np.testing.assert_array_equal(abstract_q_lookup(ab, q, cell(1, 1)), abstract_q_lookup(ab, q, cell(1, 2)))


def test_lookup_unknown_state():
    with pytest.raises(KeyError, match="not been assigned"):
        StateAbstraction(grid_manhattan(N)).lookup(3)


def test_identity_metric_never_clusters():
    ab = StateAbstraction(identity_distance, radius=1)
    assert [ab.assign(s) for s in range(5)] == list(range(5))
    assert identity_distance(2, 3) == math.inf


@settings(max_examples=80, deadline=None)
@given(st.lists(st.integers(0, N * N - 1), min_size=1, max_size=120))
def test_cluster_count_bounds_and_determinism(visits):
    a, b = StateAbstraction(grid_manhattan(N)), StateAbstraction(grid_manhattan(N))
    for s in visits:
        a.assign(s)
        b.assign(s)
    V = len(set(visits))
    assert math.ceil(V / 2) <= a.num_abstract <= V
    assert a.dump() == b.dump()
    assert max(a.cluster_sizes.values()) <= 2


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, N * N - 1), min_size=1, max_size=60))
def test_radius_zero_is_identity(visits):
    ab = StateAbstraction(grid_manhattan(N), radius=0)
    assert all(ab.assign(s) == s for s in visits)


def test_radius_zero_coarse_q_equals_concrete_q():
    mdp = TaskDistributionSpec.make("gridworld", size=7).sample(4)
    plain = VamdpEnv(mdp, 80, np.random.default_rng(9))
    coarse = VamdpEnv(mdp, 80, np.random.default_rng(9), abstraction="grid", clustering_radius=0)
    o1, o2 = plain.reset(), coarse.reset()
    actions = np.random.default_rng(2).integers(5, size=80)
    for a in actions:
        assert o1.tobytes() == o2.tobytes()
        o1, o2 = plain.step(int(a))[1], coarse.step(int(a))[1]
        assert plain.q.tobytes() == coarse.q.tobytes()
        assert plain.qtable.q.tobytes() == coarse.qtable.q.tobytes()


def test_coarse_model_runs_over_abstract_states():
    mdp = TaskDistributionSpec.make("gridworld", size=7).sample(4)
    env = VamdpEnv(mdp, 150, np.random.default_rng(1), abstraction="grid")
    env.reset()
    rng = np.random.default_rng(3)
    while not env.meta_done:
        env.step(int(rng.integers(5)))
    visited = len(env.abstraction.assignment)
    assert env.model.visited.sum() == env.abstraction.num_abstract
    assert math.ceil(visited / 2) <= env.abstraction.num_abstract < visited
    # every concrete state reads the Q row of its cluster
    for s, a in env.abstraction.dump():
        np.testing.assert_array_equal(env.q[s], env.qtable.q[a])
