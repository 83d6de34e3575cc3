"""Exact belief-MDP (BAMDP) solver over small finite task sets.

Observations are (reward, next state) pairs; rewards must have a finite support
(deterministic or Bernoulli). The belief tree is expanded exhaustively with
nodes merged when beliefs agree to 12 decimals.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .envs import TabularMdp
from .tabular_rl import ModelEstimate, value_iteration

MAX_TASKS, MAX_STATES, MAX_HORIZON = 4, 4, 6
MERGE_DECIMALS = 12


class ImpossibleObservation(ValueError):
    pass


class OracleSizeError(ValueError):
    pass


@dataclass
class Belief:
    tasks: list
    weights: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if len(self.weights) != len(self.tasks):
            raise ValueError("one weight per task required")
        if (self.weights < 0).any() or abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError("belief weights must be a probability vector")

    @property
    def support(self) -> np.ndarray:
        return np.flatnonzero(self.weights > 0)


def outcome_distribution(mdp: TabularMdp, s: int, a: int) -> dict[tuple[float, int], float]:
    """P((r, s') | s, a) for a task with discrete rewards."""
    T = mdp.transition[s, a]
    out: dict[tuple[float, int], float] = {}

    def add(r, s2, p):
        if p > 0:
            out[(float(r), int(s2))] = out.get((float(r), int(s2)), 0.0) + p

    for s2 in np.flatnonzero(T > 0):
        if mdp.entry_reward is not None:
            add(mdp.entry_reward[s2], s2, T[s2])
        elif mdp.reward_noise == "bernoulli":
            p = mdp.mean_reward[s, a]
            add(1.0, s2, T[s2] * p)
            add(0.0, s2, T[s2] * (1 - p))
        elif mdp.reward_noise == "none":
            add(mdp.mean_reward[s, a], s2, T[s2])
        else:
            raise ValueError(f"reward noise {mdp.reward_noise!r} has no finite support")
    return out


def observation_likelihood(mdp: TabularMdp, s: int, a: int, r: float, s_next: int) -> float:
    return outcome_distribution(mdp, s, a).get((float(r), int(s_next)), 0.0)


def belief_update(belief: Belief, s: int, a: int, r: float, s_next: int) -> Belief:
    lik = np.array([observation_likelihood(m, s, a, r, s_next) for m in belief.tasks])
    w = belief.weights * lik
    z = w.sum()
    if z <= 0:
        raise ImpossibleObservation(f"observation (r={r}, s'={s_next}) after (s={s}, a={a}) "
                                    "has zero likelihood under every task in the support")
    return Belief(belief.tasks, w / z)


@dataclass
class BamdpNode:
    key: tuple
    state: int
    belief: np.ndarray
    depth: int
    value: float = 0.0
    q: np.ndarray | None = None
    # per action: list of (probability, observation, child key)
    children: list = field(default_factory=list)
    expected_reward: np.ndarray | None = None


@dataclass
class BamdpSolution:
    tasks: list
    prior: np.ndarray
    horizon: int
    gamma: float
    root: tuple
    nodes: dict

    @property
    def value(self) -> float:
        return self.nodes[self.root].value

    def greedy_actions(self, key, tol: float = 1e-12) -> set[int]:
        q = self.nodes[key].q
        return set(np.flatnonzero(q >= q.max() - tol).tolist())


def _key(s: int, depth: int, b: np.ndarray) -> tuple:
    return (s, depth, tuple(np.round(b, MERGE_DECIMALS) + 0.0))


def _check_sizes(tasks, horizon):
    if not tasks:
        raise ValueError("empty task set")
    S, A = tasks[0].num_states, tasks[0].num_actions
    if len(tasks) > MAX_TASKS or S > MAX_STATES or horizon > MAX_HORIZON:
        raise OracleSizeError(f"oracle limited to <= {MAX_TASKS} tasks, <= {MAX_STATES} states and "
                              f"horizon <= {MAX_HORIZON}; got {len(tasks)}, {S}, {horizon}")
    for m in tasks:
        if (m.num_states, m.num_actions) != (S, A):
            raise ValueError("all tasks must share state and action spaces")
        if m.terminal_states:
            raise ValueError("oracle tasks must not have terminal states")
        if m.reward_noise == "normal":
            raise ValueError("Gaussian-reward tasks are excluded from the exact oracle")


def solve_bamdp(tasks: list[TabularMdp], prior, horizon: int, gamma: float = 1.0,
                start_state: int | None = None, max_nodes: int = 500_000) -> BamdpSolution:
    """Backward induction V(b) = max_a [sum_i b(i) R_i(s,a) + gamma sum_obs P(obs|b,a) V(b')]."""
    _check_sizes(tasks, horizon)
    prior = np.asarray(prior, dtype=np.float64)
    Belief(tasks, prior)
    if start_state is None:
        starts = {int(np.argmax(m.start_state_dist)) for m in tasks}
        if len(starts) != 1 or any(m.start_state_dist.max() < 1 for m in tasks):
            raise ValueError("tasks need a common deterministic start state (or pass start_state)")
        start_state = starts.pop()
    A = tasks[0].num_actions
    R = np.stack([m.mean_reward for m in tasks])
    outcomes = [[[outcome_distribution(m, s, a) for a in range(A)] for s in range(m.num_states)]
                for m in tasks]
    nodes: dict = {}

    def expand(s, depth, b):
        key = _key(s, depth, b)
        if key in nodes:
            return key
        if len(nodes) >= max_nodes:
            raise OracleSizeError(f"belief tree exceeds {max_nodes} nodes")
        node = BamdpNode(key, s, b, depth)
        nodes[key] = node
        if depth == horizon:
            node.q = np.zeros(A)
            node.expected_reward = np.zeros(A)
            return key
        node.expected_reward = b @ R[:, s, :]
        q = np.zeros(A)
        for a in range(A):
            joint: dict = {}
            for i in np.flatnonzero(b > 0):
                for obs, p in outcomes[i][s][a].items():
                    joint.setdefault(obs, np.zeros(len(tasks)))[i] = p
            kids = []
            cont = 0.0
            for obs in sorted(joint):
                lik = joint[obs]
                w = b * lik
                z = w.sum()
                child = expand(obs[1], depth + 1, w / z)
                kids.append((z, obs, child))
                cont += z * nodes[child].value
            node.children.append(kids)
            q[a] = node.expected_reward[a] + gamma * cont
        node.q = q
        node.value = float(q.max())
        return key

    root = expand(start_state, 0, prior)
    return BamdpSolution(tasks, prior, horizon, gamma, root, nodes)


def bellman_consistency(sol: BamdpSolution) -> float:
    """Largest |V(node) - max_a [r(a) + gamma sum p V(child)]| over all nodes."""
    worst = 0.0
    for node in sol.nodes.values():
        if node.depth == sol.horizon:
            worst = max(worst, abs(node.value))
            continue
        best = max(node.expected_reward[a] + sol.gamma * sum(p * sol.nodes[c].value for p, _, c in kids)
                   for a, kids in enumerate(node.children))
        worst = max(worst, abs(best - node.value))
    return worst


def object_level_layers(tasks: list[TabularMdp], horizon: int) -> np.ndarray:
    """q[i, h] = optimal h-step Q table of task i (h = 0..horizon)."""
    S, A = tasks[0].num_states, tasks[0].num_actions
    out = np.zeros((len(tasks), horizon + 1, S, A))
    for i, m in enumerate(tasks):
        for h in range(1, horizon + 1):
            out[i, h] = value_iteration(m, h, bellman_tol=0.0).q
    return out


@dataclass
class BoundsReport:
    node_rows: list
    error_rows: list
    eq2_violations: int
    eq4_checked: int
    eq4_violations: int
    greedy_mismatches: int
    max_bellman_error: float
    value: float
    kappa: dict

    @property
    def ok(self) -> bool:
        return self.eq2_violations == 0 and self.eq4_violations == 0 and self.greedy_mismatches == 0

    def nodes_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["state", "depth", "belief", "meta_value", "max_object_value", "bound_gap",
                    "collapsed", "eq4_gap"])
        w.writerows(self.node_rows)
        return buf.getvalue()

    def errors_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["task", "path", "t", "state", "meta_value", "max_q_estimate", "error"])
        w.writerows(self.error_rows)
        return buf.getvalue()

    def text(self) -> str:
        return "\n".join([
            f"root meta-value           : {self.value:.12g}",
            f"nodes                     : {len(self.node_rows)}",
            f"upper-bound violations    : {self.eq2_violations}",
            f"collapsed nodes checked   : {self.eq4_checked}",
            f"collapse-gap violations   : {self.eq4_violations}",
            f"greedy-set mismatches     : {self.greedy_mismatches}",
            f"max Bellman recompute err : {self.max_bellman_error:.3e}",
            f"first |error| < eps (per task, mean over paths): {self.kappa}",
        ])


def _q_equivalent(layers, support, rem, tol=1e-12) -> bool:
    ref = layers[support[0], :rem + 1]
    return all(np.abs(layers[i, :rem + 1] - ref).max() <= tol for i in support[1:])


def verify_bounds(tasks: list[TabularMdp], prior, horizon: int, eps: float = 1e-12,
                  bound_tol: float = 1e-9, max_paths: int = 64, solution: BamdpSolution | None = None,
                  **solve_kwargs) -> BoundsReport:
    """Check the object-level upper bound and belief-collapse equivalence at every node,
    and trace V(b) - max_a Q^t(s, a) along paths generated by the Bayes-optimal policy."""
    sol = solution or solve_bamdp(tasks, prior, horizon, **solve_kwargs)
    layers = object_level_layers(tasks, horizon)
    rows, eq2_bad, eq4_n, eq4_bad, greedy_bad = [], 0, 0, 0, 0
    for node in sol.nodes.values():
        rem = horizon - node.depth
        vmax = float(layers[:, rem, node.state].max(axis=-1).max()) if rem else 0.0
        gap = vmax - node.value
        if gap < -bound_tol:
            eq2_bad += 1
        support = np.flatnonzero(node.belief > 0)
        collapsed = rem > 0 and _q_equivalent(layers, support, rem)
        eq4_gap = ""
        if collapsed:
            eq4_n += 1
            qi = layers[support[0], rem, node.state]
            eq4_gap = abs(qi.max() - node.value)
            if eq4_gap > eps:
                eq4_bad += 1
            obj_greedy = set(np.flatnonzero(qi >= qi.max() - 1e-12).tolist())
            if obj_greedy != sol.greedy_actions(node.key):
                greedy_bad += 1
        rows.append([node.state, node.depth, " ".join(f"{x:.6g}" for x in node.belief),
                     node.value, vmax, gap, collapsed, eq4_gap])
    err_rows, kappa = _error_trajectories(sol, max_paths, eps)
    return BoundsReport(rows, err_rows, eq2_bad, eq4_n, eq4_bad, greedy_bad,
                        bellman_consistency(sol), sol.value, kappa)


def _error_trajectories(sol: BamdpSolution, max_paths: int, eps: float):
    """Follow the Bayes-optimal policy in each true task, enumerating outcomes with
    nonzero probability, and record V(b) - max_a Q^t(s, a) with Q^t from the model estimate."""
    tasks = sol.tasks
    S, A = tasks[0].num_states, tasks[0].num_actions
    rows, kappa = [], {}
    for i, task in enumerate(tasks):
        if sol.prior[i] == 0:
            continue
        paths = [(sol.root, [])]
        finished = []
        while paths:
            key, hist = paths.pop()
            node = sol.nodes[key]
            if node.depth == sol.horizon or len(finished) + len(paths) >= max_paths:
                finished.append(hist + [(key, None, None)])
                continue
            a = min(sol.greedy_actions(key))
            lik = outcome_distribution(task, node.state, a)
            for p, obs, child in node.children[a]:
                if lik.get(obs, 0.0) > 0:
                    paths.append((child, hist + [(key, a, obs)]))
        firsts = []
        for pid, path in enumerate(finished[:max_paths]):
            model = ModelEstimate(S, A)
            first = None
            for t, (key, a, obs) in enumerate(path):
                node = sol.nodes[key]
                rem = sol.horizon - node.depth
                qhat = value_iteration(model, rem, bellman_tol=0.0).q[node.state].max() if rem > 0 else 0.0
                err = node.value - qhat
                rows.append([i, pid, t, node.state, node.value, qhat, err])
                if first is None and abs(err) < eps:
                    first = t
                if a is not None:
                    model.update(node.state, a, obs[0], obs[1], False)
            firsts.append(sol.horizon if first is None else first)
        kappa[i] = float(np.mean(firsts)) if firsts else float("nan")
    return rows, kappa


def random_task_set(rng: np.random.Generator, n_tasks: int = 2, n_states: int = 2, n_actions: int = 2,
                    reward_kind: str | None = None) -> list[TabularMdp]:
    """Small random tasks with sparse transitions and finite reward supports."""
    tasks = []
    kind = reward_kind or ("bernoulli" if rng.random() < 0.5 else "none")
    for _ in range(n_tasks):
        T = np.zeros((n_states, n_actions, n_states))
        for s in range(n_states):
            for a in range(n_actions):
                k = int(rng.integers(1, min(2, n_states) + 1))
                nxt = rng.choice(n_states, size=k, replace=False)
                T[s, a, nxt] = rng.dirichlet(np.ones(k))
                T[s, a] /= T[s, a].sum()
        if kind == "bernoulli":
            R = rng.choice([0.0, 0.25, 0.5, 0.75, 1.0], size=(n_states, n_actions))
        else:
            R = rng.integers(-2, 3, size=(n_states, n_actions)).astype(float)
        tasks.append(TabularMdp(transition=T, mean_reward=R, reward_noise=kind,
                                task_horizon=None, info={"family": "oracle"}))
    return tasks
