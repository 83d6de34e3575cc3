"""Object-level RL: incremental model estimation and finite-horizon value iteration (gamma = 1)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .envs import TabularMdp
from .kernels import finite_horizon_vi

LAPLACE_COEFF = 0.1
BELLMAN_TOL = 0.01


def _grow_partials(partials: list, x: float) -> None:
    # Shewchuk expansion: the partials represent the running sum exactly.
    i = 0
    for y in partials:
        if abs(x) < abs(y):
            x, y = y, x
        hi = x + y
        lo = y - (hi - x)
        if lo:
            partials[i] = lo
            i += 1
        x = hi
    partials[i:] = [x]


@dataclass
class QTable:
    q: np.ndarray
    known: np.ndarray
    sweeps: int = 0
    residual: float = 0.0

    def values(self) -> np.ndarray:
        return self.q.max(axis=1)

    def to_dict(self) -> dict:
        return {"q": self.q.tolist(), "known": self.known.tolist(),
                "sweeps": self.sweeps, "residual": self.residual}

    @classmethod
    def from_dict(cls, d: dict) -> "QTable":
        return cls(np.asarray(d["q"], dtype=np.float64), np.asarray(d["known"], dtype=bool),
                   d["sweeps"], d["residual"])


@dataclass
class ModelEstimate:
    """Maximum-likelihood transition/reward statistics over the states seen so far.

    Reward sums are kept as exact floating-point expansions so the estimate does
    not depend on the order in which transitions arrive.
    """

    num_states: int
    num_actions: int
    laplace_coeff: float = LAPLACE_COEFF
    transition_counts: np.ndarray = field(init=False)
    sa_counts: np.ndarray = field(init=False)
    reward_sum: np.ndarray = field(init=False)
    visited: np.ndarray = field(init=False)
    terminal: np.ndarray = field(init=False)

    def __post_init__(self):
        S, A = self.num_states, self.num_actions
        self.transition_counts = np.zeros((S, A, S), dtype=np.int64)
        self.sa_counts = np.zeros((S, A), dtype=np.int64)
        self.reward_sum = np.zeros((S, A))
        self.visited = np.zeros(S, dtype=bool)
        self.terminal = np.zeros(S, dtype=bool)
        self._partials: dict[tuple[int, int], list] = {}

    def update(self, s: int, a: int, r: float, s_next: int, done: bool = False) -> "ModelEstimate":
        """Record one transition. ``done`` marks ``s_next`` as a terminal (absorbing, value 0) state."""
        self.transition_counts[s, a, s_next] += 1
        self.sa_counts[s, a] += 1
        parts = self._partials.setdefault((s, a), [])
        _grow_partials(parts, float(r))
        self.reward_sum[s, a] = math.fsum(parts)
        self.visited[s] = True
        self.visited[s_next] = True
        if done:
            self.terminal[s_next] = True
        return self

    def visited_states(self) -> np.ndarray:
        return np.flatnonzero(self.visited)

    def mean_reward(self, s: int, a: int) -> float:
        n = self.sa_counts[s, a]
        return float(self.reward_sum[s, a] / n) if n else 0.0

    def transition_row(self, s: int, a: int) -> np.ndarray:
        """Smoothed next-state distribution over ``visited_states()`` (ascending index)."""
        idx = self.visited_states()
        c = self.laplace_coeff
        counts = self.transition_counts[s, a, idx]
        return (counts + c) / (self.sa_counts[s, a] + c * idx.size)

    def build(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Return (visited indices, T_hat, R_hat, terminal) restricted to visited states."""
        idx = self.visited_states()
        c = self.laplace_coeff
        C = self.transition_counts[idx][:, :, idx]
        n = self.sa_counts[idx]
        T = (C + c) / (n + c * idx.size)[:, :, None]
        safe = np.where(n > 0, n, 1)
        R = np.where(n > 0, self.reward_sum[idx] / safe, 0.0)
        return idx, np.ascontiguousarray(T), np.ascontiguousarray(R), self.terminal[idx]

    def same_as(self, other: "ModelEstimate") -> bool:
        return all(np.array_equal(getattr(self, f), getattr(other, f)) for f in
                   ("transition_counts", "sa_counts", "reward_sum", "visited", "terminal"))

    def to_dict(self) -> dict:
        return {"num_states": self.num_states, "num_actions": self.num_actions,
                "laplace_coeff": self.laplace_coeff,
                "transition_counts": self.transition_counts.tolist(),
                "sa_counts": self.sa_counts.tolist(), "reward_sum": self.reward_sum.tolist(),
                "visited": self.visited.tolist(), "terminal": self.terminal.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelEstimate":
        m = cls(d["num_states"], d["num_actions"], d["laplace_coeff"])
        m.transition_counts = np.asarray(d["transition_counts"], dtype=np.int64)
        m.sa_counts = np.asarray(d["sa_counts"], dtype=np.int64)
        m.reward_sum = np.asarray(d["reward_sum"], dtype=np.float64)
        m.visited = np.asarray(d["visited"], dtype=bool)
        m.terminal = np.asarray(d["terminal"], dtype=bool)
        # the exact expansion is not serialized; the rounded sum seeds a fresh one
        m._partials = {(int(s), int(a)): [float(m.reward_sum[s, a])]
                       for s, a in zip(*np.nonzero(m.sa_counts))}
        return m


def model_update(model: ModelEstimate, s: int, a: int, r: float, s_next: int, done: bool) -> ModelEstimate:
    return model.update(s, a, r, s_next, done)


def estimate_transition_row(model: ModelEstimate, s: int, a: int) -> np.ndarray:
    return model.transition_row(s, a)


def solve_arrays(T, R, terminal, horizon: int, bellman_tol: float = BELLMAN_TOL):
    T = np.ascontiguousarray(T, dtype=np.float64)
    R = np.ascontiguousarray(R, dtype=np.float64)
    term = np.ascontiguousarray(terminal, dtype=np.uint8)
    return finite_horizon_vi(T, R, term, int(horizon), float(bellman_tol))


def value_iteration(source: ModelEstimate | TabularMdp, horizon: int,
                    bellman_tol: float = BELLMAN_TOL) -> QTable:
    """At most ``horizon`` synchronous Bellman sweeps; stops once the max change drops below the tolerance."""
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    if isinstance(source, TabularMdp):
        Q, sweeps, res = solve_arrays(source.transition, source.mean_reward, source.terminal_mask,
                                      horizon, bellman_tol)
        return QTable(Q, np.ones(source.num_states, dtype=bool), sweeps, res)
    S, A = source.num_states, source.num_actions
    q = np.zeros((S, A))
    known = source.visited.copy()
    idx, T, R, term = source.build()
    if idx.size == 0:
        return QTable(q, known)
    Qv, sweeps, res = solve_arrays(T, R, term, horizon, bellman_tol)
    q[idx] = Qv
    return QTable(q, known, sweeps, res)


def bellman_residual(mdp_T, mdp_R, terminal, q_prev: np.ndarray, q: np.ndarray) -> float:
    """max |B(q_prev) - q| for a finite-horizon backup."""
    live = ~np.asarray(terminal, dtype=bool)
    backed = np.zeros_like(q)
    backed[live] = mdp_R[live] + mdp_T[live] @ q_prev.max(axis=1)
    return float(np.abs(backed - q).max())


def oracle_solve(mdp: TabularMdp, horizon: int) -> tuple[QTable, float]:
    """Exact ``horizon``-step optimal Q on the true model and the optimal return from the start distribution."""
    qt = value_iteration(mdp, horizon, bellman_tol=0.0)
    return qt, float(mdp.start_state_dist @ qt.values())


def _reset_augmented(mdp: TabularMdp):
    """Continuing process in which finished episodes restart from the start distribution.

    Bounded task horizons add the within-episode step to the state: index = tau * S + s.
    """
    S, A = mdp.num_states, mdp.num_actions
    T, R, start = mdp.transition, mdp.mean_reward, mdp.start_state_dist
    term = mdp.terminal_mask
    K = mdp.task_horizon or 1
    bounded = mdp.task_horizon is not None
    X = K * S
    Tx = np.zeros((X, A, X))
    Rx = np.zeros((X, A))
    for tau in range(K):
        block = slice(tau * S, (tau + 1) * S)
        Rx[block] = R
        last = bounded and tau + 1 >= K
        for s in range(S):
            for a in range(A):
                row = T[s, a]
                restart = row.copy() if last else row * term
                cont = np.zeros(S) if last else row * ~term
                nxt = (tau + 1) * S if bounded else 0
                Tx[tau * S + s, a, :S] += restart.sum() * start
                if cont.any():
                    Tx[tau * S + s, a, nxt:nxt + S] += cont
    start_x = np.zeros(X)
    start_x[:S] = start
    return Tx, Rx, start_x


def meta_oracle(mdp: TabularMdp, budget: int):
    """Optimal expected return over a ``budget``-step meta-episode with known task.

    Returns ``(value, q_layers, K)``; ``q_layers[h]`` is Q with ``h`` steps left over the
    reset-augmented state ``tau * S + s`` (``K`` within-episode slots).
    """
    Tx, Rx, start_x = _reset_augmented(mdp)
    X, A = Rx.shape
    layers = np.zeros((budget + 1, X, A))
    V = np.zeros(X)
    for h in range(1, budget + 1):
        layers[h] = Rx + Tx @ V
        V = layers[h].max(axis=1)
    return float(start_x @ V), layers, (mdp.task_horizon or 1)
