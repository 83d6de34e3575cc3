"""Meta-episode wrappers: the RL2 history observation and the value-augmented (VAMDP) observation.

Observation layouts (version 1)::

    rl2    : one_hot(s) | one_hot(prev a) | prev r | t_tau / horizon | t / H
    rl3    : rl2 fields | advantages (k) | state value | counts (k)
    markov : the augmented observation itself,
             one_hot(s) | advantages (k) | state value | counts (k) | t_tau / horizon | t / H

With ``q_layout="raw_q"`` the advantages/value block is replaced by Q(s, .) and a zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .abstraction import StateAbstraction, grid_manhattan, identity_distance
from .envs import TabularMdp, TaskEnv
from .tabular_rl import BELLMAN_TOL, ModelEstimate, QTable, value_iteration

OBS_LAYOUT_VERSION = 1


@dataclass(frozen=True)
class FamilyScale:
    reward_lo: float
    reward_hi: float
    value_scale: float


# Min-max range for the previous-reward input and the divisor applied to Q-derived inputs.
FAMILY_SCALES = {
    "bandits": FamilyScale(0.0, 1.0, 1.0),
    "random_mdps": FamilyScale(-3.0, 5.0, 30.0),
    "gridworld": FamilyScale(-100.0, 0.0, 100.0),
}


def family_scale(mdp: TabularMdp) -> FamilyScale:
    return FAMILY_SCALES.get(mdp.info.get("family", ""), FamilyScale(-1.0, 1.0, 1.0))


class MetaEpisodeError(RuntimeError):
    pass


@dataclass
class AugmentedObservation:
    one_hot_state: np.ndarray
    advantages: np.ndarray
    state_value: float
    action_counts: np.ndarray
    episode_time: float
    meta_time: float

    @property
    def dim(self) -> int:
        return self.one_hot_state.size + 2 * self.advantages.size + 3

    def vector(self) -> np.ndarray:
        return np.concatenate([self.one_hot_state, self.advantages, [self.state_value],
                               self.action_counts, [self.episode_time, self.meta_time]])


class MetaEnv:
    """One meta-episode of ``budget`` steps on a task; inner episodes restart automatically."""

    def __init__(self, mdp: TabularMdp, budget: int, rng: np.random.Generator,
                 scale: FamilyScale | None = None):
        if budget < 1:
            raise ValueError("budget must be >= 1")
        self.mdp = mdp
        self.budget = budget
        self.env = TaskEnv(mdp, rng)
        self.scale = scale or family_scale(mdp)
        self.k = mdp.num_actions
        self.num_states = mdp.num_states
        self.episode_len = mdp.task_horizon or budget
        self.t = 0
        self.t_tau = 0
        self.prev_action = -1
        self.prev_reward = 0.0
        self.state = 0

    @property
    def meta_done(self) -> bool:
        return self.t >= self.budget

    def _reset_counters(self):
        self.t = 0
        self.t_tau = 0
        self.prev_action = -1
        self.prev_reward = 0.0

    def reset(self) -> np.ndarray:
        self._reset_counters()
        self.state = self.env.reset()
        self._on_new_state(self.state)
        return self.observe()

    def _on_new_state(self, s: int) -> None:
        pass

    def _learn(self, s, a, r, s_next, terminal) -> None:
        pass

    def step(self, a: int) -> tuple[float, np.ndarray, bool]:
        if self.meta_done:
            raise MetaEpisodeError(f"meta-episode already used its budget of {self.budget} steps")
        s = self.state
        r, s_next, done = self.env.step(int(a))
        self.t += 1
        self.t_tau += 1
        self._on_new_state(s_next)
        self._learn(s, int(a), r, s_next, self.env.at_terminal)
        if done or self.t_tau >= self.episode_len:
            self.t_tau = 0
            s_next = self.env.reset()
            self._on_new_state(s_next)
        self.state = s_next
        self.prev_action = int(a)
        self.prev_reward = r
        return r, self.observe(), self.meta_done

    # observation pieces
    def one_hot(self) -> np.ndarray:
        v = np.zeros(self.num_states)
        v[self.state] = 1.0
        return v

    def history_fields(self) -> np.ndarray:
        pa = np.zeros(self.k)
        if self.prev_action >= 0:
            pa[self.prev_action] = 1.0
        lo, hi = self.scale.reward_lo, self.scale.reward_hi
        pr = 0.0 if self.prev_action < 0 else float(np.clip((self.prev_reward - lo) / (hi - lo), 0.0, 1.0))
        return np.concatenate([pa, [pr]])

    def time_fields(self) -> np.ndarray:
        return np.array([self.t_tau / self.episode_len, self.t / self.budget])

    def rl2_fields(self) -> np.ndarray:
        return np.concatenate([self.one_hot(), self.history_fields(), self.time_fields()])

    def observe(self) -> np.ndarray:
        return self.rl2_fields()

    @property
    def obs_dim(self) -> int:
        return self.num_states + self.k + 3


Rl2Env = MetaEnv


def rl2_wrap(env: MetaEnv) -> np.ndarray:
    return env.rl2_fields()


class VamdpEnv(MetaEnv):
    """Value-augmenting wrapper: Q-estimates and counts persist across inner episodes.

    ``view`` selects the policy input: ``"rl3"`` (history + augmentation) or
    ``"markov"`` (augmentation only). ``abstraction`` enables RL3-coarse:
    the model and value iteration run over abstract states while counts and the
    one-hot state stay concrete. ``true_model=True`` replaces the estimate by
    value iteration on the task itself.
    """

    def __init__(self, mdp: TabularMdp, budget: int, rng: np.random.Generator,
                 scale: FamilyScale | None = None, view: str = "rl3", q_layout: str = "advantage",
                 abstraction: str | None = None, clustering_radius: float = 1,
                 max_cluster_size: int = 2, bellman_tol: float = BELLMAN_TOL,
                 true_model: bool = False):
        super().__init__(mdp, budget, rng, scale)
        if view not in ("rl3", "markov"):
            raise ValueError(f"unknown view {view!r}")
        if q_layout not in ("advantage", "raw_q"):
            raise ValueError(f"unknown q_layout {q_layout!r}")
        self.view = view
        self.q_layout = q_layout
        self.abstraction_kind = abstraction
        self.clustering_radius = clustering_radius
        self.max_cluster_size = max_cluster_size
        self.bellman_tol = bellman_tol
        self.true_model = true_model
        self.vi_horizon = mdp.task_horizon or budget
        self._fresh()

    def _fresh(self):
        S, k = self.num_states, self.k
        self.model = ModelEstimate(S, k)
        self.q = np.zeros((S, k))
        self.n = np.zeros((S, k), dtype=np.int64)
        self.qtable = QTable(np.zeros((S, k)), np.zeros(S, dtype=bool))
        self.abstraction = None
        if self.abstraction_kind == "grid":
            size = self.mdp.info["size"]
            self.abstraction = StateAbstraction(grid_manhattan(size), self.clustering_radius,
                                                self.max_cluster_size)
        elif self.abstraction_kind == "identity":
            self.abstraction = StateAbstraction(identity_distance, 0, self.max_cluster_size)
        elif self.abstraction_kind is not None:
            raise ValueError(f"unknown abstraction {self.abstraction_kind!r}")
        if self.true_model:
            self.qtable = value_iteration(self.mdp, self.vi_horizon, self.bellman_tol)
            self.q = self.qtable.q.copy()

    def reset(self) -> np.ndarray:
        self._fresh()
        return super().reset()

    def _on_new_state(self, s: int) -> None:
        if self.abstraction is not None:
            self.abstraction.assign(s)

    def _abs(self, s: int) -> int:
        return s if self.abstraction is None else self.abstraction.lookup(s)

    def _learn(self, s, a, r, s_next, terminal) -> None:
        self.n[s, a] += 1
        if self.true_model:
            return
        self.model.update(self._abs(s), a, r, self._abs(s_next), terminal)
        self.qtable = value_iteration(self.model, self.vi_horizon, self.bellman_tol)
        q = self.qtable.q
        if self.abstraction is None:
            self.q = q
        else:
            self.q = q[[self.abstraction.assignment.get(x, x) for x in range(self.num_states)]]

    def q_row(self, s: int | None = None) -> np.ndarray:
        return self.q[self.state if s is None else s]

    def augmented(self) -> AugmentedObservation:
        qs = self.q_row()
        v = float(qs.max())
        if self.q_layout == "advantage":
            adv, val = qs - v, v
        else:
            adv, val = qs.copy(), 0.0
        vs = self.scale.value_scale
        return AugmentedObservation(
            one_hot_state=self.one_hot(),
            advantages=adv / vs,
            state_value=val / vs,
            action_counts=self.n[self.state] / (1.0 + self.t),
            episode_time=self.t_tau / self.episode_len,
            meta_time=self.t / self.budget,
        )

    def augmentation_fields(self) -> np.ndarray:
        aug = self.augmented()
        return np.concatenate([aug.advantages, [aug.state_value], aug.action_counts])

    def observe(self) -> np.ndarray:
        if self.view == "markov":
            return self.augmented().vector()
        return np.concatenate([self.rl2_fields(), self.augmentation_fields()])

    @property
    def obs_dim(self) -> int:
        if self.view == "markov":
            return self.num_states + 2 * self.k + 3
        return self.num_states + 3 * self.k + 4


def vamdp_reset(venv: VamdpEnv) -> AugmentedObservation:
    venv.reset()
    return venv.augmented()


def vamdp_step(venv: VamdpEnv, a: int) -> tuple[float, AugmentedObservation, bool]:
    r, _, done = venv.step(a)
    return r, venv.augmented(), done


def make_meta_env(algorithm: str, mdp: TabularMdp, budget: int, rng: np.random.Generator,
                  **kwargs) -> MetaEnv:
    if algorithm == "rl2":
        return MetaEnv(mdp, budget, rng)
    if algorithm == "rl3":
        return VamdpEnv(mdp, budget, rng, **kwargs)
    if algorithm == "rl3_markov":
        return VamdpEnv(mdp, budget, rng, view="markov", **kwargs)
    if algorithm == "rl3_coarse":
        kwargs.setdefault("abstraction", "grid" if "size" in mdp.info else "identity")
        return VamdpEnv(mdp, budget, rng, **kwargs)
    raise ValueError(f"unknown algorithm {algorithm!r}")


def obs_dim_for(algorithm: str, num_states: int, num_actions: int) -> int:
    if algorithm == "rl2":
        return num_states + num_actions + 3
    if algorithm == "rl3_markov":
        return num_states + 2 * num_actions + 3
    return num_states + 3 * num_actions + 4
