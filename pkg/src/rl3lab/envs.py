"""Task distributions (Bernoulli bandits, random MDPs, GridWorlds) and a sampling runtime."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import binfmt

REWARD_NOISE = ("none", "normal", "bernoulli")


@dataclass(eq=False)
class TabularMdp:
    """Ground-truth finite MDP.

    ``entry_reward`` (optional, length ``num_states``) switches the reward to
    "reward for entering the next state": the sampled reward is
    ``entry_reward[s_next]`` and ``mean_reward`` holds its expectation.
    ``task_horizon=None`` means episodes only end at terminal states.
    """

    transition: np.ndarray
    mean_reward: np.ndarray
    reward_noise: str = "none"
    start_state_dist: np.ndarray | None = None
    task_horizon: int | None = None
    terminal_states: frozenset = frozenset()
    entry_reward: np.ndarray | None = None
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.transition = np.asarray(self.transition, dtype=np.float64)
        self.mean_reward = np.asarray(self.mean_reward, dtype=np.float64)
        S, A = self.mean_reward.shape
        if self.transition.shape != (S, A, S):
            raise ValueError(f"transition shape {self.transition.shape} != {(S, A, S)}")
        if self.start_state_dist is None:
            self.start_state_dist = np.eye(S)[0]
        self.start_state_dist = np.asarray(self.start_state_dist, dtype=np.float64)
        self.terminal_states = frozenset(int(s) for s in self.terminal_states)
        if self.entry_reward is not None:
            self.entry_reward = np.asarray(self.entry_reward, dtype=np.float64)
        self.validate()

    @property
    def num_states(self) -> int:
        return self.mean_reward.shape[0]

    @property
    def num_actions(self) -> int:
        return self.mean_reward.shape[1]

    @property
    def terminal_mask(self) -> np.ndarray:
        m = np.zeros(self.num_states, dtype=bool)
        m[list(self.terminal_states)] = True
        return m

    def validate(self) -> None:
        T = self.transition
        if (T < 0).any():
            raise ValueError("negative transition probability")
        if np.abs(T.sum(axis=2) - 1.0).max() > 1e-9:
            raise ValueError("transition rows must sum to 1")
        if abs(self.start_state_dist.sum() - 1.0) > 1e-9 or (self.start_state_dist < 0).any():
            raise ValueError("start_state_dist must be a probability vector")
        if self.task_horizon is not None and self.task_horizon < 1:
            raise ValueError("task_horizon must be >= 1")
        if self.reward_noise not in REWARD_NOISE:
            raise ValueError(f"unknown reward_noise {self.reward_noise!r}")
        if self.reward_noise == "bernoulli" and ((self.mean_reward < 0) | (self.mean_reward > 1)).any():
            raise ValueError("Bernoulli mean rewards must lie in [0, 1]")

    def same_as(self, other: "TabularMdp") -> bool:
        """Bitwise equality of every array and scalar field."""
        def eq(x, y):
            if x is None or y is None:
                return x is y
            return x.shape == y.shape and x.dtype == y.dtype and x.tobytes() == y.tobytes()

        return (
            eq(self.transition, other.transition)
            and eq(self.mean_reward, other.mean_reward)
            and eq(self.start_state_dist, other.start_state_dist)
            and eq(self.entry_reward, other.entry_reward)
            and self.reward_noise == other.reward_noise
            and self.task_horizon == other.task_horizon
            and self.terminal_states == other.terminal_states
        )


# --------------------------------------------------------------------------- generators


def generate_bandit(k: int, ood: bool, rng: np.random.Generator) -> TabularMdp:
    if k < 2:
        raise ValueError("a bandit needs at least 2 arms")
    if ood:
        p = np.clip(rng.normal(0.5, 0.5, size=k), 0.0, 1.0)
    else:
        p = rng.uniform(0.0, 1.0, size=k)
    return TabularMdp(
        transition=np.ones((1, k, 1)),
        mean_reward=p[None, :],
        reward_noise="bernoulli",
        task_horizon=1,
        info={"family": "bandits", "ood": bool(ood)},
    )


def generate_random_mdp(alpha: float, rng: np.random.Generator, num_states: int = 10,
                        num_actions: int = 5, task_horizon: int = 10, reward_std: float = 1.0,
                        reward_noise: str = "normal") -> TabularMdp:
    if alpha <= 0:
        raise ValueError("Dirichlet concentration must be positive")
    R = rng.normal(1.0, reward_std, size=(num_states, num_actions))
    T = rng.dirichlet(np.full(num_states, alpha), size=(num_states, num_actions))
    # Dirichlet draws can be off by a few ulps; keep rows exact probability vectors.
    T /= T.sum(axis=2, keepdims=True)
    return TabularMdp(
        transition=T,
        mean_reward=R,
        reward_noise=reward_noise,
        task_horizon=task_horizon,
        info={"family": "random_mdps", "alpha": float(alpha)},
    )


# GridWorld tiles
NORMAL, OBSTACLE, WET, WARNING, DANGER, GOAL = range(6)
TILE_CHARS = {NORMAL: ".", OBSTACLE: "#", WET: "W", WARNING: "!", DANGER: "X", GOAL: "G"}
TILE_REWARD = {NORMAL: -1.0, WET: -2.0, WARNING: -10.0, DANGER: -100.0}
# up, down, left, right, stay
MOVES = ((-1, 0), (1, 0), (0, -1), (0, 1), (0, 0))

GRID_VARIANTS = ("canonical", "dense", "deterministic", "watery", "dangerous", "corner")

# Named windows for the 100-step optimal-return filter.
SOLVABILITY_FILTERS = {
    "literal": (50.0, 100.0),
    "sign_flipped": (-100.0, -50.0),
    "reachable": None,
}


@dataclass(frozen=True)
class GridParams:
    size: int = 13
    num_obstacle_sets: int = 11
    obstacle_set_len: int = 3
    num_water_sets: int = 5
    water_set_length: int = 2
    num_dangers: int = 2
    min_goal_manhat: int = 8
    slip_prob: float = 0.2
    goal_reward: float = 0.0
    filter_horizon: int = 100
    solvability_filter: str = "reachable"
    min_goal_prob: float = 0.5
    max_attempts: int = 1000

    @classmethod
    def for_variant(cls, size: int, variant: str = "canonical", **overrides) -> "GridParams":
        if variant not in GRID_VARIANTS:
            raise ValueError(f"unknown gridworld variant {variant!r}; expected one of {GRID_VARIANTS}")
        if size == 7:
            # non-standard mini grid for desk-scale runs
            base = dict(size=7, num_obstacle_sets=3, obstacle_set_len=2, num_water_sets=2,
                        water_set_length=2, num_dangers=1, min_goal_manhat=4)
            changes = {"dense": {"obstacle_set_len": 3}, "watery": {"num_water_sets": 4},
                       "dangerous": {"num_dangers": 2}, "corner": {"min_goal_manhat": 6}}
        elif size in (11, 13):
            base = dict(size=size)
            changes = {"dense": {"obstacle_set_len": 4}, "watery": {"num_water_sets": 8},
                       "dangerous": {"num_dangers": 4}, "corner": {"min_goal_manhat": size - 1}}
        else:
            raise ValueError(f"unsupported grid size {size}; expected 7 (mini), 11 or 13")
        changes["deterministic"] = {"slip_prob": 0.0}
        base.update(changes.get(variant, {}))
        base.update(overrides)
        return cls(**base)


class GenerationError(RuntimeError):
    pass


def _place_segments(tiles, rng, count, length, tile, start):
    n = tiles.shape[0]
    placed = 0
    for _ in range(200 * max(count, 1)):
        if placed == count:
            return True
        horizontal = rng.random() < 0.5
        if horizontal:
            r, c = rng.integers(0, n), rng.integers(0, n - length + 1)
            cells = [(r, c + i) for i in range(length)]
        else:
            r, c = rng.integers(0, n - length + 1), rng.integers(0, n)
            cells = [(r + i, c) for i in range(length)]
        if any(tiles[x] != NORMAL or x == start for x in cells):
            continue
        for x in cells:
            tiles[x] = tile
        placed += 1
    return placed == count


def _place_dangers(tiles, rng, count, start):
    n = tiles.shape[0]
    placed = 0
    for _ in range(200 * max(count, 1)):
        if placed == count:
            return True
        r, c = int(rng.integers(0, n)), int(rng.integers(0, n))
        # keep the start tile off the warning ring
        if tiles[r, c] != NORMAL or abs(r - start[0]) + abs(c - start[1]) < 2:
            continue
        tiles[r, c] = DANGER
        for dr, dc in MOVES[:4]:
            rr, cc = r + dr, c + dc
            if 0 <= rr < n and 0 <= cc < n and tiles[rr, cc] == NORMAL:
                tiles[rr, cc] = WARNING
        placed += 1
    return placed == count


def _grid_layout(params: GridParams, rng: np.random.Generator):
    n = params.size
    start = (n // 2, n // 2)
    tiles = np.full((n, n), NORMAL, dtype=np.int8)
    if not _place_segments(tiles, rng, params.num_obstacle_sets, params.obstacle_set_len, OBSTACLE, start):
        return None
    if not _place_segments(tiles, rng, params.num_water_sets, params.water_set_length, WET, start):
        return None
    if not _place_dangers(tiles, rng, params.num_dangers, start):
        return None
    rr, cc = np.indices((n, n))
    manhat = np.abs(rr - start[0]) + np.abs(cc - start[1])
    candidates = np.flatnonzero((tiles == NORMAL) & (manhat >= params.min_goal_manhat))
    if candidates.size == 0:
        return None
    g = int(rng.choice(candidates))
    tiles.flat[g] = GOAL
    return tiles, start


def gridworld_from_tiles(tiles: np.ndarray, start: tuple[int, int], slip_prob: float = 0.2,
                         goal_reward: float = 0.0) -> TabularMdp:
    """Build the MDP of a tile layout. Moves off-grid or into obstacles keep the agent in place."""
    n = tiles.shape[0]
    S, A = n * n, len(MOVES)
    T = np.zeros((S, A, S))
    entry = np.array([goal_reward if t == GOAL else TILE_REWARD.get(int(t), 0.0) for t in tiles.flat])
    terminal = {int(i) for i in np.flatnonzero((tiles.ravel() == GOAL) | (tiles.ravel() == DANGER))}

    def dest(r, c, move):
        rr, cc = r + move[0], c + move[1]
        if 0 <= rr < n and 0 <= cc < n and tiles[rr, cc] != OBSTACLE:
            return rr * n + cc
        return r * n + c

    for r in range(n):
        for c in range(n):
            s = r * n + c
            if s in terminal or tiles[r, c] == OBSTACLE:
                T[s, :, s] = 1.0
                continue
            slip = 1.0 if tiles[r, c] == WET else slip_prob
            for a, (dr, dc) in enumerate(MOVES):
                if (dr, dc) == (0, 0):
                    T[s, a, s] = 1.0
                    continue
                T[s, a, dest(r, c, (dr, dc))] += 1.0 - slip
                for orth in ((dc, dr), (-dc, -dr)):
                    T[s, a, dest(r, c, orth)] += slip / 2
    R = T @ entry
    nonterm = np.ones(S, dtype=bool)
    nonterm[list(terminal)] = False
    R[~nonterm] = 0.0
    start_dist = np.zeros(S)
    start_dist[start[0] * n + start[1]] = 1.0
    return TabularMdp(
        transition=T, mean_reward=R, reward_noise="none", start_state_dist=start_dist,
        task_horizon=None, terminal_states=frozenset(terminal), entry_reward=entry,
        info={"family": "gridworld", "size": n, "tiles": tiles.copy(), "start": start},
    )


def goal_reach_probability(mdp: TabularMdp, horizon: int) -> float:
    """Maximal probability of entering the goal tile within ``horizon`` steps."""
    from .tabular_rl import oracle_solve

    tiles = mdp.info["tiles"]
    goal = np.zeros(mdp.num_states)
    goal[np.flatnonzero(tiles.ravel() == GOAL)] = 1.0
    reach = TabularMdp(transition=mdp.transition, mean_reward=mdp.transition @ goal,
                       start_state_dist=mdp.start_state_dist, terminal_states=mdp.terminal_states)
    return oracle_solve(reach, horizon)[1]


def passes_solvability_filter(mdp: TabularMdp, params: GridParams) -> bool:
    from .tabular_rl import oracle_solve

    if params.solvability_filter not in SOLVABILITY_FILTERS:
        raise ValueError(f"unknown solvability filter {params.solvability_filter!r}")
    window = SOLVABILITY_FILTERS[params.solvability_filter]
    if window is None:
        return goal_reach_probability(mdp, params.filter_horizon) >= params.min_goal_prob
    ret = oracle_solve(mdp, params.filter_horizon)[1]
    return window[0] <= ret <= window[1]


def generate_gridworld(size: int, variant: str, rng: np.random.Generator, **overrides) -> TabularMdp:
    params = GridParams.for_variant(size, variant, **overrides)
    for attempt in range(params.max_attempts):
        layout = _grid_layout(params, rng)
        if layout is None:
            continue
        mdp = gridworld_from_tiles(*layout, slip_prob=params.slip_prob, goal_reward=params.goal_reward)
        if passes_solvability_filter(mdp, params):
            mdp.info.update(variant=variant, attempts=attempt + 1)
            return mdp
    raise GenerationError(
        f"no {size}x{size} {variant} grid passed the {params.solvability_filter!r} filter "
        f"in {params.max_attempts} attempts")


def render_grid(mdp: TabularMdp) -> str:
    tiles, start = mdp.info["tiles"], mdp.info["start"]
    rows = []
    for r in range(tiles.shape[0]):
        rows.append("".join("S" if (r, c) == tuple(start) else TILE_CHARS[int(t)]
                            for c, t in enumerate(tiles[r])))
    return "\n".join(rows)


# --------------------------------------------------------------------------- distributions

FAMILIES = ("bandits", "random_mdps", "gridworld")
VARIANTS = {
    "bandits": (None, "ood"),
    "random_mdps": (None, "ood"),
    "gridworld": (None,) + GRID_VARIANTS,
}
FAMILY_DEFAULTS = {
    "bandits": {"k": 5},
    "random_mdps": {"alpha": 1.0, "ood_alpha": 0.25},
    "gridworld": {"size": 13},
}


@dataclass(frozen=True)
class TaskDistributionSpec:
    family: str
    params: tuple = ()
    ood_variant: str | None = None
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown task family {self.family!r}")
        if self.ood_variant not in VARIANTS[self.family]:
            raise ValueError(f"unknown variant {self.ood_variant!r} for family {self.family!r}")
        merged = dict(FAMILY_DEFAULTS[self.family])
        merged.update(dict(self.params))
        object.__setattr__(self, "params", tuple(sorted(merged.items())))

    @classmethod
    def make(cls, family: str, ood_variant: str | None = None, seed: int = 0, **params):
        return cls(family, tuple(params.items()), ood_variant, seed)

    @property
    def param_dict(self) -> dict:
        return dict(self.params)

    def sample(self, task_seed: int) -> TabularMdp:
        rng = np.random.default_rng(task_seed)
        p = self.param_dict
        if self.family == "bandits":
            mdp = generate_bandit(int(p["k"]), self.ood_variant == "ood", rng)
        elif self.family == "random_mdps":
            alpha = p["ood_alpha"] if self.ood_variant == "ood" else p["alpha"]
            mdp = generate_random_mdp(float(alpha), rng)
        else:
            extra = {k: v for k, v in p.items() if k != "size"}
            mdp = generate_gridworld(int(p["size"]), self.ood_variant or "canonical", rng, **extra)
        mdp.info["task_seed"] = int(task_seed)
        return mdp

    def with_variant(self, variant: str | None) -> "TaskDistributionSpec":
        return dataclasses.replace(self, ood_variant=variant)

    # plain-text config section
    def to_text(self) -> str:
        lines = [f"family = {self.family}", f"ood_variant = {self.ood_variant or 'none'}",
                 f"seed = {self.seed}"]
        lines += [f"{k} = {v}" for k, v in self.params]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TaskDistributionSpec":
        kv = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if line:
                key, _, value = line.partition("=")
                kv[key.strip()] = value.strip()
        family = kv.pop("family")
        variant = kv.pop("ood_variant", "none")
        seed = int(kv.pop("seed", 0))
        return cls(family, tuple((k, _parse_scalar(v)) for k, v in kv.items()),
                   None if variant == "none" else variant, seed)


def _parse_scalar(v: str):
    for cast in (int, float):
        try:
            return cast(v)
        except ValueError:
            pass
    if v in ("true", "false"):
        return v == "true"
    return v


# --------------------------------------------------------------------------- runtime


class EnvError(RuntimeError):
    pass


class TaskEnv:
    """Runtime state of one task: current state, step counters and a private RNG stream."""

    def __init__(self, mdp: TabularMdp, rng: np.random.Generator):
        self.mdp = mdp
        self.rng = rng
        self._cum = np.cumsum(mdp.transition, axis=2)
        self._cum_start = np.cumsum(mdp.start_state_dist)
        self._terminal = mdp.terminal_mask
        self.state = 0
        self.episode_step = 0
        self.meta_step = 0
        self.done = True
        self.at_terminal = False

    def reset(self) -> int:
        S = self.mdp.num_states
        self.state = min(int(np.searchsorted(self._cum_start, self.rng.random(), side="right")), S - 1)
        self.episode_step = 0
        self.done = False
        self.at_terminal = False
        return self.state

    def sample_reward(self, s: int, a: int, s_next: int) -> float:
        mdp = self.mdp
        if mdp.entry_reward is not None:
            return float(mdp.entry_reward[s_next])
        mean = mdp.mean_reward[s, a]
        if mdp.reward_noise == "bernoulli":
            return float(self.rng.random() < mean)
        if mdp.reward_noise == "normal":
            return float(mean + self.rng.standard_normal())
        return float(mean)

    def step(self, a: int) -> tuple[float, int, bool]:
        if self.done:
            raise EnvError("step() on a terminated episode; call reset() first")
        if not 0 <= a < self.mdp.num_actions:
            raise EnvError(f"invalid action {a}")
        s = self.state
        u = self.rng.random()
        s_next = min(int(np.searchsorted(self._cum[s, a], u, side="right")), self.mdp.num_states - 1)
        r = self.sample_reward(s, a, s_next)
        self.state = s_next
        self.episode_step += 1
        self.meta_step += 1
        self.at_terminal = bool(self._terminal[s_next])
        h = self.mdp.task_horizon
        self.done = self.at_terminal or (h is not None and self.episode_step >= h)
        return r, s_next, self.done


# env_reset / env_step as free functions
def env_reset(env: TaskEnv) -> int:
    return env.reset()


def env_step(env: TaskEnv, a: int) -> tuple[float, int, bool]:
    return env.step(a)


# --------------------------------------------------------------------------- task-set files

TASKSET_MAGIC = b"RL3TASKS"


def save_task_set(path, spec: TaskDistributionSpec, seeds, mdps: list[TabularMdp]) -> None:
    arrays = {"seeds": np.asarray(seeds, dtype=np.int64)}
    meta = []
    for i, m in enumerate(mdps):
        arrays[f"{i}/transition"] = m.transition
        arrays[f"{i}/mean_reward"] = m.mean_reward
        arrays[f"{i}/start"] = m.start_state_dist
        if m.entry_reward is not None:
            arrays[f"{i}/entry_reward"] = m.entry_reward
        if "tiles" in m.info:
            arrays[f"{i}/tiles"] = m.info["tiles"]
        meta.append({"reward_noise": m.reward_noise, "task_horizon": m.task_horizon,
                     "terminal_states": sorted(m.terminal_states),
                     "start": list(m.info["start"]) if "start" in m.info else None})
    header = {"kind": "task_set", "spec": spec.to_text(), "count": len(mdps), "tasks": meta}
    binfmt.write_container(path, TASKSET_MAGIC, header, arrays)


def load_task_set(path) -> tuple[TaskDistributionSpec, np.ndarray, list[TabularMdp]]:
    header, arrays = binfmt.read_container(path, TASKSET_MAGIC)
    spec = TaskDistributionSpec.from_text(header["spec"])
    mdps = []
    for i, meta in enumerate(header["tasks"]):
        info = {"family": spec.family, "task_seed": int(arrays["seeds"][i])}
        if spec.family == "gridworld":
            info["size"] = int(spec.param_dict["size"])
        if f"{i}/tiles" in arrays:
            info["tiles"] = arrays[f"{i}/tiles"]
            info["start"] = tuple(meta["start"])
        mdps.append(TabularMdp(
            transition=arrays[f"{i}/transition"], mean_reward=arrays[f"{i}/mean_reward"],
            reward_noise=meta["reward_noise"], start_state_dist=arrays[f"{i}/start"],
            task_horizon=meta["task_horizon"], terminal_states=frozenset(meta["terminal_states"]),
            entry_reward=arrays.get(f"{i}/entry_reward"), info=info))
    return spec, arrays["seeds"], mdps
