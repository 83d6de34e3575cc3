"""Training and evaluation loops, seed management, checkpoints with optimizer state, baselines."""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import binfmt
from .config import ExperimentConfig
from .envs import TabularMdp, TaskDistributionSpec, load_task_set, save_task_set
from .meta_train import collect_rollouts, compute_gae, make_optimizers, ppo_update
from .seqmodel import CHECKPOINT_MAGIC, ActorCritic
from .tabular_rl import meta_oracle
from .vamdp import MetaEnv, obs_dim_for

# Training and evaluation task seeds live in disjoint halves of [0, 2^63).
TRAIN_SEED_RANGE = (0, 2**62)
EVAL_SEED_RANGE = (2**62, 2**63)
_TASK_STREAM, _ITER_STREAM, _EVAL_STREAM, _INIT_STREAM = 0x7A5C, 0x17E2, 0xE7A1, 0x1217

LOG_FIELDS = ["iteration", "mean_return", "policy_loss", "value_loss", "entropy", "kl", "clip_frac",
              "epochs", "minibatches", "early_stop", "entropy_coef"]


class LayoutMismatchError(ValueError):
    pass


def train_task_seeds(master_seed: int, iteration: int, n: int) -> np.ndarray:
    """Task seeds for one iteration; a function of (master seed, iteration) only, never the algorithm."""
    rng = np.random.default_rng([master_seed, _TASK_STREAM, iteration])
    return rng.integers(*TRAIN_SEED_RANGE, size=n, dtype=np.int64)


def eval_task_seeds(seed: int, n: int) -> np.ndarray:
    rng = np.random.default_rng([seed, _EVAL_STREAM])
    seeds = rng.integers(*EVAL_SEED_RANGE, size=n, dtype=np.int64)
    assert (seeds >= EVAL_SEED_RANGE[0]).all(), "evaluation seeds must not overlap training seeds"
    return seeds


def iteration_rng(master_seed: int, iteration: int) -> np.random.Generator:
    return np.random.default_rng([master_seed, _ITER_STREAM, iteration])


def make_eval_set(spec: TaskDistributionSpec, n: int, seed: int, path=None):
    seeds = eval_task_seeds(seed, n)
    mdps = [spec.sample(int(s)) for s in seeds]
    if path is not None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        save_task_set(path, spec, seeds, mdps)
    return seeds, mdps


def set_determinism() -> None:
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)


def build_policy(cfg: ExperimentConfig, num_states: int, num_actions: int) -> ActorCritic:
    torch.manual_seed(int(np.random.default_rng([cfg.seed, _INIT_STREAM]).integers(2**31)))
    return ActorCritic(cfg.network_kind, obs_dim_for(cfg.algorithm, num_states, num_actions), num_actions,
                       cfg.interaction_budget, activation=cfg.activation_function, **cfg.network_kwargs())


# --------------------------------------------------------------------------- checkpoints


def save_training_checkpoint(path, policy: ActorCritic, optimizers, cfg: ExperimentConfig, iteration: int):
    arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in policy.state_dict().items()}
    for j, opt in enumerate(optimizers):
        for idx, st in opt.state_dict()["state"].items():
            for name, val in st.items():
                arrays[f"opt{j}/{idx}/{name}"] = torch.as_tensor(val).detach().cpu().numpy()
    header = {"kind": "checkpoint", "network": policy.meta,
              "dtype": str(next(policy.parameters()).dtype).replace("torch.", ""),
              "config": cfg.to_text(), "iteration": iteration, "algorithm": cfg.algorithm,
              "family": cfg.family, "interaction_budget": cfg.interaction_budget}
    tmp = Path(str(path) + ".tmp")
    binfmt.write_container(tmp, CHECKPOINT_MAGIC, header, arrays)
    tmp.replace(path)


def load_training_checkpoint(path):
    """Return (policy, optimizers, config, iteration)."""
    header, arrays = binfmt.read_container(path, CHECKPOINT_MAGIC)
    cfg = ExperimentConfig.from_text(header["config"])
    policy = ActorCritic(**header["network"]).to(getattr(torch, header.get("dtype", "float32")))
    policy.load_state_dict({k[6:]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("param/")})
    optimizers = make_optimizers(policy, cfg.ppo())
    for j, opt in enumerate(optimizers):
        state: dict = {}
        prefix = f"opt{j}/"
        for k, v in arrays.items():
            if k.startswith(prefix):
                idx, name = k[len(prefix):].split("/")
                state.setdefault(int(idx), {})[name] = torch.from_numpy(v.copy())
        if state:
            opt.load_state_dict({"state": state, "param_groups": opt.state_dict()["param_groups"]})
    return policy, optimizers, cfg, int(header["iteration"])


# --------------------------------------------------------------------------- training


def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _read_rows(path: Path, upto: int) -> list[list[str]]:
    if not path.exists():
        return []
    with path.open() as f:
        rows = list(csv.reader(f))[1:]
    return [r for r in rows if int(r[0]) < upto]


@dataclass
class TrainingResult:
    checkpoint: Path
    log_path: Path
    iterations: int
    log: list = field(default_factory=list)


def run_training(cfg: ExperimentConfig, resume: bool = True, progress=None) -> TrainingResult:
    """PPO meta-training; writes ``checkpoint.bin``, ``train_log.csv`` (deterministic),
    ``timing.csv`` (wall clock) and ``task_seeds.csv`` to ``cfg.output_dir``."""
    set_determinism()
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "checkpoint.bin"
    spec = cfg.task_spec()
    probe = spec.sample(0)
    S, k = probe.num_states, probe.num_actions
    start = 0
    if resume and ckpt.exists():
        policy, optimizers, saved, start = load_training_checkpoint(ckpt)
        # extending the iteration budget (or moving the directory) is allowed
        loose = dict(ppo_iterations=0, output_dir="", checkpoint_every=1)
        if saved.replace(**loose) != cfg.replace(**loose):
            raise ValueError(f"{ckpt} was written by a different config; use a fresh output_dir")
        if start > cfg.ppo_iterations:
            raise ValueError(f"{ckpt} already holds {start} iterations, more than ppo_iterations")
    else:
        policy = build_policy(cfg, S, k)
        optimizers = make_optimizers(policy, cfg.ppo())
    cfg.save(out / "config.cfg")
    ppo_cfg = cfg.ppo()
    H, n_envs = cfg.interaction_budget, cfg.num_parallel_envs
    log_rows = _read_rows(out / "train_log.csv", start)
    time_rows = _read_rows(out / "timing.csv", start)
    seed_rows = _read_rows(out / "task_seeds.csv", start)
    log_f = (out / "train_log.csv").open("w", newline="")
    time_f = (out / "timing.csv").open("w", newline="")
    seed_f = (out / "task_seeds.csv").open("w", newline="")
    try:
        log_w, time_w, seed_w = csv.writer(log_f), csv.writer(time_f), csv.writer(seed_f)
        log_w.writerow(LOG_FIELDS)
        time_w.writerow(["iteration", "wall_seconds"])
        seed_w.writerow(["iteration", "index", "task_seed"])
        log_w.writerows(log_rows)
        time_w.writerows(time_rows)
        seed_w.writerows(seed_rows)
        if start == 0:
            save_training_checkpoint(ckpt, policy, optimizers, cfg, 0)
        for it in range(start, cfg.ppo_iterations):
            t0 = time.perf_counter()
            seeds = train_task_seeds(cfg.seed, it, n_envs)
            tasks = [spec.sample(int(s)) for s in seeds]
            rng = iteration_rng(cfg.seed, it)
            batch = collect_rollouts(policy, tasks, H, cfg.algorithm, rng, env_kwargs=cfg.env_kwargs())
            batch.advantages, batch.returns = compute_gae(batch.rewards, batch.values, ppo_cfg.gamma,
                                                          ppo_cfg.gae_lambda)
            stats = ppo_update(policy, optimizers, batch, ppo_cfg, rng,
                               entropy_coef=ppo_cfg.entropy_at(it, cfg.ppo_iterations))
            row = [it, batch.mean_return()] + [stats[f] for f in LOG_FIELDS[2:]]
            log_w.writerow([_fmt(v) for v in row])
            seed_w.writerows([it, i, int(s)] for i, s in enumerate(seeds))
            time_w.writerow([it, f"{time.perf_counter() - t0:.3f}"])
            for f in (log_f, time_f, seed_f):
                f.flush()
            done = it + 1
            if done % max(cfg.checkpoint_every, 1) == 0 or done == cfg.ppo_iterations:
                save_training_checkpoint(ckpt, policy, optimizers, cfg, done)
            if progress:
                progress(it, row)
    finally:
        for f in (log_f, time_f, seed_f):
            f.close()
    return TrainingResult(ckpt, out / "train_log.csv", cfg.ppo_iterations)


# --------------------------------------------------------------------------- evaluation


@dataclass
class EvalReport:
    returns: np.ndarray
    oracle_values: np.ndarray
    task_seeds: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.returns)

    @property
    def mean(self) -> float:
        return float(np.mean(self.returns))

    @property
    def standard_error(self) -> float:
        if self.n < 2:
            return float("nan")
        return float(np.std(self.returns, ddof=1) / math.sqrt(self.n))

    @property
    def oracle_fraction(self) -> float:
        denom = float(np.mean(self.oracle_values))
        return self.mean / denom if denom else float("nan")

    @property
    def flagged(self) -> bool:
        """Oracle fraction above one can only come from sampling noise."""
        return self.oracle_fraction > 1.0

    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["task_seed", "return", "oracle_value"])
        for s, r, o in zip(self.task_seeds, self.returns, self.oracle_values):
            w.writerow([int(s), repr(float(r)), repr(float(o))])
        return buf.getvalue()

    def text(self) -> str:
        lines = [f"{k}: {v}" for k, v in sorted(self.meta.items())]
        lines += [f"tasks: {self.n}",
                  f"mean return: {self.mean:.4f} +- {self.standard_error:.4f} (SE)",
                  f"oracle fraction: {self.oracle_fraction:.4f}" + ("  [above 1: sampling noise]" if self.flagged else "")]
        return "\n".join(lines)

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval_returns.csv").write_text(self.csv())
        (out / "eval_report.txt").write_text(self.text() + "\n")


def oracle_values(tasks: list[TabularMdp], budget: int) -> np.ndarray:
    return np.array([meta_oracle(m, budget)[0] for m in tasks])


def check_layout(policy: ActorCritic, algorithm: str, mdp: TabularMdp, budget: int) -> None:
    want = obs_dim_for(algorithm, mdp.num_states, mdp.num_actions)
    if policy.obs_dim != want:
        raise LayoutMismatchError(f"observation dimension: checkpoint expects {policy.obs_dim}, "
                                  f"{algorithm} on this task set produces {want} "
                                  f"({mdp.num_states} states, {mdp.num_actions} actions)")
    if policy.num_actions != mdp.num_actions:
        raise LayoutMismatchError(f"action count: checkpoint has {policy.num_actions}, "
                                  f"task set has {mdp.num_actions}")
    if policy.meta["max_context"] < budget:
        raise LayoutMismatchError(f"context length: checkpoint supports {policy.meta['max_context']}, "
                                  f"budget is {budget}")


def run_eval(policy: ActorCritic, cfg: ExperimentConfig, tasks: list[TabularMdp], greedy: bool = False,
             seed: int = 0, chunk: int = 1000, meta: dict | None = None) -> EvalReport:
    """One ``interaction_budget``-step meta-episode per task; environment streams are seeded
    by task seed so different policies face identical randomness."""
    set_determinism()
    H = cfg.interaction_budget
    check_layout(policy, cfg.algorithm, tasks[0], H)
    rng = np.random.default_rng([seed, _EVAL_STREAM])
    returns = []
    for i in range(0, len(tasks), chunk):
        b = collect_rollouts(policy, tasks[i:i + chunk], H, cfg.algorithm, rng, greedy=greedy,
                             env_kwargs=cfg.env_kwargs())
        returns.append(b.episode_returns())
    info = {"algorithm": cfg.algorithm, "family": cfg.family, "interaction_budget": H,
            "greedy": greedy, "eval_seed": seed, "master_seed": cfg.seed}
    info.update(meta or {})
    seeds = np.array([m.info.get("task_seed", -1) for m in tasks], dtype=np.int64)
    return EvalReport(np.concatenate(returns), oracle_values(tasks, H), seeds, info)


def eval_checkpoint(path, tasks: list[TabularMdp], greedy: bool = False, seed: int = 0,
                    meta: dict | None = None) -> EvalReport:
    policy, _, cfg, it = load_training_checkpoint(path)
    info = {"checkpoint": str(path), "trained_iterations": it}
    info.update(meta or {})
    return run_eval(policy, cfg, tasks, greedy, seed, meta=info)


def load_eval_tasks(path, ood: str | None = None) -> tuple[TaskDistributionSpec, np.ndarray, list]:
    """Load a saved task set; with ``ood`` the same seeds are re-sampled under that variant."""
    spec, seeds, mdps = load_task_set(path)
    if ood:
        spec = spec.with_variant(ood)
        mdps = [spec.sample(int(s)) for s in seeds]
    return spec, seeds, mdps


# --------------------------------------------------------------------------- baselines

BASELINES = ("random", "ucb1", "oracle")


def run_baseline(kind: str, tasks: list[TabularMdp], budget: int, seed: int = 0,
                 ucb_c: float = 2.0) -> EvalReport:
    """Non-learned reference policies on the same per-task environment streams as ``run_eval``."""
    if kind not in BASELINES:
        raise ValueError(f"unknown baseline {kind!r}")
    rng = np.random.default_rng([seed, _EVAL_STREAM, 1])
    returns = np.zeros(len(tasks))
    for i, m in enumerate(tasks):
        env = MetaEnv(m, budget, np.random.default_rng(int(m.info.get("task_seed", i))))
        env.reset()
        S, k = m.num_states, m.num_actions
        counts = np.zeros((S, k))
        sums = np.zeros((S, k))
        if kind == "oracle":
            _, layers, _ = meta_oracle(m, budget)
        total = 0.0
        while not env.meta_done:
            s = env.state
            if kind == "random":
                a = int(rng.integers(k))
            elif kind == "ucb1":
                untried = np.flatnonzero(counts[s] == 0)
                if untried.size:
                    a = int(untried[0])
                else:
                    bonus = np.sqrt(ucb_c * np.log(counts[s].sum()) / counts[s])
                    a = int(np.argmax(sums[s] / counts[s] + bonus))
            else:
                tau = env.t_tau if m.task_horizon else 0
                a = int(np.argmax(layers[budget - env.t][tau * S + s]))
            r, _, _ = env.step(a)
            counts[s, a] += 1
            sums[s, a] += r
            total += r
        returns[i] = total
    seeds = np.array([m.info.get("task_seed", -1) for m in tasks], dtype=np.int64)
    return EvalReport(returns, oracle_values(tasks, budget), seeds,
                      {"algorithm": f"baseline:{kind}", "interaction_budget": budget, "eval_seed": seed})


# --------------------------------------------------------------------------- multi-seed


def run_seeds(cfg: ExperimentConfig, n_seeds: int, eval_tasks: list[TabularMdp], report: str = "median"):
    """Train seeds cfg.seed .. cfg.seed + n - 1 and pick the run whose eval mean is the median."""
    if report != "median":
        raise ValueError("only median reporting is supported")
    results = []
    for j in range(n_seeds):
        sub = cfg.replace(seed=cfg.seed + j, output_dir=str(Path(cfg.output_dir) / f"seed_{cfg.seed + j}"))
        res = run_training(sub)
        rep = eval_checkpoint(res.checkpoint, eval_tasks)
        rep.save(sub.output_dir)
        results.append((rep.mean, sub.seed, rep))
    ranked = sorted(results, key=lambda x: (x[0], x[1]))
    _, best_seed, rep = ranked[(len(ranked) - 1) // 2]
    summary = "\n".join([f"seed {s}: mean {m:.4f}" for m, s, _ in results] + [f"median seed: {best_seed}"])
    Path(cfg.output_dir, "median.txt").write_text(summary + "\n")
    return best_seed, rep, summary
