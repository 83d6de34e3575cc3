"""Outer-loop PPO: meta-episode rollouts, GAE and the clipped-surrogate update."""

from __future__ import annotations

import tempfile
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .envs import TabularMdp
from .seqmodel import ActorCritic
from .vamdp import make_meta_env


@dataclass
class PpoConfig:
    learning_rate: float = 3e-4
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-7
    critic_weight_decay: float = 1e-2
    batch_size: int = 32768
    minibatch_size: int = 4096
    epochs: int = 8
    clip: float = 0.2
    max_kl: float = 0.01
    entropy_coef: float = 0.01
    entropy_coef_final: float | None = None
    gamma: float = 0.99
    gae_lambda: float = 0.3
    value_coef: float = 0.5
    max_grad_norm: float = 1.0
    normalize_advantages: bool = True

    def __post_init__(self):
        if self.minibatch_size <= 0 or self.batch_size % self.minibatch_size:
            raise ValueError("batch_size must be divisible by minibatch_size")

    def entropy_at(self, iteration: int, total: int) -> float:
        if self.entropy_coef_final is None or total <= 1:
            return self.entropy_coef
        frac = min(iteration / (total - 1), 1.0)
        return self.entropy_coef + frac * (self.entropy_coef_final - self.entropy_coef)


# reference PPO defaults per family
FAMILY_PPO = {
    "bandits": dict(learning_rate=3e-4, entropy_coef=0.01),
    "random_mdps": dict(learning_rate=3e-4, entropy_coef=0.1, entropy_coef_final=0.01),
    "gridworld": dict(learning_rate=2e-4, entropy_coef=0.04),
}


@dataclass
class MetaEpisodeBuffer:
    """A batch of meta-episodes, arrays shaped (n_envs, H, ...)."""

    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    logp: np.ndarray
    values: np.ndarray
    logits: np.ndarray
    dones: np.ndarray
    task_seeds: np.ndarray
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None
    info: dict = field(default_factory=dict)

    @property
    def n_envs(self) -> int:
        return self.rewards.shape[0]

    @property
    def horizon(self) -> int:
        return self.rewards.shape[1]

    def episode_returns(self) -> np.ndarray:
        return self.rewards.sum(axis=1)

    def mean_return(self) -> float:
        return float(self.episode_returns().mean())

    def __getitem__(self, i: int) -> "MetaEpisodeBuffer":
        pick = lambda x: None if x is None else x[i:i + 1]  # noqa: E731
        return MetaEpisodeBuffer(pick(self.obs), pick(self.actions), pick(self.rewards),
                                 pick(self.logp), pick(self.values), pick(self.logits),
                                 pick(self.dones), pick(self.task_seeds), pick(self.advantages),
                                 pick(self.returns))


class RolloutError(RuntimeError):
    pass


def sample_actions(logits: np.ndarray, rng: np.random.Generator, greedy: bool = False) -> np.ndarray:
    if greedy:
        return logits.argmax(axis=1)
    z = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(z)
    cum = np.cumsum(p, axis=1)
    u = rng.random(len(logits)) * cum[:, -1]
    a = (cum <= u[:, None]).sum(axis=1)
    return np.minimum(a, logits.shape[1] - 1)


def log_softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def collect_rollouts(policy: ActorCritic, tasks: list[TabularMdp], budget: int, algorithm: str,
                     rng: np.random.Generator, env_seeds=None, greedy: bool = False,
                     env_kwargs: dict | None = None) -> MetaEpisodeBuffer:
    """Run one ``budget``-step meta-episode per task in lockstep with batched cached inference."""
    n = len(tasks)
    env_seeds = env_seeds if env_seeds is not None else [m.info.get("task_seed", i) for i, m in enumerate(tasks)]
    envs = [make_meta_env(algorithm, m, budget, np.random.default_rng(int(s)), **(env_kwargs or {}))
            for m, s in zip(tasks, env_seeds)]
    D, k = policy.obs_dim, policy.num_actions
    for e in envs:
        if e.obs_dim != D or e.k != k:
            raise RolloutError(f"env layout (obs {e.obs_dim}, actions {e.k}) does not match "
                               f"policy (obs {D}, actions {k}); task seed {e.mdp.info.get('task_seed')}")
    obs = np.zeros((n, budget, D), dtype=np.float32)
    actions = np.zeros((n, budget), dtype=np.int64)
    rewards = np.zeros((n, budget))
    logp = np.zeros((n, budget))
    values = np.zeros((n, budget))
    logits_all = np.zeros((n, budget, k), dtype=np.float32)
    dones = np.zeros((n, budget), dtype=bool)
    dtype = next(policy.parameters()).dtype
    caches = policy.init_caches(n)
    cur = np.stack([e.reset() for e in envs])
    for t in range(budget):
        obs[:, t] = cur
        lg, v = policy.step(caches, torch.as_tensor(cur, dtype=dtype))
        lg = lg.double().numpy()
        a = sample_actions(lg, rng, greedy)
        lsm = log_softmax_np(lg)
        logp[:, t] = lsm[np.arange(n), a]
        values[:, t] = v.double().numpy()
        logits_all[:, t] = lg
        actions[:, t] = a
        nxt = []
        for i, e in enumerate(envs):
            try:
                r, o, _ = e.step(int(a[i]))
            except Exception as exc:
                raise RolloutError(f"environment fault on task seed {e.mdp.info.get('task_seed')}: {exc}") from exc
            rewards[i, t] = r
            dones[i, t] = e.t_tau == 0
            nxt.append(o)
        cur = np.stack(nxt)
    seeds = np.array([m.info.get("task_seed", -1) for m in tasks], dtype=np.int64)
    return MetaEpisodeBuffer(obs, actions, rewards, logp, values, logits_all, dones, seeds)


def compute_gae(rewards: np.ndarray, values: np.ndarray, gamma: float, lam: float,
                last_value: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """GAE over the last axis, treating the whole meta-episode as a single episode."""
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    H = rewards.shape[-1]
    adv = np.zeros_like(rewards)
    running = np.zeros(rewards.shape[:-1])
    next_v = np.full(rewards.shape[:-1], last_value, dtype=np.float64)
    for t in range(H - 1, -1, -1):
        delta = rewards[..., t] + gamma * next_v - values[..., t]
        running = delta + gamma * lam * running
        adv[..., t] = running
        next_v = values[..., t]
    return adv, adv + values


def categorical_kl(old_logits: torch.Tensor, new_logits: torch.Tensor) -> torch.Tensor:
    old_lp = F.log_softmax(old_logits, dim=-1)
    new_lp = F.log_softmax(new_logits, dim=-1)
    return (old_lp.exp() * (old_lp - new_lp)).sum(-1)


def clipped_surrogate(ratio: torch.Tensor, adv: torch.Tensor, clip: float) -> torch.Tensor:
    return torch.min(ratio * adv, ratio.clamp(1.0 - clip, 1.0 + clip) * adv)


def make_optimizers(policy: ActorCritic, cfg: PpoConfig):
    actor_opt = torch.optim.Adam(policy.actor.parameters(), lr=cfg.learning_rate,
                                 betas=tuple(cfg.adam_betas), eps=cfg.adam_eps)
    critic_opt = torch.optim.AdamW(policy.critic.parameters(), lr=cfg.learning_rate,
                                   betas=tuple(cfg.adam_betas), eps=cfg.adam_eps,
                                   weight_decay=cfg.critic_weight_decay)
    return actor_opt, critic_opt


def _dump_minibatch(tensors: dict) -> str:
    f = tempfile.NamedTemporaryFile(prefix="rl3lab_nonfinite_", suffix=".npz", delete=False)
    np.savez(f, **{k: v.detach().cpu().numpy() for k, v in tensors.items()})
    f.close()
    return f.name


def ppo_update(policy: ActorCritic, optimizers, batch: MetaEpisodeBuffer, cfg: PpoConfig,
               rng: np.random.Generator, entropy_coef: float | None = None) -> dict:
    """Clipped-surrogate epochs over whole-episode minibatches, with KL early stopping."""
    if batch.advantages is None:
        raise ValueError("batch has no advantages; run compute_gae first")
    ent_coef = cfg.entropy_coef if entropy_coef is None else entropy_coef
    N, H = batch.n_envs, batch.horizon
    eps_per_mb = max(1, min(N, cfg.minibatch_size // H))
    dtype = next(policy.parameters()).dtype
    obs = torch.as_tensor(batch.obs, dtype=dtype)
    actions = torch.as_tensor(batch.actions)
    old_logp = torch.as_tensor(batch.logp, dtype=dtype)
    old_logits = torch.as_tensor(batch.logits, dtype=dtype)
    adv_all = torch.as_tensor(batch.advantages, dtype=dtype)
    ret_all = torch.as_tensor(batch.returns, dtype=dtype)
    actor_opt, critic_opt = optimizers
    stats = {"policy_loss": [], "value_loss": [], "entropy": [], "kl": [], "clip_frac": []}
    stopped, epochs_done, mb_done, kl_at_stop = False, 0, 0, 0.0
    for epoch in range(cfg.epochs):
        perm = rng.permutation(N)
        for start in range(0, N, eps_per_mb):
            idx = torch.as_tensor(perm[start:start + eps_per_mb])
            logits, values = policy(obs[idx])
            kl = categorical_kl(old_logits[idx], logits).mean()
            if kl.item() > cfg.max_kl:
                stopped, kl_at_stop = True, kl.item()
                break
            lp_all = F.log_softmax(logits, dim=-1)
            new_logp = lp_all.gather(-1, actions[idx][..., None])[..., 0]
            ratio = (new_logp - old_logp[idx]).exp()
            adv = adv_all[idx]
            if cfg.normalize_advantages and adv.numel() > 1:
                adv = (adv - adv.mean()) / (adv.std() + 1e-8)
            policy_loss = -clipped_surrogate(ratio, adv, cfg.clip).mean()
            entropy = -(lp_all.exp() * lp_all).sum(-1).mean()
            value_loss = ((values - ret_all[idx]) ** 2).mean()
            loss = policy_loss - ent_coef * entropy + cfg.value_coef * value_loss
            if not torch.isfinite(loss):
                path = _dump_minibatch({"obs": obs[idx], "actions": actions[idx], "adv": adv,
                                        "returns": ret_all[idx], "logits": logits})
                raise FloatingPointError(f"non-finite PPO loss {loss.item()}; minibatch dumped to {path}")
            actor_opt.zero_grad(set_to_none=True)
            critic_opt.zero_grad(set_to_none=True)
            loss.backward()
            if cfg.max_grad_norm:
                torch.nn.utils.clip_grad_norm_(policy.actor.parameters(), cfg.max_grad_norm)
                torch.nn.utils.clip_grad_norm_(policy.critic.parameters(), cfg.max_grad_norm)
            actor_opt.step()
            critic_opt.step()
            mb_done += 1
            stats["policy_loss"].append(policy_loss.item())
            stats["value_loss"].append(value_loss.item())
            stats["entropy"].append(entropy.item())
            stats["kl"].append(kl.item())
            stats["clip_frac"].append(((ratio - 1).abs() > cfg.clip).to(dtype).mean().item())
        if stopped:
            break
        epochs_done += 1
    with torch.no_grad():
        final_kl = categorical_kl(old_logits, policy.actor(obs)).mean().item()
    out = {k: (float(np.mean(v)) if v else 0.0) for k, v in stats.items()}
    out.update(kl=final_kl, epochs=epochs_done, minibatches=mb_done, early_stop=stopped,
               kl_at_stop=kl_at_stop, entropy_coef=ent_coef)
    return out
