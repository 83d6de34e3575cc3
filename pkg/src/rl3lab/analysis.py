"""Executable checks on what Q-estimates reveal about the task.

* Bernoulli bandits: (Q, N) determine the task posterior.
* Gaussian bandits: (Q, N) do not, because the likelihood also depends on the per-arm variance.
* Optimal Q tables under a shared transition function coincide iff the rewards do.
* Max-norm duplicate rate of optimal Q tables among random 3-state, 2-action MDPs.
* A small classifier that identifies tasks from Q-estimates built along random rollouts.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import logsumexp, xlogy

from .envs import TabularMdp, generate_random_mdp
from .tabular_rl import value_iteration
from .vamdp import VamdpEnv

# --------------------------------------------------------------------------- Bernoulli sufficiency


def _success_counts(Q, N, tol: float = 1e-9) -> np.ndarray:
    succ = np.asarray(Q, dtype=np.float64) * np.asarray(N, dtype=np.float64)
    rounded = np.round(succ)
    if np.abs(succ - rounded).max(initial=0.0) > tol:
        raise ValueError("Q * N must be integral success counts for Bernoulli arms")
    return rounded


def bernoulli_log_posterior_from_stats(prior, tasks, Q, N) -> np.ndarray:
    """log P(i | Q, N) for Bernoulli tasks ``tasks[i, k] = p_ik``."""
    p = np.asarray(tasks, dtype=np.float64)
    N = np.asarray(N, dtype=np.float64)
    succ = _success_counts(Q, N)
    fail = N - succ
    with np.errstate(divide="ignore"):
        logp = np.log(np.asarray(prior, dtype=np.float64))
    logp = logp + (xlogy(succ, p) + xlogy(fail, 1.0 - p)).sum(axis=1)
    return logp - logsumexp(logp)


def bernoulli_posterior_from_stats(prior, tasks, Q, N) -> np.ndarray:
    return np.exp(bernoulli_log_posterior_from_stats(prior, tasks, Q, N))


def bernoulli_log_posterior_from_trajectory(prior, tasks, actions, rewards) -> np.ndarray:
    """Oracle: multiply per-step likelihoods along the raw trajectory."""
    p = np.asarray(tasks, dtype=np.float64)
    with np.errstate(divide="ignore"):
        logp = np.log(np.asarray(prior, dtype=np.float64))
        for a, r in zip(actions, rewards):
            logp = logp + np.log(p[:, a] if r == 1 else 1.0 - p[:, a])
    return logp - logsumexp(logp)


# --------------------------------------------------------------------------- Gaussian insufficiency


def stats_from_trajectory(actions, rewards, k: int):
    """Per-arm (Q, N, Var), Var being the population variance; unpulled arms give zeros."""
    actions = np.asarray(actions, dtype=np.int64)
    rewards = np.asarray(rewards, dtype=np.float64)
    N = np.bincount(actions, minlength=k).astype(np.float64)
    Q = np.zeros(k)
    Var = np.zeros(k)
    for a in range(k):
        r = rewards[actions == a]
        if r.size:
            Q[a] = r.mean()
            Var[a] = r.var()
    return Q, N, Var


def gaussian_loglik_from_stats(mu, sigma, Q, N, Var, include_variance: bool = True) -> float:
    """Sum over arms of -N (Var + (Q - mu)^2) / (2 sigma^2) - N/2 log(2 pi sigma^2)."""
    mu, Q, N, Var = (np.asarray(x, dtype=np.float64) for x in (mu, Q, N, Var))
    s2 = np.broadcast_to(np.asarray(sigma, dtype=np.float64) ** 2, N.shape)
    spread = (Var if include_variance else 0.0) + (Q - mu) ** 2
    terms = -N * spread / (2 * s2) - 0.5 * N * np.log(2 * np.pi * s2)
    return float(terms[N > 0].sum())


def gaussian_loglik_from_trajectory(mu, sigma, actions, rewards) -> float:
    mu = np.asarray(mu, dtype=np.float64)
    sig = np.broadcast_to(np.asarray(sigma, dtype=np.float64), mu.shape)
    a = np.asarray(actions, dtype=np.int64)
    r = np.asarray(rewards, dtype=np.float64)
    z = (r - mu[a]) / sig[a]
    return float((-0.5 * z * z - np.log(sig[a]) - 0.5 * np.log(2 * np.pi)).sum())


@dataclass
class InsufficiencyWitness:
    actions: list
    rewards_a: list
    rewards_b: list
    stats_a: tuple
    stats_b: tuple
    loglik_a: float
    loglik_b: float

    @property
    def difference(self) -> float:
        return abs(self.loglik_a - self.loglik_b)

    def text(self) -> str:
        qa, na, va = self.stats_a
        qb, nb, vb = self.stats_b
        return (f"trajectory A rewards {self.rewards_a}: Q={qa.tolist()} N={na.tolist()} Var={va.tolist()}\n"
                f"trajectory B rewards {self.rewards_b}: Q={qb.tolist()} N={nb.tolist()} Var={vb.tolist()}\n"
                f"log-likelihoods {self.loglik_a:.12g} vs {self.loglik_b:.12g}, |diff| = {self.difference:.12g}")


def insufficiency_witness(mu=(1.0,), sigma: float = 1.0, spread: float = 1.0) -> InsufficiencyWitness:
    """Two single-arm trajectories {m, m} and {m - spread, m + spread} with m = mu[0]."""
    mu = np.asarray(mu, dtype=np.float64)
    m = float(mu[0])
    actions = [0, 0]
    ra, rb = [m, m], [m - spread, m + spread]
    k = mu.size
    sa, sb = stats_from_trajectory(actions, ra, k), stats_from_trajectory(actions, rb, k)
    la = gaussian_loglik_from_stats(mu, sigma, *sa)
    lb = gaussian_loglik_from_stats(mu, sigma, *sb)
    return InsufficiencyWitness(actions, ra, rb, sa, sb, la, lb)


# --------------------------------------------------------------------------- Q* uniqueness


def optimal_q(T, R, horizon: int) -> np.ndarray:
    mdp = TabularMdp(transition=np.asarray(T, dtype=np.float64), mean_reward=np.asarray(R, dtype=np.float64),
                     reward_noise="none", task_horizon=horizon)
    return value_iteration(mdp, horizon, bellman_tol=0.0).q


def q_uniqueness_check(T, R1, R2, horizon: int, tol: float = 1e-10) -> bool:
    """True iff the horizon-step optimal Q tables of (T, R1) and (T, R2) agree within ``tol``."""
    return bool(np.abs(optimal_q(T, R1, horizon) - optimal_q(T, R2, horizon)).max() <= tol)


def uniqueness_property_trials(n: int, rng: np.random.Generator, num_states: int = 3,
                               num_actions: int = 2, horizon: int = 10, perturbation: float = 0.5,
                               tol: float = 1e-10) -> dict:
    """Counterexample counts for both directions of "equal Q* iff equal R" under shared T."""
    same_bad = diff_bad = 0
    for _ in range(n):
        T = rng.dirichlet(np.ones(num_states), size=(num_states, num_actions))
        T /= T.sum(axis=2, keepdims=True)
        R1 = rng.normal(1.0, 1.0, size=(num_states, num_actions))
        if not q_uniqueness_check(T, R1, R1.copy(), horizon, tol):
            same_bad += 1
        R2 = R1.copy()
        s, a = rng.integers(num_states), rng.integers(num_actions)
        R2[s, a] += perturbation * rng.choice([-1.0, 1.0])
        if q_uniqueness_check(T, R1, R2, horizon, tol):
            diff_bad += 1
    return {"trials": n, "equal_rewards_counterexamples": same_bad,
            "different_rewards_counterexamples": diff_bad}


# --------------------------------------------------------------------------- duplicate probability


@dataclass
class DuplicateExperimentSpec:
    num_mdps: int = 5000
    num_states: int = 3
    num_actions: int = 2
    alpha: float = 1.0
    beta: float = 1.0  # standard deviation of the reward draw
    delta: float = 0.1
    horizon: int = 10
    seed: int = 0
    mdp_seeds: tuple | None = None

    def __post_init__(self):
        if self.num_mdps < 2:
            raise ValueError("need at least two MDPs")
        if self.mdp_seeds is not None and len(self.mdp_seeds) != self.num_mdps:
            raise ValueError("mdp_seeds must provide one seed per MDP")

    @property
    def num_pairs(self) -> int:
        return self.num_mdps * (self.num_mdps - 1) // 2

    def seeds(self) -> list[int]:
        if self.mdp_seeds is not None:
            return [int(s) for s in self.mdp_seeds]
        return np.random.SeedSequence(self.seed).generate_state(self.num_mdps, dtype=np.uint64).tolist()


@dataclass
class DuplicateResult:
    spec: DuplicateExperimentSpec
    duplicates: int
    method: str
    pairs: list = field(default_factory=list)

    @property
    def fraction(self) -> float:
        return self.duplicates / self.spec.num_pairs

    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["num_mdps", "alpha", "beta", "delta", "horizon", "seed", "pairs", "duplicates",
                    "fraction", "method"])
        s = self.spec
        w.writerow([s.num_mdps, s.alpha, s.beta, s.delta, s.horizon, s.seed, s.num_pairs,
                    self.duplicates, repr(self.fraction), self.method])
        return buf.getvalue()

    def text(self) -> str:
        s = self.spec
        approx = (s.num_mdps - 1) ** 2 / 2
        return "\n".join([
            f"duplicate probability: {s.num_mdps} MDPs ({s.num_states} states, {s.num_actions} actions), "
            f"alpha={s.alpha}, beta={s.beta} (std), delta={s.delta}, horizon={s.horizon}, seed={s.seed}",
            f"pairs scanned : {s.num_pairs} (n(n-1)/2; the (n-1)^2/2 approximation gives {approx:.0f})",
            f"duplicates    : {self.duplicates}",
            f"fraction      : {self.fraction:.3e}",
            f"pair scan     : {self.method}",
        ])


def duplicate_q_tables(spec: DuplicateExperimentSpec) -> np.ndarray:
    """Flattened optimal Q tables, one row per MDP; MDP i is built from ``default_rng(seeds[i])``."""
    out = np.zeros((spec.num_mdps, spec.num_states * spec.num_actions))
    for i, s in enumerate(spec.seeds()):
        m = generate_random_mdp(spec.alpha, np.random.default_rng(s), spec.num_states, spec.num_actions,
                                spec.horizon, reward_std=spec.beta, reward_noise="none")
        out[i] = value_iteration(m, spec.horizon, bellman_tol=0.0).q.ravel()
    return out


def close_pairs_kdtree(X: np.ndarray, delta: float) -> list[tuple[int, int]]:
    """Pairs i < j with max-norm distance strictly below ``delta``."""
    cand = cKDTree(X).query_pairs(r=delta, p=np.inf, output_type="ndarray")
    if len(cand) == 0:
        return []
    d = np.abs(X[cand[:, 0]] - X[cand[:, 1]]).max(axis=1)
    keep = cand[d < delta]
    return sorted(map(tuple, np.sort(keep, axis=1).tolist()))


def close_pairs_bruteforce(X: np.ndarray, delta: float, chunk: int = 256) -> list[tuple[int, int]]:
    n = len(X)
    out = []
    for start in range(0, n, chunk):
        block = X[start:start + chunk]
        d = np.abs(block[:, None, :] - X[None, :, :]).max(axis=2)
        ii, jj = np.nonzero(d < delta)
        ii = ii + start
        sel = jj > ii
        out.extend(zip(ii[sel].tolist(), jj[sel].tolist()))
    return sorted(out)


def duplicate_probability(spec: DuplicateExperimentSpec, method: str = "kdtree") -> DuplicateResult:
    X = duplicate_q_tables(spec)
    if method == "kdtree":
        pairs = close_pairs_kdtree(X, spec.delta)
    elif method == "bruteforce":
        pairs = close_pairs_bruteforce(X, spec.delta)
    else:
        raise ValueError(f"unknown pair-scan method {method!r}")
    return DuplicateResult(spec, len(pairs), method, pairs)


def q_estimate_trajectory(mdp: TabularMdp, steps: int, policy_rng: np.random.Generator,
                          env_rng: np.random.Generator) -> np.ndarray:
    """Flattened VAMDP Q-estimates after 0..steps uniformly random actions, shape (steps+1, S*A)."""
    env = VamdpEnv(mdp, steps, env_rng)
    env.reset()
    out = np.zeros((steps + 1, mdp.num_states * mdp.num_actions))
    for t in range(steps):
        env.step(int(policy_rng.integers(mdp.num_actions)))
        out[t + 1] = env.q.ravel()
    return out


def duplicate_fraction_over_time(spec: DuplicateExperimentSpec, steps: int = 50) -> np.ndarray:
    """Fraction of delta-duplicate Q-estimate pairs at each step of a shared random policy."""
    seeds = spec.seeds()
    snaps = np.zeros((spec.num_mdps, steps + 1, spec.num_states * spec.num_actions))
    for i, s in enumerate(seeds):
        rng = np.random.default_rng(s)
        m = generate_random_mdp(spec.alpha, rng, spec.num_states, spec.num_actions, spec.horizon,
                                reward_std=spec.beta, reward_noise="none")
        snaps[i] = q_estimate_trajectory(m, steps, np.random.default_rng([s, 1]), np.random.default_rng([s, 2]))
    return np.array([len(close_pairs_kdtree(snaps[:, t], spec.delta)) / spec.num_pairs
                     for t in range(steps + 1)])


# --------------------------------------------------------------------------- task classifier


@dataclass
class ClassifierResult:
    accuracy: np.ndarray          # (seeds, steps + 1)
    mean: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    meta: dict

    def monotone_violations(self) -> list[int]:
        """Steps whose upper band lies below the lower band of some earlier step."""
        best_lo = np.maximum.accumulate(self.lo)
        return [t for t in range(1, len(self.mean)) if self.hi[t] < best_lo[t - 1]]

    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["t", "mean_accuracy", "band_lo", "band_hi"] + [f"seed_{i}" for i in range(len(self.accuracy))])
        for t in range(len(self.mean)):
            w.writerow([t, self.mean[t], self.lo[t], self.hi[t]] + self.accuracy[:, t].tolist())
        return buf.getvalue()

    def text(self) -> str:
        m = self.meta
        T = len(self.mean) - 1
        picks = sorted({0, min(10, T), min(20, T), T})
        lines = [f"task classifier: {m['num_tasks']} tasks, {m['steps']} steps, seeds {m['seeds']}",
                 f"training: {json.dumps(m['training'])}"]
        lines += [f"  t={t:3d} accuracy {self.mean[t]:.3f}  [{self.lo[t]:.3f}, {self.hi[t]:.3f}]" for t in picks]
        lines.append(f"chance = {1 / m['num_tasks']:.3f}; monotonicity violations: {self.monotone_violations()}")
        return "\n".join(lines)


def _classifier_snapshots(tasks, steps, n_rollouts, seed, tag):
    X = np.zeros((len(tasks), n_rollouts, steps + 1, tasks[0].num_states * tasks[0].num_actions))
    for i, m in enumerate(tasks):
        for j in range(n_rollouts):
            X[i, j] = q_estimate_trajectory(m, steps, np.random.default_rng([seed, tag, i, j, 0]),
                                            np.random.default_rng([seed, tag, i, j, 1]))
    return X


def _train_classifiers(x_tr, y_tr, x_te, y_te, num_classes, epochs, lr, batch, seed) -> np.ndarray:
    """Train one 64-unit classifier per leading index of ``x_*`` (shape (T, n, d)) in a single
    batched model; Adam is elementwise, so this equals training them separately."""
    import torch

    torch.manual_seed(seed)
    mu, sd = x_tr.mean(1, keepdims=True), x_tr.std(1, keepdims=True) + 1e-8
    xt = torch.as_tensor((x_tr - mu) / sd, dtype=torch.float32)
    xe = torch.as_tensor((x_te - mu) / sd, dtype=torch.float32)
    yt = torch.as_tensor(y_tr)
    T, _, d = xt.shape
    H = 64

    def uniform(shape, fan_in):
        b = 1.0 / np.sqrt(fan_in)
        return torch.nn.Parameter(torch.empty(shape).uniform_(-b, b))

    params = [uniform((T, d, H), d), uniform((T, 1, H), d), uniform((T, H, num_classes), H),
              uniform((T, 1, num_classes), H)]
    W1, b1, W2, b2 = params

    def logits(x):
        return torch.relu(x @ W1 + b1) @ W2 + b2

    opt = torch.optim.Adam(params, lr=lr, betas=(0.9, 0.999), eps=1e-7)
    gen = torch.Generator().manual_seed(seed)
    n = xt.shape[1]
    for _ in range(epochs):
        perm = torch.randperm(n, generator=gen)
        for s in range(0, n, batch):
            idx = perm[s:s + batch]
            out = logits(xt[:, idx])
            # sum over classifiers of each one's mean loss keeps their gradients independent
            loss = torch.nn.functional.cross_entropy(out.reshape(-1, num_classes), yt[idx].repeat(T),
                                                     reduction="sum") / len(idx)
            opt.zero_grad()
            loss.backward()
            opt.step()
    with torch.no_grad():
        pred = logits(xe).argmax(-1).numpy()
    return (pred == y_te[None, :]).mean(axis=1)


def task_classifier_experiment(num_tasks: int = 100, steps: int = 50, seeds=(0, 1, 2, 3, 4),
                               alpha: float = 0.1, reward_std: float = 0.5, train_rollouts: int = 10,
                               test_rollouts: int = 10, epochs: int = 200, learning_rate: float = 3e-4,
                               batch_size: int = 32, n_boot: int = 2000) -> ClassifierResult:
    """Accuracy of a 64-unit one-hidden-layer classifier predicting task id from Q-estimates at each step.

    One classifier per step is fit to snapshots from independent training rollouts and
    scored on held-out rollouts. Bands are percentile bootstraps of the across-seed mean.
    """
    import torch
    torch.set_num_threads(1)
    acc = np.zeros((len(seeds), steps + 1))
    for si, seed in enumerate(seeds):
        rng = np.random.default_rng([seed, 0])
        tasks = [generate_random_mdp(alpha, rng, 3, 2, 10, reward_std=reward_std, reward_noise="none")
                 for _ in range(num_tasks)]
        tr = _classifier_snapshots(tasks, steps, train_rollouts, seed, 1)
        te = _classifier_snapshots(tasks, steps, test_rollouts, seed, 2)
        y_tr = np.repeat(np.arange(num_tasks), train_rollouts)
        y_te = np.repeat(np.arange(num_tasks), test_rollouts)
        x_tr = tr.reshape(len(y_tr), steps + 1, -1).transpose(1, 0, 2)
        x_te = te.reshape(len(y_te), steps + 1, -1).transpose(1, 0, 2)
        acc[si] = _train_classifiers(x_tr, y_tr, x_te, y_te, num_tasks, epochs, learning_rate,
                                     batch_size, seed)
    boot_rng = np.random.default_rng(12345)
    idx = boot_rng.integers(0, len(seeds), size=(n_boot, len(seeds)))
    boots = acc[idx].mean(axis=1)
    lo, hi = np.percentile(boots, [2.5, 97.5], axis=0)
    meta = dict(num_tasks=num_tasks, steps=steps, seeds=list(seeds), alpha=alpha, reward_std=reward_std,
                training=dict(optimizer="adam", betas=[0.9, 0.999], eps=1e-7, learning_rate=learning_rate,
                              epochs=epochs, batch_size=batch_size, hidden=64,
                              train_rollouts=train_rollouts, test_rollouts=test_rollouts))
    return ClassifierResult(acc, acc.mean(axis=0), lo, hi, meta)


def spec_dict(spec: DuplicateExperimentSpec) -> dict:
    return asdict(spec)
