"""Time the compiled value-iteration kernel against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeats 20]

Problem sizes cover a bandit, a 10-state random MDP and 7x7 / 13x13 gridworlds at
the horizons the meta-environments use, plus a full VAMDP meta-episode, which calls
the kernel once per step.
"""

import argparse
import timeit

import numpy as np

from rl3lab import _vi_fallback, kernels
from rl3lab.envs import TaskDistributionSpec
from rl3lab.vamdp import VamdpEnv

CASES = [("bandit 1x5", 1, 5, 20), ("random MDP 10x5", 10, 5, 128), ("grid 7x7", 49, 5, 100),
         ("grid 13x13", 169, 5, 350)]


def problem(n, A, seed=0):
    rng = np.random.default_rng(seed)
    T = rng.dirichlet(np.full(n, 0.3), size=(n, A))
    return T, rng.normal(size=(n, A)), np.zeros(n, np.uint8)


def bench(fn, args, repeats):
    return min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeats))


def meta_episode(family, budget, **params):
    mdp = TaskDistributionSpec.make(family, **params).sample(0)
    env = VamdpEnv(mdp, budget, np.random.default_rng(0))
    env.reset()
    rng = np.random.default_rng(1)
    while not env.meta_done:
        env.step(int(rng.integers(mdp.num_actions)))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=20)
    args = ap.parse_args()
    print(f"active backend: {kernels.BACKEND}")
    if kernels.BACKEND != "cython":
        print("compiled kernel unavailable; build with `pip install -e . --no-build-isolation`")
        return
    print(f"{'case':<18}{'horizon':>8}{'cython ms':>12}{'numpy ms':>12}{'speedup':>9}")
    for name, n, A, H in CASES:
        T, R, term = problem(n, A)
        for tol in (0.0, 0.01):
            c = bench(kernels.finite_horizon_vi, (T, R, term, H, tol), args.repeats)
            p = bench(_vi_fallback.finite_horizon_vi, (T, R, term, H, tol), args.repeats)
            print(f"{name + (' tol' if tol else ''):<18}{H:>8}{1e3 * c:>12.3f}{1e3 * p:>12.3f}{p / c:>9.1f}")

    import rl3lab.tabular_rl as tr
    reps = max(1, args.repeats // 10)
    for label, fam, budget, params in (("meta-episode grid7", "gridworld", 100, {"size": 7}),
                                       ("meta-episode mdp", "random_mdps", 128, {})):
        c = min(timeit.repeat(lambda: meta_episode(fam, budget, **params), number=1, repeat=reps))
        saved = tr.finite_horizon_vi
        tr.finite_horizon_vi = _vi_fallback.finite_horizon_vi
        try:
            p = min(timeit.repeat(lambda: meta_episode(fam, budget, **params), number=1, repeat=reps))
        finally:
            tr.finite_horizon_vi = saved
        print(f"{label:<18}{budget:>8}{1e3 * c:>12.1f}{1e3 * p:>12.1f}{p / c:>9.1f}")


if __name__ == "__main__":
    main()
