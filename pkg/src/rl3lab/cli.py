"""Command line: train, eval, analyze, make-eval-set."""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, builtin_config
from .envs import TaskDistributionSpec, _parse_scalar

ANALYSES = ("sufficiency", "insufficiency", "uniqueness", "duplicates", "duplicates-over-time",
            "classifier", "bamdp-bounds", "plots")


def _load_config(arg: str) -> ExperimentConfig:
    p = Path(arg)
    return ExperimentConfig.from_file(p if p.exists() else builtin_config(arg))


def cmd_train(args) -> int:
    from .training import make_eval_set, run_seeds, run_training

    cfg = _load_config(args.config)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.iterations is not None:
        changes["ppo_iterations"] = args.iterations
    if args.out:
        changes["output_dir"] = args.out
    cfg = cfg.replace(**changes)

    def progress(it, row):
        if not args.quiet:
            print(f"iter {it:4d}  mean return {row[1]:.4f}", flush=True)

    if args.seeds > 1:
        _, tasks = make_eval_set(cfg.task_spec(), cfg.eval_set_size, args.eval_seed)
        best, rep, summary = run_seeds(cfg, args.seeds, tasks, args.report)
        print(summary)
        print(rep.text())
        return 0
    t0 = time.time()
    res = run_training(cfg, resume=not args.fresh, progress=progress)
    print(f"checkpoint: {res.checkpoint}\nlog: {res.log_path}\nwall time: {time.time() - t0:.1f}s")
    return 0


def cmd_eval(args) -> int:
    from .training import eval_checkpoint, load_eval_tasks, load_training_checkpoint, run_baseline

    spec, seeds, tasks = load_eval_tasks(args.eval_set, args.ood)
    meta = {"eval_set": str(args.eval_set), "ood": args.ood or "none"}
    if args.baseline:
        if args.budget is None and args.checkpoint is None:
            print("--baseline needs --budget or --checkpoint", file=sys.stderr)
            return 2
        budget = args.budget or load_training_checkpoint(args.checkpoint)[2].interaction_budget
        rep = run_baseline(args.baseline, tasks, budget, args.eval_seed)
        rep.meta.update(meta)
    else:
        if args.checkpoint is None:
            print("eval needs --checkpoint (or --baseline)", file=sys.stderr)
            return 2
        rep = eval_checkpoint(args.checkpoint, tasks, args.greedy, args.eval_seed, meta)
    print(rep.text())
    if args.out:
        rep.save(args.out)
    return 0


def cmd_make_eval_set(args) -> int:
    from .training import make_eval_set

    params = dict(kv.split("=", 1) for kv in args.param)
    spec = TaskDistributionSpec.make(args.family, **{k: _parse_scalar(v) for k, v in params.items()})
    seeds, _ = make_eval_set(spec, args.n, args.seed, args.out)
    print(f"wrote {len(seeds)} {args.family} tasks to {args.out}")
    return 0


def _write(out: Path | None, name: str, text: str) -> None:
    if out:
        out.mkdir(parents=True, exist_ok=True)
        (out / name).write_text(text)


def cmd_analyze(args) -> int:
    from . import analysis, bamdp

    out = Path(args.out) if args.out else None
    rng = np.random.default_rng(args.seed)
    name = args.name
    if name == "sufficiency":
        worst = 0.0
        for _ in range(args.trials):
            k, L = 5, 50
            tasks = rng.uniform(size=(args.num_tasks, k))
            prior = rng.dirichlet(np.ones(args.num_tasks))
            truth = tasks[rng.integers(args.num_tasks)]
            acts = rng.integers(k, size=L)
            rews = (rng.uniform(size=L) < truth[acts]).astype(float)
            Q, N, _ = analysis.stats_from_trajectory(acts, rews, k)
            a = analysis.bernoulli_log_posterior_from_stats(prior, tasks, Q, N)
            b = analysis.bernoulli_log_posterior_from_trajectory(prior, tasks, acts, rews)
            worst = max(worst, float(np.abs(a - b).max()))
        report = (f"Bernoulli sufficiency: {args.trials} random 5-arm trajectories of length 50, "
                  f"{args.num_tasks} candidate tasks, seed {args.seed}\n"
                  f"max |log posterior(Q, N) - log posterior(trajectory)| = {worst:.3e}")
        _write(out, "sufficiency.csv", f"trials,num_tasks,seed,max_log_gap\n{args.trials},{args.num_tasks},"
                                       f"{args.seed},{worst!r}\n")
    elif name == "insufficiency":
        w = analysis.insufficiency_witness(sigma=args.sigma)
        report = "Gaussian insufficiency witness\n" + w.text()
        _write(out, "insufficiency.csv", "trajectory,rewards,Q,N,Var,loglik\n"
               f"A,{' '.join(map(str, w.rewards_a))},{w.stats_a[0][0]},{w.stats_a[1][0]},{w.stats_a[2][0]},{w.loglik_a!r}\n"
               f"B,{' '.join(map(str, w.rewards_b))},{w.stats_b[0][0]},{w.stats_b[1][0]},{w.stats_b[2][0]},{w.loglik_b!r}\n")
    elif name == "uniqueness":
        res = analysis.uniqueness_property_trials(args.trials, rng)
        report = "Q* uniqueness under shared transitions\n" + json.dumps(res, indent=2)
        _write(out, "uniqueness.csv", ",".join(res) + "\n" + ",".join(str(v) for v in res.values()) + "\n")
    elif name in ("duplicates", "duplicates-over-time"):
        n = 50_000 if args.full else args.num_mdps
        spec = analysis.DuplicateExperimentSpec(num_mdps=n, alpha=args.alpha, beta=args.beta,
                                                delta=args.delta, seed=args.seed)
        if name == "duplicates":
            res = analysis.duplicate_probability(spec, args.method)
            report, csv_text = res.text(), res.csv()
        else:
            frac = analysis.duplicate_fraction_over_time(spec, args.steps)
            csv_text = "t,fraction\n" + "".join(f"{t},{f!r}\n" for t, f in enumerate(frac))
            report = (f"delta-duplicate fraction of Q-estimates along a shared random policy; "
                      f"{json.dumps(analysis.spec_dict(spec))}\n"
                      + "\n".join(f"t={t}: {f:.3e}" for t, f in enumerate(frac) if t % 10 == 0 or t == len(frac) - 1))
        _write(out, f"{name}.csv", csv_text)
    elif name == "classifier":
        res = analysis.task_classifier_experiment(num_tasks=args.num_tasks, steps=args.steps,
                                                  seeds=tuple(range(args.seed, args.seed + args.n_seeds)))
        report, csv_text = res.text(), res.csv()
        _write(out, "classifier.csv", csv_text)
    elif name == "bamdp-bounds":
        rows, bad = [], 0
        lines = []
        for i in range(args.trials):
            tasks = bamdp.random_task_set(rng, int(rng.integers(1, 5)), int(rng.integers(1, 5)),
                                          int(rng.integers(1, 4)))
            prior = rng.dirichlet(np.ones(len(tasks)))
            horizon = int(rng.integers(1, 5))
            rep = bamdp.verify_bounds(tasks, prior, horizon, start_state=0)
            bad += not rep.ok
            rows.append(rep.nodes_csv())
            lines.append(f"instance {i}: {len(tasks)} tasks, {tasks[0].num_states} states, horizon {horizon}, "
                         f"value {rep.value:.6g}, ok={rep.ok}, bellman err {rep.max_bellman_error:.1e}")
        report = "\n".join(lines + [f"instances with violations: {bad} / {args.trials}"])
        if out:
            out.mkdir(parents=True, exist_ok=True)
            for i, text in enumerate(rows):
                (out / f"bamdp_nodes_{i:03d}.csv").write_text(text)
    elif name == "plots":
        from .plots import emit_plots

        logs = dict(item.split("=", 1) for item in args.logs)
        files = emit_plots(logs, {}, args.out or "plots", baseline=args.baseline)
        report = "wrote " + ", ".join(str(f) for f in files)
    else:
        raise AssertionError(name)
    print(report)
    _write(out, f"{name}_report.txt", report + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rl3lab", description="Value-augmented meta-RL experiments")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="meta-train a policy with PPO")
    t.add_argument("--config", required=True, help="config file or built-in config name")
    t.add_argument("--seed", type=int)
    t.add_argument("--iterations", type=int, help="override ppo_iterations")
    t.add_argument("--out", help="override output_dir")
    t.add_argument("--seeds", type=int, default=1, help="train this many consecutive seeds")
    t.add_argument("--report", default="median", choices=["median"])
    t.add_argument("--eval-seed", type=int, default=0, help="eval-set seed for multi-seed reports")
    t.add_argument("--fresh", action="store_true", help="ignore an existing checkpoint")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint or a baseline on a saved task set")
    e.add_argument("--checkpoint")
    e.add_argument("--eval-set", required=True)
    e.add_argument("--ood", help="re-sample the set's seeds under this variant")
    e.add_argument("--greedy", action="store_true")
    e.add_argument("--baseline", choices=["random", "ucb1", "oracle"])
    e.add_argument("--budget", type=int, help="interaction budget for baselines")
    e.add_argument("--eval-seed", type=int, default=0)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("analyze", help="run an analysis experiment")
    a.add_argument("name", choices=ANALYSES)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out")
    a.add_argument("--trials", type=int, default=100)
    a.add_argument("--num-tasks", type=int, default=100)
    a.add_argument("--num-mdps", type=int, default=5000)
    a.add_argument("--full", action="store_true", help="50,000 MDPs (multi-hour)")
    a.add_argument("--alpha", type=float, default=1.0)
    a.add_argument("--beta", type=float, default=1.0)
    a.add_argument("--delta", type=float, default=0.1)
    a.add_argument("--sigma", type=float, default=1.0)
    a.add_argument("--steps", type=int, default=50)
    a.add_argument("--n-seeds", type=int, default=5)
    a.add_argument("--method", default="kdtree", choices=["kdtree", "bruteforce"])
    a.add_argument("--logs", nargs="*", default=[], help="name=path/to/train_log.csv")
    a.add_argument("--baseline", default="rl2")
    a.set_defaults(func=cmd_analyze)

    m = sub.add_parser("make-eval-set", help="sample and save a held-out task set")
    m.add_argument("--family", required=True)
    m.add_argument("--n", type=int, default=1000)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--param", action="append", default=[], help="family parameter key=value")
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_make_eval_set)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
