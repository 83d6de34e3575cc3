import csv

import numpy as np
import pytest
import torch

from harness_util import tiny_config
from rl3lab.envs import TaskDistributionSpec
from rl3lab.training import (EVAL_SEED_RANGE, LOG_FIELDS, TRAIN_SEED_RANGE, EvalReport, LayoutMismatchError,
                             build_policy, eval_checkpoint, eval_task_seeds, load_training_checkpoint,
                             make_eval_set, run_baseline, run_eval, run_seeds, run_training, train_task_seeds)


def rows(path):
    with open(path, newline="") as f:
        return list(csv.reader(f))


def test_zero_iterations_writes_checkpoint_and_header(tmp_path):
    cfg = tiny_config(tmp_path, ppo_iterations=0)
    res = run_training(cfg)
    assert res.checkpoint.exists()
    assert rows(res.log_path) == [LOG_FIELDS]
    policy, _, saved, it = load_training_checkpoint(res.checkpoint)
    assert it == 0 and saved == cfg


def test_task_seeds_independent_of_algorithm(tmp_path):
    a = run_training(tiny_config(tmp_path, "a", algorithm="rl2"))
    b = run_training(tiny_config(tmp_path, "b", algorithm="rl3"))
    assert (a.log_path.parent / "task_seeds.csv").read_bytes() == (b.log_path.parent / "task_seeds.csv").read_bytes()
    assert rows(a.log_path) != rows(b.log_path)


def test_resume_matches_uninterrupted_run(tmp_path):
    full = run_training(tiny_config(tmp_path, "full", ppo_iterations=4))
    run_training(tiny_config(tmp_path, "part", ppo_iterations=2))
    part = run_training(tiny_config(tmp_path, "part", ppo_iterations=4))
    assert full.log_path.read_bytes() == part.log_path.read_bytes()
    pa, _, _, ia = load_training_checkpoint(full.checkpoint)
    pb, _, _, ib = load_training_checkpoint(part.checkpoint)
    assert ia == ib == 4
    assert all(torch.equal(x, y) for x, y in zip(pa.state_dict().values(), pb.state_dict().values()))


def test_resume_rejects_changed_config(tmp_path):
    run_training(tiny_config(tmp_path, "r", ppo_iterations=1))
    with pytest.raises(ValueError, match="different config"):
        run_training(tiny_config(tmp_path, "r", ppo_iterations=1, learning_rate=1e-3))


def test_log_columns(tmp_path):
    res = run_training(tiny_config(tmp_path))
    r = rows(res.log_path)
    assert r[0] == LOG_FIELDS and [int(x[0]) for x in r[1:]] == [0, 1]
    assert all(len(x) == len(LOG_FIELDS) for x in r)


def test_eval_and_train_seeds_disjoint():
    ev = eval_task_seeds(0, 1000)
    tr = np.concatenate([train_task_seeds(s, it, 128) for s in range(3) for it in range(5)])
    assert ev.min() >= EVAL_SEED_RANGE[0] and tr.max() < TRAIN_SEED_RANGE[1]
    assert not set(ev.tolist()) & set(tr.tolist())
    assert len(set(ev.tolist())) == 1000


def test_make_eval_set_round_trip(tmp_path):
    from rl3lab.envs import load_task_set
    spec = TaskDistributionSpec.make("bandits")
    seeds, mdps = make_eval_set(spec, 10, 3, tmp_path / "set.bin")
    spec2, seeds2, mdps2 = load_task_set(tmp_path / "set.bin")
    assert spec2 == spec and list(seeds2) == list(seeds)
    assert all(a.same_as(b) for a, b in zip(mdps, mdps2))


def _bandits(n, seed=0, **params):
    return make_eval_set(TaskDistributionSpec.make("bandits", **params), n, seed)[1]


def test_oracle_baseline_fraction_near_one():
    rep = run_baseline("oracle", _bandits(400), 20)
    assert abs(rep.oracle_fraction - 1.0) <= 4 * rep.standard_error / np.mean(rep.oracle_values)


def test_random_baseline_mean():
    rep = run_baseline("random", _bandits(400), 100)
    assert abs(rep.mean - 50.0) <= 4 * rep.standard_error + 4 * 100 * np.sqrt(1 / 12 / 5 / 400)


def test_ucb_beats_random():
    tasks = _bandits(300)
    assert run_baseline("ucb1", tasks, 100).mean > run_baseline("random", tasks, 100).mean
    with pytest.raises(ValueError):
        run_baseline("greedy", tasks, 10)


def test_standard_error_uses_sample_std():
    rep = EvalReport(np.array([1.0, 2.0, 3.0, 6.0]), np.ones(4), np.arange(4))
    assert rep.standard_error == pytest.approx(np.std([1, 2, 3, 6], ddof=1) / 2)
    assert np.isnan(EvalReport(np.array([1.0]), np.ones(1), np.arange(1)).standard_error)
    assert EvalReport(np.array([2.0]), np.ones(1), np.arange(1)).flagged


def test_layout_mismatch_names_dimension(tmp_path):
    cfg = tiny_config(tmp_path)
    policy = build_policy(cfg, 1, 3)
    with pytest.raises(LayoutMismatchError, match="observation dimension"):
        run_eval(policy, cfg, _bandits(2, k=4))
    with pytest.raises(LayoutMismatchError, match="context length"):
        run_eval(policy, cfg.replace(interaction_budget=10, batch_size=40, minibatch_size=20), _bandits(2, k=3))


def test_eval_checkpoint_is_deterministic(tmp_path):
    res = run_training(tiny_config(tmp_path))
    tasks = _bandits(30, k=3)
    a, b = eval_checkpoint(res.checkpoint, tasks), eval_checkpoint(res.checkpoint, tasks)
    assert a.returns.tobytes() == b.returns.tobytes() and a.n == 30
    assert (a.task_seeds >= EVAL_SEED_RANGE[0]).all()
    a.save(tmp_path / "ev")
    assert (tmp_path / "ev" / "eval_returns.csv").read_text().startswith("task_seed,return,oracle_value")


def test_run_seeds_picks_median(tmp_path):
    cfg = tiny_config(tmp_path, "multi", ppo_iterations=1)
    best, rep, summary = run_seeds(cfg, 3, _bandits(20, k=3))
    means = sorted((float(l.split()[-1]), int(l.split()[1][:-1])) for l in summary.splitlines()[:3])
    assert best == means[1][1] and summary.endswith(f"median seed: {best}")
    assert (tmp_path / "multi" / "median.txt").exists()
    with pytest.raises(ValueError):
        run_seeds(cfg, 1, [], report="mean")
