import pytest

from rl3lab.config import ALGORITHMS, ConfigError, ExperimentConfig, builtin_config
from rl3lab.envs import TaskDistributionSpec

BUILTINS = ["bandits_h20", "bandits_h100", "bandits_h100_full", "bandits_h500_full", "gridworld11_h250_full",
            "gridworld13_h350_full", "gridworld7_mini", "mdps_h128", "mdps_h500_full"]


@pytest.mark.parametrize("name", BUILTINS)
def test_builtin_configs_round_trip(name):
    cfg = ExperimentConfig.from_file(builtin_config(name))
    again = ExperimentConfig.from_text(cfg.to_text())
    assert again == cfg and again.to_text() == cfg.to_text()
    assert cfg.batch_size % cfg.minibatch_size == 0
    cfg.task_spec().sample(0)


def test_text_format_and_comments():
    cfg = ExperimentConfig.from_text("# c\nfamily = gridworld\ntask.size = 7\nalgorithm = rl3_coarse\n"
                                     "interaction_budget = 10\nbatch_size = 100\nminibatch_size = 50  # tail\n"
                                     "entropy_regularization_final = 0.001\n")
    assert cfg.task == {"size": 7} and cfg.entropy_regularization_final == 0.001
    assert "task.size = 7" in cfg.to_text()
    assert cfg.task_spec() == TaskDistributionSpec.make("gridworld", size=7)


@pytest.mark.parametrize("text,msg", [
    ("family = chess\n", "unknown family"),
    ("algorithm = dqn\n", "unknown algorithm"),
    ("family = random_mdps\nalgorithm = rl3_markov\n", "only defined for bandits"),
    ("algorithm = rl3_coarse\n", "only defined for gridworlds"),
    ("batch_size = 2561\n", "multiple of interaction_budget"),
    ("minibatch_size = 30\n", "whole meta-episodes"),
    ("learning_rate = fast\n", "cannot parse"),
    ("colour = red\n", "unknown key"),
    ("just words\n", "expected 'key = value'"),
    ("seed = none\n", "may not be none"),
])
def test_invalid_configs(text, msg):
    with pytest.raises(ConfigError, match=msg):
        ExperimentConfig.from_text(text)


def test_unknown_builtin():
    with pytest.raises(ConfigError):
        builtin_config("nope")


def test_derived_objects():
    cfg = ExperimentConfig.for_family("gridworld", "rl3_coarse", interaction_budget=10, batch_size=100,
                                      minibatch_size=50)
    assert cfg.num_parallel_envs == 10 and cfg.network_kind == "transformer"
    assert cfg.env_kwargs() == {"q_layout": "advantage", "clustering_radius": 1.0, "max_cluster_size": 2}
    assert ExperimentConfig(algorithm="rl2").env_kwargs() == {}
    assert ExperimentConfig(algorithm="rl3_markov").network_kind == "markov"
    ppo = cfg.ppo()
    assert ppo.batch_size == 100 and ppo.minibatch_size == 50 and ppo.adam_eps == 1e-7
    assert set(ALGORITHMS) == {"rl2", "rl3", "rl3_coarse", "rl3_markov"}
