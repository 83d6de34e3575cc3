from rl3lab.config import ExperimentConfig


def tiny_config(tmp_path, name="run", **kw):
    """A bandit config small enough to train in about a second per iteration."""
    base = dict(family="bandits", task={"k": 3}, interaction_budget=5, ppo_iterations=2, batch_size=40,
                minibatch_size=20, epochs_per_iteration=2, decoder_layers=1, attention_heads=2,
                decoder_size=16, markov_hidden=8, eval_set_size=20, output_dir=str(tmp_path / name))
    base.update(kw)
    return ExperimentConfig(**base)
