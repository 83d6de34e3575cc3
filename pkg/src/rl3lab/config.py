"""Experiment configuration as a flat ``key = value`` text file.

Hyperparameter keys are snake_case forms of the usual PPO/transformer table rows
(``learning_rate``, ``adam_beta1`` ... ``decoder_size``). Task-family parameters use a
``task.`` prefix, e.g. ``task.k = 5``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from .envs import FAMILIES, TaskDistributionSpec, _parse_scalar
from .meta_train import FAMILY_PPO, PpoConfig

ALGORITHMS = ("rl2", "rl3", "rl3_coarse", "rl3_markov")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    family: str = "bandits"
    algorithm: str = "rl3"
    interaction_budget: int = 20
    ppo_iterations: int = 200
    eval_set_size: int = 1000
    seed: int = 0
    output_dir: str = "runs/default"
    checkpoint_every: int = 25
    # optimisation
    learning_rate: float = 3e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-7
    weight_decay: float = 1e-2
    batch_size: int = 2560
    minibatch_size: int = 640
    entropy_regularization_coeff: float = 0.01
    entropy_regularization_final: float | None = None
    epochs_per_iteration: int = 8
    max_kl_per_iteration: float = 0.01
    ppo_clip_epsilon: float = 0.2
    gae_lambda: float = 0.3
    discount_factor: float = 0.99
    value_coef: float = 0.5
    max_grad_norm: float = 1.0
    # networks
    decoder_layers: int = 2
    attention_heads: int = 4
    activation_function: str = "gelu"
    decoder_size: int = 64
    feedforward_mult: int = 4
    markov_hidden: int = 64
    # object-level learner
    clustering_radius: float = 1.0
    max_cluster_size: int = 2
    q_layout: str = "advantage"
    task: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown family {self.family!r}")
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}")
        if self.algorithm == "rl3_markov" and self.family != "bandits":
            raise ConfigError("rl3_markov is only defined for bandits")
        if self.algorithm == "rl3_coarse" and self.family != "gridworld":
            raise ConfigError("rl3_coarse is only defined for gridworlds")
        if self.interaction_budget < 1:
            raise ConfigError("interaction_budget must be >= 1")
        if self.batch_size % self.interaction_budget:
            raise ConfigError("batch_size must be a multiple of interaction_budget")
        if self.minibatch_size % self.interaction_budget or self.batch_size % self.minibatch_size:
            raise ConfigError("minibatch_size must hold whole meta-episodes and divide batch_size")
        if self.ppo_iterations < 0 or self.eval_set_size < 1:
            raise ConfigError("ppo_iterations must be >= 0 and eval_set_size >= 1")

    # derived objects
    @property
    def num_parallel_envs(self) -> int:
        return self.batch_size // self.interaction_budget

    @property
    def network_kind(self) -> str:
        return "markov" if self.algorithm == "rl3_markov" else "transformer"

    def ppo(self) -> PpoConfig:
        return PpoConfig(learning_rate=self.learning_rate, adam_betas=(self.adam_beta1, self.adam_beta2),
                         adam_eps=self.adam_epsilon, critic_weight_decay=self.weight_decay,
                         batch_size=self.batch_size, minibatch_size=self.minibatch_size,
                         epochs=self.epochs_per_iteration, clip=self.ppo_clip_epsilon,
                         max_kl=self.max_kl_per_iteration, entropy_coef=self.entropy_regularization_coeff,
                         entropy_coef_final=self.entropy_regularization_final, gamma=self.discount_factor,
                         gae_lambda=self.gae_lambda, value_coef=self.value_coef,
                         max_grad_norm=self.max_grad_norm)

    def task_spec(self, ood_variant: str | None = None) -> TaskDistributionSpec:
        return TaskDistributionSpec(self.family, tuple(self.task.items()), ood_variant, self.seed)

    def env_kwargs(self) -> dict:
        if self.algorithm == "rl2":
            return {}
        kw = {"q_layout": self.q_layout}
        if self.algorithm == "rl3_coarse":
            kw.update(clustering_radius=self.clustering_radius, max_cluster_size=self.max_cluster_size)
        return kw

    def network_kwargs(self) -> dict:
        return dict(layers=self.decoder_layers, heads=self.attention_heads, model_width=self.decoder_size,
                    ff_mult=self.feedforward_mult, hidden=self.markov_hidden)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    @classmethod
    def for_family(cls, family: str, algorithm: str = "rl3", **overrides) -> "ExperimentConfig":
        """Per-family PPO defaults, then ``overrides``."""
        base = dict(FAMILY_PPO[family])
        kw = {"learning_rate": base["learning_rate"], "entropy_regularization_coeff": base["entropy_coef"],
              "entropy_regularization_final": base.get("entropy_coef_final")}
        kw.update(overrides)
        return cls(family=family, algorithm=algorithm, **kw)

    # text form
    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "task":
                lines += [f"task.{k} = {_fmt(x)}" for k, x in sorted(v.items())]
            else:
                lines.append(f"{f.name} = {_fmt(v)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        types = {f.name: f.type for f in fields(cls)}
        kw: dict = {"task": {}}
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if not sep:
                raise ConfigError(f"line {n}: expected 'key = value', got {raw!r}")
            if key.startswith("task."):
                kw["task"][key[5:]] = _parse_scalar(value)
            elif key in types and key != "task":
                kw[key] = _cast(value, types[key], key)
            else:
                raise ConfigError(f"line {n}: unknown key {key!r}")
        return cls(**kw)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        return cls.from_text(Path(path).read_text())

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _cast(value: str, typ: str, key: str):
    if value == "none":
        if "None" in typ:
            return None
        raise ConfigError(f"{key} may not be none")
    try:
        if typ.startswith("int"):
            return int(value)
        if typ.startswith("float"):
            return float(value)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r} as {typ}") from None
    return value


def builtin_config(name: str) -> Path:
    p = Path(__file__).parent / "configs" / f"{name}.cfg"
    if not p.exists():
        raise ConfigError(f"no built-in config {name!r}")
    return p
