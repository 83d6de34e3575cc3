"""Meta-policy networks: a causal transformer decoder with cached incremental inference,
and the feed-forward network used by the Markov bandit variant."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import binfmt

CHECKPOINT_MAGIC = b"RL3CKPT\x00"


class ContextOverflowError(ValueError):
    pass


@dataclass
class TransformerConfig:
    input_dim: int
    output_dim: int
    max_context: int
    layers: int = 2
    heads: int = 4
    model_width: int = 64
    ff_mult: int = 4
    activation: str = "gelu"

    def __post_init__(self):
        if self.model_width % self.heads:
            raise ValueError("model_width must be divisible by heads")


@dataclass
class MarkovNetConfig:
    input_dim: int
    output_dim: int
    hidden: int = 64
    hidden_layers: int = 2


class CausalSelfAttention(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = width // heads
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)

    def _split(self, x):
        # (B, T, 3W) -> 3 x (B, h, T, dh)
        B, T, _ = x.shape
        q, k, v = x.view(B, T, 3, self.heads, self.head_dim).permute(2, 0, 3, 1, 4)
        return q, k, v

    def forward(self, x):
        B, T, W = x.shape
        q, k, v = self._split(self.qkv(x))
        att = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        mask = torch.ones(T, T, dtype=torch.bool, device=x.device).triu(1)
        att = att.masked_fill(mask, float("-inf")).softmax(dim=-1)
        y = (att @ v).transpose(1, 2).reshape(B, T, W)
        return self.proj(y)

    def step(self, x, cache: dict, t: int):
        """x: (B, W) for position ``t``; appends its key/value to ``cache`` in place."""
        B, W = x.shape
        q, k, v = self._split(self.qkv(x)[:, None, :])
        cache["k"][:, :, t] = k[:, :, 0]
        cache["v"][:, :, t] = v[:, :, 0]
        keys = cache["k"][:, :, :t + 1]
        vals = cache["v"][:, :, :t + 1]
        att = ((q @ keys.transpose(-2, -1)) / math.sqrt(self.head_dim)).softmax(dim=-1)
        y = (att @ vals).transpose(1, 2).reshape(B, W)
        return self.proj(y)


class DecoderBlock(nn.Module):
    def __init__(self, cfg: TransformerConfig):
        super().__init__()
        W = cfg.model_width
        self.ln1 = nn.LayerNorm(W)
        self.attn = CausalSelfAttention(W, cfg.heads)
        self.ln2 = nn.LayerNorm(W)
        self.ff = nn.Sequential(nn.Linear(W, cfg.ff_mult * W), _activation(cfg.activation),
                                nn.Linear(cfg.ff_mult * W, W))

    def forward(self, x):
        x = x + self.attn(self.ln1(x))
        return x + self.ff(self.ln2(x))

    def step(self, x, cache, t):
        x = x + self.attn.step(self.ln1(x), cache, t)
        return x + self.ff(self.ln2(x))


def _activation(name: str) -> nn.Module:
    return {"gelu": nn.GELU(), "relu": nn.ReLU(), "tanh": nn.Tanh()}[name]


def _init_linear(m: nn.Module, gain: float = 1.0):
    bound = gain / math.sqrt(m.in_features)
    nn.init.uniform_(m.weight, -bound, bound)
    nn.init.zeros_(m.bias)


class TransformerDecoder(nn.Module):
    """Learned position embeddings + layer norm, then pre-norm masked self-attention blocks."""

    def __init__(self, cfg: TransformerConfig, output_gain: float = 1.0):
        super().__init__()
        self.cfg = cfg
        W = cfg.model_width
        self.embed = nn.Linear(cfg.input_dim, W)
        self.pos = nn.Parameter(torch.zeros(cfg.max_context, W))
        self.ln_embed = nn.LayerNorm(W)
        self.blocks = nn.ModuleList(DecoderBlock(cfg) for _ in range(cfg.layers))
        self.ln_out = nn.LayerNorm(W)
        self.head = nn.Linear(W, cfg.output_dim)
        for m in self.modules():
            if isinstance(m, nn.Linear):
                _init_linear(m)
        _init_linear(self.head, output_gain)
        nn.init.normal_(self.pos, std=0.02)

    def forward(self, obs):
        """obs: (B, T, input_dim) -> (B, T, output_dim); output i sees obs[:, :i+1] only."""
        T = obs.shape[1]
        if T > self.cfg.max_context:
            raise ContextOverflowError(f"sequence length {T} exceeds max_context {self.cfg.max_context}")
        h = self.ln_embed(self.embed(obs) + self.pos[:T])
        for blk in self.blocks:
            h = blk(h)
        return self.head(self.ln_out(h))

    def init_cache(self, batch: int) -> dict:
        cfg = self.cfg
        dh = cfg.model_width // cfg.heads
        p = self.pos
        shape = (batch, cfg.heads, cfg.max_context, dh)
        return {"t": 0, "layers": [{"k": p.new_zeros(shape), "v": p.new_zeros(shape)}
                                   for _ in range(cfg.layers)]}

    def step(self, cache: dict, obs_t):
        """obs_t: (B, input_dim) -> (B, output_dim) at the next position; O(t) per call."""
        t = cache["t"]
        if t >= self.cfg.max_context:
            raise ContextOverflowError(f"cache already holds max_context={self.cfg.max_context} steps")
        h = self.ln_embed(self.embed(obs_t) + self.pos[t])
        for blk, c in zip(self.blocks, cache["layers"]):
            h = blk.step(h, c, t)
        cache["t"] = t + 1
        return self.head(self.ln_out(h))


class MarkovNet(nn.Module):
    """Feed-forward network applied independently at every step (no history)."""

    def __init__(self, cfg: MarkovNetConfig, output_gain: float = 1.0):
        super().__init__()
        self.cfg = cfg
        dims = [cfg.input_dim] + [cfg.hidden] * cfg.hidden_layers
        layers = []
        for a, b in zip(dims[:-1], dims[1:]):
            layers += [nn.Linear(a, b), nn.ReLU()]
        layers.append(nn.Linear(dims[-1], cfg.output_dim))
        self.net = nn.Sequential(*layers)
        for m in self.net:
            if isinstance(m, nn.Linear):
                _init_linear(m)
        _init_linear(self.net[-1], output_gain)

    def forward(self, obs):
        return self.net(obs)

    def init_cache(self, batch: int) -> dict:
        return {"t": 0}

    def step(self, cache, obs_t):
        cache["t"] += 1
        return self.net(obs_t)


def forward_sequence(model: nn.Module, observations) -> torch.Tensor:
    return model(observations)


def forward_incremental(model: nn.Module, cache: dict, observation) -> torch.Tensor:
    return model.step(cache, observation)


def backward(model: nn.Module, observations, output_grads) -> dict[str, torch.Tensor]:
    """Reverse-mode gradients of sum(outputs * output_grads) w.r.t. every parameter."""
    model.zero_grad(set_to_none=True)
    out = model(observations)
    out.backward(output_grads)
    return {name: (p.grad.clone() if p.grad is not None else torch.zeros_like(p))
            for name, p in model.named_parameters()}


def param_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


class ActorCritic(nn.Module):
    """Separate actor (logits) and critic (value) networks sharing an observation layout."""

    def __init__(self, kind: str, obs_dim: int, num_actions: int, max_context: int,
                 layers: int = 2, heads: int = 4, model_width: int = 64, ff_mult: int = 4,
                 hidden: int = 64, activation: str = "gelu"):
        super().__init__()
        self.kind = kind
        self.meta = dict(kind=kind, obs_dim=obs_dim, num_actions=num_actions, max_context=max_context,
                         layers=layers, heads=heads, model_width=model_width, ff_mult=ff_mult,
                         hidden=hidden, activation=activation)
        if kind == "transformer":
            mk = lambda out, gain: TransformerDecoder(TransformerConfig(  # noqa: E731
                obs_dim, out, max_context, layers, heads, model_width, ff_mult, activation), gain)
        elif kind == "markov":
            mk = lambda out, gain: MarkovNet(MarkovNetConfig(obs_dim, out, hidden), gain)  # noqa: E731
        else:
            raise ValueError(f"unknown network kind {kind!r}")
        # small actor head: near-uniform initial policy
        self.actor = mk(num_actions, 0.01)
        self.critic = mk(1, 1.0)

    @property
    def obs_dim(self) -> int:
        return self.meta["obs_dim"]

    @property
    def num_actions(self) -> int:
        return self.meta["num_actions"]

    def init_caches(self, batch: int):
        return self.actor.init_cache(batch), self.critic.init_cache(batch)

    @torch.no_grad()
    def step(self, caches, obs_t):
        return self.actor.step(caches[0], obs_t), self.critic.step(caches[1], obs_t)[:, 0]

    def forward(self, obs):
        return self.actor(obs), self.critic(obs)[..., 0]


# --------------------------------------------------------------------------- checkpoints


def save_checkpoint(path, policy: ActorCritic, header: dict | None = None,
                    extra: dict[str, np.ndarray] | None = None) -> None:
    arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in policy.state_dict().items()}
    for k, v in (extra or {}).items():
        arrays[f"extra/{k}"] = np.asarray(v)
    hdr = {"kind": "checkpoint", "network": policy.meta,
           "dtype": str(next(policy.parameters()).dtype).replace("torch.", "")}
    hdr.update(header or {})
    binfmt.write_container(path, CHECKPOINT_MAGIC, hdr, arrays)


def load_checkpoint(path, dtype: torch.dtype | None = None):
    """Return (policy, header, extra arrays)."""
    header, arrays = binfmt.read_container(path, CHECKPOINT_MAGIC)
    policy = ActorCritic(**header["network"])
    dtype = dtype or getattr(torch, header.get("dtype", "float32"))
    policy.to(dtype)
    state = {k[len("param/"):]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("param/")}
    policy.load_state_dict(state)
    extra = {k[len("extra/"):]: v for k, v in arrays.items() if k.startswith("extra/")}
    return policy, header, extra


def config_dict(cfg) -> dict:
    return asdict(cfg)
