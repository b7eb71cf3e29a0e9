"""Perception, decision, reasoning, and value networks plus the similarity reward."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autonn import (
    ParamSet,
    Tensor,
    as_tensor,
    concat,
    forward_lstm,
    forward_mlp,
    init_lstm,
    init_mlp,
    load_checkpoint,
    save_checkpoint,
)
from .simworld import OBS_DIM, V_MAX, W_MAX

LATENT_DIM = 90
SEQ_LEN = 20
ACT_DIM = 2
LOGVAR_MIN = math.log(1e-8)
LOGVAR_MAX = 5.0
LOG_STD_MIN, LOG_STD_MAX = -5.0, 1.0
LOG_2PI = math.log(2.0 * math.pi)
# log density of the 90-d standard normal at its mode.
LN_RHO = -0.5 * LATENT_DIM * LOG_2PI
SIM_LOG_FLOOR = -20.0

MODEL_NAMES = ("perception", "decision", "reasoning", "value")


@dataclass
class ModelConfig:
    obs_dim: int = OBS_DIM
    act_dim: int = ACT_DIM
    latent_dim: int = LATENT_DIM
    lstm_hidden: int = 128
    mlp_hidden: tuple = (128,)
    seq_len: int = SEQ_LEN
    log_std_init: float = -0.5


@dataclass
class LatentGaussian:
    """Diagonal Gaussian; ``logvar`` is what the network emits."""
    mu: Tensor
    logvar: Tensor

    @property
    def var(self) -> Tensor:
        return self.logvar.exp()

    def arrays(self) -> tuple:
        return self.mu.data, np.exp(self.logvar.data)


@dataclass
class PolicyHead:
    """Squashed Gaussian: u ~ N(pre_mean, exp(log_std)^2), action = squash(u).

    Log-probabilities are the pre-squash Gaussian density at unsquash(action);
    the Jacobian term does not depend on the parameters, so it cancels in PPO
    ratios and is omitted. Entropy is likewise the pre-squash entropy.
    """

    mean: Tensor  # squashed action mean, (B, 2)
    pre_mean: Tensor  # (B, 2)
    log_std: Tensor  # (2,)

    def log_prob(self, actions) -> Tensor:
        return gaussian_log_prob(self.pre_mean, self.log_std, unsquash(actions))

    def entropy(self) -> Tensor:
        return (self.log_std + 0.5 * (LOG_2PI + 1.0)).sum()

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        """Squashed sample; always inside the action bounds."""
        std = np.exp(self.log_std.data)
        u = self.pre_mean.data + std * rng.standard_normal(self.pre_mean.shape)
        return squash(Tensor(u)).data


class Models:
    """The four parameter sets, addressable by name."""

    def __init__(self, perception: ParamSet, decision: ParamSet, reasoning: ParamSet, value: ParamSet,
                 cfg: ModelConfig | None = None):
        self.perception = perception
        self.decision = decision
        self.reasoning = reasoning
        self.value = value
        self.cfg = cfg or ModelConfig()

    @classmethod
    def initialize(cls, seed: int = 0, cfg: ModelConfig | None = None) -> "Models":
        cfg = cfg or ModelConfig()
        rng = np.random.default_rng(seed)
        head = [cfg.lstm_hidden, *cfg.mlp_hidden, 2 * cfg.latent_dim]
        perception = init_lstm("perception", cfg.obs_dim, cfg.lstm_hidden, rng,
                               ps=init_mlp("perception", head, rng))
        reasoning = init_lstm("reasoning", cfg.act_dim, cfg.lstm_hidden, rng,
                              ps=init_mlp("reasoning", head, rng))
        decision = init_mlp("decision", [cfg.latent_dim, *cfg.mlp_hidden, cfg.act_dim], rng)
        decision.add("log_std", np.full(cfg.act_dim, cfg.log_std_init))
        value = init_mlp("value", [cfg.latent_dim, *cfg.mlp_hidden, 1], rng)
        return cls(perception, decision, reasoning, value, cfg)

    def sets(self) -> dict:
        return {name: getattr(self, name) for name in MODEL_NAMES}

    def copy(self) -> "Models":
        return Models(*(getattr(self, n).copy() for n in MODEL_NAMES), cfg=self.cfg)

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name, ps in self.sets().items():
            save_checkpoint(ps, directory / f"{name}.nlnn")

    @classmethod
    def load(cls, directory, names=MODEL_NAMES) -> "Models":
        directory = Path(directory)
        missing = [str(directory / f"{n}.nlnn") for n in names if not (directory / f"{n}.nlnn").is_file()]
        if missing:
            raise FileNotFoundError(f"missing checkpoint file(s): {', '.join(missing)}")
        loaded = {n: load_checkpoint(directory / f"{n}.nlnn", name=n) for n in names}
        wx = loaded["perception"]["lstm_Wx"]
        cfg = ModelConfig(obs_dim=wx.shape[0], lstm_hidden=wx.shape[1] // 4,
                          latent_dim=loaded["decision"]["W0"].shape[0])
        fresh = cls.initialize(0, cfg)
        for n in MODEL_NAMES:
            if n not in loaded:
                loaded[n] = getattr(fresh, n)
        return cls(*(loaded[n] for n in MODEL_NAMES), cfg=cfg)


def _time_major(window) -> tuple:
    x = np.asarray(window.data if isinstance(window, Tensor) else window, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    return np.ascontiguousarray(np.transpose(x, (1, 0, 2))), single


def _encode(params: ParamSet, window) -> LatentGaussian:
    x, single = _time_major(window)
    h = forward_lstm(params, Tensor(x))
    out = forward_mlp(params, h)
    half = out.shape[-1] // 2
    mu, logvar = out[:, :half], out[:, half:].clip(LOGVAR_MIN, LOGVAR_MAX)
    if single:
        mu, logvar = mu.reshape(half), logvar.reshape(half)
    return LatentGaussian(mu, logvar)


def perceive(params: ParamSet, window) -> LatentGaussian:
    """Observation window (20, 184) or (B, 20, 184) -> latent Gaussian."""
    return _encode(params, window)


def reason(params: ParamSet, window) -> LatentGaussian:
    """Action window (20, 2) or (B, 20, 2) -> latent Gaussian."""
    return _encode(params, window)


def sample_latent(g: LatentGaussian, rng: np.random.Generator) -> Tensor:
    eps = rng.standard_normal(g.mu.shape)
    return g.mu + (g.logvar * 0.5).exp() * eps


def squash(u: Tensor) -> Tensor:
    """Pre-activation (..., 2) -> (v in [0, v_max], w in [-w_max, w_max])."""
    if u.ndim == 1:
        return concat([u[0:1].sigmoid() * V_MAX, u[1:2].tanh() * W_MAX], axis=-1)
    return concat([u[:, 0:1].sigmoid() * V_MAX, u[:, 1:2].tanh() * W_MAX], axis=-1)


def unsquash(actions, eps: float = 1e-6) -> np.ndarray:
    """Inverse of ``squash`` on plain arrays; bounds are pulled in by ``eps``."""
    a = np.asarray(actions.data if isinstance(actions, Tensor) else actions, dtype=np.float64)
    p = np.clip(a[..., 0] / V_MAX, eps, 1.0 - eps)
    q = np.clip(a[..., 1] / W_MAX, -1.0 + eps, 1.0 - eps)
    return np.stack([np.log(p / (1.0 - p)), np.arctanh(q)], axis=-1)


def decide(params: ParamSet, s, stochastic: bool = False):
    """Latent -> squashed action mean, or a PolicyHead when ``stochastic``."""
    pre = forward_mlp(params, as_tensor(s))
    mean = squash(pre)
    if not stochastic:
        return mean
    return PolicyHead(mean, pre, params["log_std"].clip(LOG_STD_MIN, LOG_STD_MAX))


def gaussian_log_prob(mean: Tensor, log_std: Tensor, actions) -> Tensor:
    actions = as_tensor(actions)
    z = (actions - mean) * (-log_std).exp()
    per_dim = z.square() * -0.5 - log_std - 0.5 * LOG_2PI
    return per_dim.sum(axis=-1)


def evaluate_value(params: ParamSet, s) -> Tensor:
    out = forward_mlp(params, as_tensor(s))
    return out[..., 0]


def similarity_log_ratio(mu_p, mu_r, var_r) -> np.ndarray:
    """log N(mu_p; mu_r, var_r) - log rho, clamped to [-20, 0]."""
    mu_p, mu_r, var_r = (np.asarray(a, dtype=np.float64) for a in (mu_p, mu_r, var_r))
    var_r = np.maximum(var_r, 1e-8)
    log_density = np.sum(-0.5 * np.log(2.0 * math.pi * var_r) - (mu_p - mu_r) ** 2 / (2.0 * var_r), axis=-1)
    return np.clip(log_density - LN_RHO, SIM_LOG_FLOOR, 0.0)


def similarity_reward(mu_p, g_r) -> np.ndarray | float:
    """Density of ``mu_p`` under the reasoning Gaussian, relative to the standard-normal peak."""
    mu_r, var_r = g_r.arrays() if isinstance(g_r, LatentGaussian) else g_r
    out = np.exp(similarity_log_ratio(mu_p, mu_r, var_r))
    return float(out) if out.ndim == 0 else out
