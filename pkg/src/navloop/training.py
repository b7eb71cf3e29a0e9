"""Two-stage training: demonstration learning, then PPO with the reasoning reward loop."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .autonn import Tensor, TrainingGuardError, adam_step, as_tensor, backward, minimum
from .demogen import DemoDataset
from .models import (
    LatentGaussian,
    Models,
    decide,
    evaluate_value,
    perceive,
    reason,
    sample_latent,
    similarity_reward,
)
from .scenes import build_scene
from .simworld import ActionCmd, Event

log = logging.getLogger(__name__)

LOG_HEADER = ("iter", "env_steps", "mean_return", "mean_r_sim", "success_rate",
              "l_policy", "l_value", "entropy", "l_r1", "l_r2")


@dataclass
class TrainConfig:
    alpha: float = 1.0
    beta: float = 20.0
    eta: float = 5e-4
    lam: float = 0.01
    gamma: float = 0.99
    seq_len: int = 20
    latent_dim: int = 90
    lr_demo: float = 1e-3
    lr_rl: float = 3e-5
    reasoning_period: int = 10
    clip_eps: float = 0.2
    gae_lambda: float = 0.95
    horizon: int = 2048
    num_envs: int = 8
    epochs: int = 4
    minibatch: int = 256
    demo_batch: int = 64
    demo_steps: int = 2000
    iterations: int = 150
    checkpoint_every: int = 10
    kl_guard: float = 10.0
    use_reasoning: bool = True
    use_drw: bool = True
    latent_reduction: str = "mean"
    seed: int = 0

    def __post_init__(self):
        if self.latent_reduction not in ("mean", "sum"):
            raise ValueError("latent_reduction must be 'mean' or 'sum'")
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, (bool, str)):
                continue
            if f.name in ("iterations", "demo_steps", "seed"):
                if value < 0:
                    raise ValueError(f"{f.name} must be >= 0")
            elif value <= 0:
                raise ValueError(f"{f.name} must be positive, got {value}")
        if self.reasoning_period < 1:
            raise ValueError("reasoning_period must be >= 1")

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        doc = json.loads(Path(path).read_text())
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ValueError(f"unknown TrainConfig field(s): {', '.join(unknown)}")
        return cls(**doc)

    def to_json(self) -> dict:
        return asdict(self)


# -- losses -------------------------------------------------------------

def kl_to_standard(g: LatentGaussian) -> Tensor:
    """Sum over latent dims of KL(N(mu, var) || N(0, 1)); per row when batched."""
    per_dim = (g.logvar * -1.0 - 1.0 + g.mu.square() + g.var) * 0.5
    return per_dim.sum(axis=-1)


def latent_divergence(gp: LatentGaussian, gr: LatentGaussian) -> Tensor:
    """Symmetrized KL 0.5 * [KL(P||R) + KL(R||P)] between diagonal Gaussians."""
    vp, vr = gp.var, gr.var
    d2 = (gp.mu - gr.mu).square()
    per_dim = ((vp + d2) / vr + (vr + d2) / vp - 2.0) * 0.25
    return per_dim.sum(axis=-1)


def _scalar(x) -> float:
    return float(np.asarray(x.data if isinstance(x, Tensor) else x))


def _check_finite(name: str, value: float) -> None:
    if not math.isfinite(value):
        raise TrainingGuardError(f"{name} became non-finite ({value})")


# -- stage 1: demonstration learning -----------------------------------

@dataclass
class DemoBatch:
    obs: np.ndarray  # (B, n, 184)
    acts: np.ndarray  # (B, n, 2), target action at the last slot
    target: np.ndarray  # (B, 2)


class WindowIndex:
    """Padded per-trajectory arrays so any (trajectory, t) window is a slice."""

    def __init__(self, ds: DemoDataset, n: int = 20, trajectories=None):
        self.n = n
        trajs = ds.trajectories if trajectories is None else trajectories
        obs_parts, act_parts, starts = [], [], []
        offset = 0
        for traj in trajs:
            obs = np.asarray(traj.obs, dtype=np.float64)
            act = np.asarray(traj.actions, dtype=np.float64)
            obs_parts.append(np.concatenate([np.repeat(obs[:1], n - 1, axis=0), obs]))
            act_parts.append(np.concatenate([np.zeros((n - 1, 2)), act]))
            starts.append(offset + np.arange(len(act)))
            offset += len(act) + n - 1
        self.obs = np.concatenate(obs_parts) if obs_parts else np.zeros((0, 184))
        self.acts = np.concatenate(act_parts) if act_parts else np.zeros((0, 2))
        self.starts = np.concatenate(starts) if starts else np.zeros(0, dtype=int)

    def __len__(self) -> int:
        return len(self.starts)

    def batch(self, rows) -> DemoBatch:
        idx = self.starts[np.asarray(rows)][:, None] + np.arange(self.n)[None, :]
        acts = self.acts[idx]
        return DemoBatch(self.obs[idx], acts, acts[:, -1].copy())

    def sample(self, size: int, rng: np.random.Generator) -> DemoBatch:
        return self.batch(rng.integers(0, len(self), size=size))


def demo_losses(models: Models, batch: DemoBatch, rng: np.random.Generator,
                latent_reduction: str = "mean") -> dict:
    # "mean" averages the two latent terms over dimensions; summing them over
    # 90 dims outweighs the action error and collapses the latent to the prior.
    gp = perceive(models.perception, batch.obs)
    gr = reason(models.reasoning, batch.acts)
    a_pred = decide(models.decision, sample_latent(gp, rng))
    a_rec = decide(models.decision, sample_latent(gr, rng))
    target = as_tensor(batch.target)
    l1 = ((a_rec - target).square() + (a_pred - target).square()).sum(axis=-1).mean()
    scale = 1.0 / gp.mu.shape[-1] if latent_reduction == "mean" else 1.0
    l2 = latent_divergence(gp, gr).mean() * scale
    l3 = (kl_to_standard(gp) + kl_to_standard(gr)).mean() * scale
    total = l1 + l2 + l3
    return {"l1": l1, "l2": l2, "l3": l3, "total": total}


def demo_step(models: Models, batch: DemoBatch, rng: np.random.Generator, lr: float = 1e-3,
              latent_reduction: str = "mean") -> dict:
    """One joint Adam step on perception, decision, and reasoning."""
    sets = [models.perception, models.decision, models.reasoning]
    for ps in sets:
        ps.zero_grad()
    losses = demo_losses(models, batch, rng, latent_reduction)
    report = {k: _scalar(v) for k, v in losses.items()}
    _check_finite("demo loss", report["total"])
    grads = backward(losses["total"], sets)
    for ps in sets:
        adam_step(ps, grads, lr)
    return report


def action_mse(models: Models, index: WindowIndex, chunk: int = 512) -> float:
    """Deterministic (latent mean) action-prediction MSE over every window."""
    total, count = 0.0, 0
    for lo in range(0, len(index), chunk):
        batch = index.batch(np.arange(lo, min(lo + chunk, len(index))))
        mu = perceive(models.perception, batch.obs).mu
        pred = decide(models.decision, mu).data
        total += float(np.sum((pred - batch.target) ** 2))
        count += batch.target.size
    return total / max(count, 1)


def train_demo(models: Models, ds: DemoDataset, cfg: TrainConfig, steps: int | None = None,
               callback=None) -> list:
    """Stage-1 loop; returns the per-step loss reports."""
    rng = np.random.default_rng(cfg.seed)
    index = WindowIndex(ds, cfg.seq_len)
    history = []
    for step in range(cfg.demo_steps if steps is None else steps):
        report = demo_step(models, index.sample(cfg.demo_batch, rng), rng, cfg.lr_demo,
                           cfg.latent_reduction)
        history.append(report)
        if callback is not None:
            callback(step, report)
    return history


# -- stage 2: interaction learning ---------------------------------------

class EnvPool:
    """A fixed set of worlds stepped in lockstep, each with its own windows.

    Episodes auto-reset from the scene list; episode seeds come from one
    deterministic counter per pool so runs are repeatable.
    """

    def __init__(self, specs: list, num_envs: int, seed: int = 0, n: int = 20):
        if not specs:
            raise ValueError("EnvPool needs at least one scene")
        self.specs = list(specs)
        self.num_envs = num_envs
        self.n = n
        self.seed = seed
        self._episodes = 0
        self.worlds = [None] * num_envs
        self.obs_hist = [None] * num_envs
        self.act_hist = [None] * num_envs
        for i in range(num_envs):
            self._reset(i)

    def _reset(self, i: int) -> None:
        k = self._episodes
        self._episodes += 1
        spec = self.specs[k % len(self.specs)]
        world = build_scene(spec, self.seed * 1_000_003 + k)
        obs = world.observe()
        self.worlds[i] = world
        self.obs_hist[i] = np.repeat(obs[None], self.n, axis=0)
        self.act_hist[i] = np.zeros((self.n - 1, 2))

    def obs_windows(self) -> np.ndarray:
        return np.stack(self.obs_hist)

    def act_windows(self, head_actions: np.ndarray) -> np.ndarray:
        """[previous n-1 real actions; current action] per env."""
        return np.stack([np.vstack([self.act_hist[i], head_actions[i][None]])
                         for i in range(self.num_envs)])

    def step(self, actions: np.ndarray) -> list:
        outcomes = []
        for i, a in enumerate(actions):
            out = self.worlds[i].step(ActionCmd(float(a[0]), float(a[1])))
            outcomes.append(out)
            if out.event.terminal:
                self._reset(i)
            else:
                self.obs_hist[i] = np.vstack([self.obs_hist[i][1:], out.obs[None]])
                self.act_hist[i] = np.vstack([self.act_hist[i][1:], np.asarray(a, dtype=np.float64)[None]])
        return outcomes


@dataclass
class RolloutBuffer:
    obs_win: np.ndarray  # (T, E, n, 184)
    act_win: np.ndarray  # (T, E, n, 2)
    mu_p: np.ndarray  # (T, E, latent)
    actions: np.ndarray  # (T, E, 2) executed (squashed) policy samples
    logp: np.ndarray  # (T, E)
    values: np.ndarray  # (T, E)
    r_nav: np.ndarray
    r_sim: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray  # (T, E) bool
    events: np.ndarray  # (T, E) event strings
    last_values: np.ndarray  # (E,)
    episodes: list = field(default_factory=list)  # completed: {"return", "success", "length", "event"}

    @property
    def steps(self) -> int:
        return self.rewards.size


def collect_rollout(pool: EnvPool, models: Models, horizon: int, rng: np.random.Generator,
                    use_reasoning: bool = True) -> RolloutBuffer:
    """Run the stochastic policy for ``horizon`` total steps split across the pool."""
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    envs = pool.num_envs
    t_max = max(1, math.ceil(horizon / envs))
    n = pool.n
    latent = models.cfg.latent_dim
    buf = RolloutBuffer(
        obs_win=np.zeros((t_max, envs, n, models.cfg.obs_dim)),
        act_win=np.zeros((t_max, envs, n, 2)),
        mu_p=np.zeros((t_max, envs, latent)),
        actions=np.zeros((t_max, envs, 2)),
        logp=np.zeros((t_max, envs)),
        values=np.zeros((t_max, envs)),
        r_nav=np.zeros((t_max, envs)),
        r_sim=np.zeros((t_max, envs)),
        rewards=np.zeros((t_max, envs)),
        dones=np.zeros((t_max, envs), dtype=bool),
        events=np.full((t_max, envs), Event.ALIVE.value, dtype=object),
        last_values=np.zeros(envs),
    )
    running = getattr(pool, "_returns", np.zeros(envs))
    lengths = getattr(pool, "_lengths", np.zeros(envs, dtype=int))
    for t in range(t_max):
        windows = pool.obs_windows()
        mu = perceive(models.perception, windows).mu.data
        head = decide(models.decision, mu, stochastic=True)
        executed = head.sample(rng)
        logp = head.log_prob(executed).data
        value = evaluate_value(models.value, mu).data
        act_win = pool.act_windows(executed)
        if use_reasoning:
            g_r = reason(models.reasoning, act_win)
            r_sim = np.asarray(similarity_reward(mu, g_r))
        else:
            r_sim = np.zeros(envs)
        outcomes = pool.step(executed)

        r_nav = np.array([o.nav_reward for o in outcomes])
        buf.obs_win[t] = windows
        buf.act_win[t] = act_win
        buf.mu_p[t] = mu
        buf.actions[t] = executed
        buf.logp[t] = logp
        buf.values[t] = value
        buf.r_nav[t] = r_nav
        buf.r_sim[t] = r_sim
        buf.rewards[t] = r_sim + r_nav
        buf.dones[t] = [o.event.terminal for o in outcomes]
        buf.events[t] = [o.event.value for o in outcomes]
        running += buf.rewards[t]
        lengths += 1
        for i, o in enumerate(outcomes):
            if o.event.terminal:
                buf.episodes.append({"return": float(running[i]), "length": int(lengths[i]),
                                     "success": o.event is Event.REACHED, "event": o.event.value})
                running[i] = 0.0
                lengths[i] = 0
    pool._returns, pool._lengths = running, lengths
    mu_last = perceive(models.perception, pool.obs_windows()).mu.data
    buf.last_values = evaluate_value(models.value, mu_last).data.copy()
    return buf


def compute_gae(rewards, values, dones, last_values, gamma: float, lam: float):
    """Generalized advantage estimates and returns (advantages + values).

    Arrays are time-major, (T,) or (T, E). ``dones[t]`` marks that the step
    at t ended its episode, so nothing is bootstrapped across it.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    nonterminal = 1.0 - np.asarray(dones, dtype=np.float64)
    adv = np.zeros_like(rewards)
    running = np.zeros_like(rewards[0])
    next_value = np.asarray(last_values, dtype=np.float64)
    for t in range(len(rewards) - 1, -1, -1):
        delta = rewards[t] + gamma * next_value * nonterminal[t] - values[t]
        running = delta + gamma * lam * nonterminal[t] * running
        adv[t] = running
        next_value = values[t]
    return adv, adv + values


def ppo_losses(models: Models, obs_win, actions, old_logp, advantages, returns, cfg: TrainConfig) -> dict:
    mu = perceive(models.perception, obs_win).mu
    head = decide(models.decision, mu, stochastic=True)
    ratio = (head.log_prob(actions) - as_tensor(old_logp)).exp()
    adv = as_tensor(advantages)
    surrogate = minimum(ratio * adv, ratio.clip(1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps) * adv)
    l_policy = surrogate.mean() * -1.0
    value = evaluate_value(models.value, mu.detach())
    l_value = (value - as_tensor(returns)).square().mean()
    entropy = head.entropy()
    total = l_policy * cfg.alpha + l_value * cfg.beta - entropy * cfg.eta
    return {"l_policy": l_policy, "l_value": l_value, "entropy": entropy, "total": total,
            "ratio": float(ratio.data.mean())}


def ppo_update(buf: RolloutBuffer, models: Models, cfg: TrainConfig, rng: np.random.Generator,
               advantages=None, returns=None) -> dict:
    """Clipped-surrogate PPO over the buffer; updates perception, decision, and value."""
    if advantages is None or returns is None:
        advantages, returns = compute_gae(buf.rewards, buf.values, buf.dones, buf.last_values,
                                          cfg.gamma, cfg.gae_lambda)
    count = buf.rewards.size
    obs = buf.obs_win.reshape(count, *buf.obs_win.shape[2:])
    actions = buf.actions.reshape(count, 2)
    old_logp = buf.logp.reshape(count)
    adv = advantages.reshape(count)
    adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    ret = returns.reshape(count)
    sets = [models.perception, models.decision, models.value]

    parts = {"l_policy": [], "l_value": [], "entropy": []}
    ratios = []
    skipped = False
    for epoch in range(cfg.epochs):
        order = rng.permutation(count)
        for lo in range(0, count, cfg.minibatch):
            mb = order[lo:lo + cfg.minibatch]
            for ps in sets:
                ps.zero_grad()
            losses = ppo_losses(models, obs[mb], actions[mb], old_logp[mb], adv[mb], ret[mb], cfg)
            _check_finite("ppo loss", _scalar(losses["total"]))
            grads = backward(losses["total"], sets)
            for ps in sets:
                adam_step(ps, grads, cfg.lr_rl)
            for k in parts:
                parts[k].append(_scalar(losses[k]))
            ratios.append(losses["ratio"])
            if abs(losses["ratio"] - 1.0) > cfg.kl_guard:
                skipped = True
                break
        if skipped:
            log.warning("mean probability ratio %.3g left the guard band; skipping remaining epochs",
                        ratios[-1])
            break
    report = {k: float(np.mean(v)) for k, v in parts.items()}
    report["total"] = cfg.alpha * report["l_policy"] + cfg.beta * report["l_value"] - cfg.eta * report["entropy"]
    report["mean_ratio"] = float(np.mean(ratios))
    report["skipped_epochs"] = skipped
    return report


def discounted_returns(rewards, gamma: float) -> np.ndarray:
    """Discounted suffix sums of one episode's rewards."""
    rewards = np.asarray(rewards, dtype=np.float64)
    out = np.zeros_like(rewards)
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


def buffer_discounted_returns(buf: RolloutBuffer, gamma: float):
    """R^discount per buffer step plus a mask of steps whose episode ended in the buffer."""
    t_max, envs = buf.r_nav.shape
    out = np.zeros((t_max, envs))
    valid = np.zeros((t_max, envs), dtype=bool)
    for e in range(envs):
        ends = np.flatnonzero(buf.dones[:, e])
        start = 0
        for end in ends:
            out[start:end + 1, e] = discounted_returns(buf.r_nav[start:end + 1, e], gamma)
            valid[start:end + 1, e] = True
            start = end + 1
    return out, valid


def drw_weights(discounted: np.ndarray) -> np.ndarray:
    """Clamp negative returns to zero and scale by the batch maximum."""
    w = np.maximum(np.asarray(discounted, dtype=np.float64), 0.0)
    top = w.max() if w.size else 0.0
    return w / top if top > 0 else np.zeros_like(w)


def drw_losses(models: Models, act_win, mu_p, weights, rng: np.random.Generator, lam: float) -> dict:
    g_r = reason(models.reasoning, act_win)
    s_r = sample_latent(g_r, rng)
    residual = (as_tensor(mu_p) - s_r).square().sum(axis=-1)
    l_r1 = (residual * as_tensor(weights)).mean()
    l_r2 = (g_r.logvar * -1.0 - 1.0 + g_r.mu.square() + g_r.var).sum(axis=-1).mean()
    total = l_r1 + l_r2 * lam
    return {"l_r1": l_r1, "l_r2": l_r2, "total": total}


def drw_update(buf: RolloutBuffer, models: Models, cfg: TrainConfig, rng: np.random.Generator) -> dict:
    """Discount-reward-weighted update of the reasoning model only."""
    discounted, valid = buffer_discounted_returns(buf, cfg.gamma)
    rows = np.flatnonzero(valid.reshape(-1))
    if rows.size == 0:
        log.info("drw_update: no completed episodes in buffer, skipping")
        return {"l_r1": 0.0, "l_r2": 0.0, "total": 0.0, "samples": 0}
    count = buf.rewards.size
    act_win = buf.act_win.reshape(count, *buf.act_win.shape[2:])[rows]
    mu_p = buf.mu_p.reshape(count, -1)[rows]
    if cfg.use_drw:
        weights = drw_weights(discounted.reshape(-1)[rows])
        if not weights.any():
            log.info("drw_update: every discounted return is non-positive; regularizer only")
    else:
        weights = np.ones(rows.size)

    parts = {"l_r1": [], "l_r2": []}
    order = rng.permutation(rows.size)
    for lo in range(0, rows.size, cfg.minibatch):
        mb = order[lo:lo + cfg.minibatch]
        models.reasoning.zero_grad()
        losses = drw_losses(models, act_win[mb], mu_p[mb], weights[mb], rng, cfg.lam)
        _check_finite("drw loss", _scalar(losses["total"]))
        grads = backward(losses["total"], [models.reasoning])
        adam_step(models.reasoning, grads, cfg.lr_rl)
        for k in parts:
            parts[k].append(_scalar(losses[k]))
    report = {k: float(np.mean(v)) for k, v in parts.items()}
    report["total"] = report["l_r1"] + cfg.lam * report["l_r2"]
    report["samples"] = int(rows.size)
    return report


def run_stage2(cfg: TrainConfig, models: Models, specs: list, out_dir=None, callback=None) -> tuple:
    """PPO loop with the periodic reasoning update; returns (models, log rows)."""
    rng = np.random.default_rng(cfg.seed)
    pool = EnvPool(specs, cfg.num_envs, seed=cfg.seed)
    out_dir = Path(out_dir) if out_dir is not None else None
    writer = handle = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        handle = open(out_dir / "train_log.csv", "w", newline="")
        writer = csv.writer(handle)
        writer.writerow(LOG_HEADER)
    rows = []
    env_steps = 0
    drw_count = 0
    last_good = models.copy()
    try:
        for it in range(1, cfg.iterations + 1):
            buf = collect_rollout(pool, models, cfg.horizon, rng, cfg.use_reasoning)
            env_steps += buf.steps
            adv, ret = compute_gae(buf.rewards, buf.values, buf.dones, buf.last_values,
                                   cfg.gamma, cfg.gae_lambda)
            ppo = ppo_update(buf, models, cfg, rng, adv, ret)
            drw = {"l_r1": float("nan"), "l_r2": float("nan")}
            if cfg.use_reasoning and it % cfg.reasoning_period == 0:
                drw = drw_update(buf, models, cfg, rng)
                drw_count += 1
            eps = buf.episodes
            row = {
                "iter": it,
                "env_steps": env_steps,
                "mean_return": float(np.mean([e["return"] for e in eps])) if eps else float("nan"),
                "mean_r_sim": float(buf.r_sim.mean()),
                "success_rate": float(np.mean([e["success"] for e in eps])) if eps else float("nan"),
                "l_policy": ppo["l_policy"],
                "l_value": ppo["l_value"],
                "entropy": ppo["entropy"],
                "l_r1": drw["l_r1"],
                "l_r2": drw["l_r2"],
            }
            rows.append(row)
            if writer is not None:
                writer.writerow([row[k] for k in LOG_HEADER])
                handle.flush()
            if callback is not None:
                callback(it, row, buf)
            last_good = models.copy()
            if out_dir is not None and (it % cfg.checkpoint_every == 0 or it == cfg.iterations):
                models.save(out_dir / "checkpoints")
    except TrainingGuardError:
        if out_dir is not None:
            last_good.save(out_dir / "last_good")
        raise
    finally:
        if handle is not None:
            handle.close()
    log.info("stage 2 finished: %d iterations, %d reasoning updates", cfg.iterations, drw_count)
    return models, rows
