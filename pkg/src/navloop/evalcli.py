"""Benchmark harness, analysis exports, and the ``navloop`` command line."""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import os
import platform
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .models import ModelConfig, Models, decide, perceive, reason
from .scenes import SceneSpec, build_scene, get_suite
from .simworld import LIDAR_BEAMS, V_MAX, W_MAX, ActionCmd, Event

log = logging.getLogger(__name__)

METRICS_HEADER = ("scenario", "episodes", "success_rate", "arriving_step_mean", "collision_rate", "timeout_rate")
EPISODES_HEADER = ("scenario", "episode", "seed", "outcome", "arriving_step", "steps", "path_length")
DEFAULT_EPISODES = 400
OUTCOMES = {Event.REACHED: "success", Event.COLLIDED: "collision", Event.TIMEOUT: "timeout"}


# -- policies ------------------------------------------------------------
# A policy drives K parallel episodes: reset(K) then act(obs (K, 184)) -> (K, 2).

class ModelPolicy:
    """Deterministic policy mean from the perception and decision models."""

    def __init__(self, models: Models):
        self.models = models
        self.n = models.cfg.seq_len
        self.obs_hist = None
        self.act_hist = None

    @classmethod
    def from_checkpoints(cls, directory) -> "ModelPolicy":
        return cls(Models.load(directory))

    def reset(self, count: int) -> None:
        self.obs_hist = None
        self.act_hist = np.zeros((count, self.n - 1, 2))

    def _push_obs(self, obs: np.ndarray) -> np.ndarray:
        if self.obs_hist is None:
            self.obs_hist = np.repeat(obs[:, None, :], self.n, axis=1)
        else:
            self.obs_hist = np.concatenate([self.obs_hist[:, 1:], obs[:, None, :]], axis=1)
        return self.obs_hist

    def act(self, obs: np.ndarray) -> np.ndarray:
        window = self._push_obs(np.asarray(obs, dtype=np.float64))
        mu = perceive(self.models.perception, window).mu.data
        actions = decide(self.models.decision, mu).data
        self.last_act_window = np.concatenate([self.act_hist, actions[:, None, :]], axis=1)
        self.act_hist = self.last_act_window[:, 1:]
        return actions

    def reasoning_means(self) -> np.ndarray:
        """Reasoning-latent means for the action windows ending at the last act()."""
        return reason(self.models.reasoning, self.last_act_window).mu.data


class NeverMovePolicy:
    def reset(self, count: int) -> None:
        pass

    def act(self, obs: np.ndarray) -> np.ndarray:
        return np.zeros((len(obs), 2))


class GoalSeekPolicy:
    """Turn toward the goal bearing and drive when roughly aligned."""

    def __init__(self, gain: float = 2.0):
        self.gain = gain

    def reset(self, count: int) -> None:
        pass

    def act(self, obs: np.ndarray) -> np.ndarray:
        bearing = np.asarray(obs)[:, LIDAR_BEAMS + 1] * math.pi
        w = np.clip(self.gain * bearing, -W_MAX, W_MAX)
        v = V_MAX * np.maximum(0.0, np.cos(bearing))
        return np.column_stack([v, w])


class RandomPolicy:
    """Uniform random commands inside the action bounds."""

    def __init__(self, seed: int = 0):
        self.rng = np.random.default_rng(seed)

    def reset(self, count: int) -> None:
        pass

    def act(self, obs: np.ndarray) -> np.ndarray:
        k = len(obs)
        return np.column_stack([self.rng.uniform(0, V_MAX, k), self.rng.uniform(-W_MAX, W_MAX, k)])


# -- benchmark -----------------------------------------------------------

@dataclass
class EpisodeResult:
    scenario: str
    episode: int
    seed: int
    outcome: str
    arriving_step: int | None
    steps: int
    path_length: float


@dataclass
class ScenarioSummary:
    scenario: str
    episodes: int
    success_rate: float
    arriving_step_mean: float
    collision_rate: float
    timeout_rate: float

    @classmethod
    def from_results(cls, name: str, results: list) -> "ScenarioSummary":
        n = len(results)
        outcomes = [r.outcome for r in results]
        arriving = [r.arriving_step for r in results if r.outcome == "success"]
        return cls(name, n,
                   100.0 * outcomes.count("success") / n,
                   float(np.mean(arriving)) if arriving else float("nan"),
                   100.0 * outcomes.count("collision") / n,
                   100.0 * outcomes.count("timeout") / n)


@dataclass
class BenchmarkReport:
    scenarios: list
    episodes: list = field(default_factory=list)

    def suite_summary(self) -> ScenarioSummary:
        return ScenarioSummary.from_results("suite", self.episodes)

    def success_rate(self, scenario: str | None = None) -> float:
        if scenario is None:
            return self.suite_summary().success_rate
        return next(s.success_rate for s in self.scenarios if s.scenario == scenario)

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
        for s in [*self.scenarios, self.suite_summary()]:
            writer.writerow([s.scenario, s.episodes, f"{s.success_rate:.4f}", f"{s.arriving_step_mean:.4f}",
                             f"{s.collision_rate:.4f}", f"{s.timeout_rate:.4f}"])
        return buf.getvalue()

    def episodes_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(EPISODES_HEADER)
        for r in self.episodes:
            writer.writerow([r.scenario, r.episode, r.seed, r.outcome,
                             "" if r.arriving_step is None else r.arriving_step, r.steps, f"{r.path_length:.6f}"])
        return buf.getvalue()

    def write(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "metrics.csv").write_text(self.metrics_csv())
        (directory / "episodes.csv").write_text(self.episodes_csv())


def run_episodes(spec: SceneSpec, policy, seeds: list, on_step=None) -> list:
    """Run one episode per seed in lockstep; ``on_step(k, t, action)`` sees every live step."""
    worlds = [build_scene(spec, s) for s in seeds]
    count = len(worlds)
    policy.reset(count)
    obs = np.stack([w.observe() for w in worlds])
    alive = np.ones(count, dtype=bool)
    results: list = [None] * count
    lengths = np.zeros(count)
    while alive.any():
        actions = policy.act(obs)
        for k in np.flatnonzero(alive):
            world = worlds[k]
            if on_step is not None:
                on_step(k, world.steps, actions[k])
            before = (world.pose.x, world.pose.y)
            out = world.step(ActionCmd(float(actions[k, 0]), float(actions[k, 1])))
            lengths[k] += math.hypot(world.pose.x - before[0], world.pose.y - before[1])
            obs[k] = out.obs
            if out.event.terminal:
                alive[k] = False
                outcome = OUTCOMES[out.event]
                results[k] = EpisodeResult(spec.name, k, seeds[k], outcome,
                                           world.steps if outcome == "success" else None,
                                           world.steps, float(lengths[k]))
    return results


def _worker_count() -> int:
    try:
        return max(1, int(os.environ.get("NAVLOOP_THREADS", "1")))
    except ValueError:
        return 1


def run_benchmark(suite: list, policy_factory, episodes: int = DEFAULT_EPISODES, seed: int = 0) -> BenchmarkReport:
    """Evaluate ``policy_factory()`` on every scenario; episode k uses seed ``seed + k``."""
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    seeds = [seed + k for k in range(episodes)]

    def one(spec):
        results = run_episodes(spec, policy_factory(), seeds)
        for k, r in enumerate(results):
            r.episode = k
        return results

    with ThreadPoolExecutor(max_workers=_worker_count()) as pool:
        per_scenario = list(pool.map(one, suite))
    ordered = sorted(zip(suite, per_scenario), key=lambda pair: pair[0].name)
    summaries = [ScenarioSummary.from_results(spec.name, res) for spec, res in ordered]
    return BenchmarkReport(summaries, [r for _, res in ordered for r in res])


def export_latents(models: Models, suite: list, episodes: int, seed: int = 0) -> str:
    """CSV of reasoning-latent means along deterministic rollouts."""
    latent = models.cfg.latent_dim
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["scenario", "episode", "t", "v", "w"] + [f"z{i}" for i in range(latent)])
    for spec in suite:
        policy = ModelPolicy(models)
        rows = []

        class Recorder:
            def reset(self, count):
                policy.reset(count)

            def act(self, obs):
                actions = policy.act(obs)
                self.means = policy.reasoning_means()
                return actions

        recorder = Recorder()

        def on_step(k, t, action):
            rows.append((k, t, action, recorder.means[k]))

        run_episodes(spec, recorder, [seed + k for k in range(episodes)], on_step)
        rows.sort(key=lambda r: (r[0], r[1]))
        for k, t, action, mean in rows:
            writer.writerow([spec.name, k, t, repr(float(action[0])), repr(float(action[1]))]
                            + [repr(float(x)) for x in mean])
    return buf.getvalue()


def action_histogram(velocities, bins: int = 50, v_max: float = V_MAX):
    if bins < 2:
        raise ValueError("bins must be >= 2")
    edges = np.linspace(0.0, v_max, bins + 1)
    counts, _ = np.histogram(np.clip(velocities, 0.0, v_max), bins=edges)
    return counts, edges


def export_action_hist(policy_factory, suite: list, episodes: int, bins: int = 50, seed: int = 0) -> str:
    """Per-scenario histogram of executed forward velocity."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["scenario", "bin", "v_lo", "v_hi", "count"])
    for spec in suite:
        velocities = []
        run_episodes(spec, policy_factory(), [seed + k for k in range(episodes)],
                     lambda k, t, a: velocities.append(min(max(float(a[0]), 0.0), V_MAX)))
        counts, edges = action_histogram(np.array(velocities), bins)
        for b, c in enumerate(counts):
            writer.writerow([spec.name, b, f"{edges[b]:.6f}", f"{edges[b + 1]:.6f}", int(c)])
    return buf.getvalue()


# -- command line ------------------------------------------------------------

class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


def _build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, default=argparse.SUPPRESS, help="TrainConfig JSON file")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--out", type=Path, default=argparse.SUPPRESS, help="output directory")

    parser = _Parser(prog="navloop", parents=[common],
                     description="Closed-loop navigation learning: data, training, evaluation.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-data", parents=[common], help="generate the demonstration corpus")
    p.add_argument("--target", type=int, default=200)
    p.add_argument("--scenes", default="open,sparse,dense,dynamic")

    p = sub.add_parser("train-demo", parents=[common], help="stage 1: demonstration learning")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--steps", type=int, default=None)

    p = sub.add_parser("train-rl", parents=[common], help="stage 2: interaction learning")
    p.add_argument("--init", type=Path, default=None, help="stage-1 checkpoint directory")
    p.add_argument("--suite", default="train")
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--no-reasoning", action="store_true")
    p.add_argument("--no-drw", action="store_true")
    p.add_argument("--no-stage1", action="store_true")

    for name, helptext in (("eval", "run a benchmark suite"),
                           ("export-latents", "dump reasoning latents per step"),
                           ("export-hist", "dump forward-velocity histograms")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--checkpoints", type=Path, required=True)
        p.add_argument("--suite", default="fewshot")
        p.add_argument("--episodes", type=int, default=DEFAULT_EPISODES if name == "eval" else 10)
        if name == "export-hist":
            p.add_argument("--bins", type=int, default=50)

    p = sub.add_parser("inspect-data", parents=[common], help="print dataset metadata as JSON lines")
    p.add_argument("path", type=Path)
    return parser


def _config_hash(doc: dict) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _write_manifest(out: Path, command: str, seed: int, config: dict, extra: dict | None = None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "seed": seed,
        "config_hash": _config_hash(config),
        "config": config,
        "versions": {"navloop": __version__, "numpy": np.__version__, "python": platform.python_version()},
    }
    manifest.update(extra or {})
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")


def _train_config(args):
    from .training import TrainConfig

    cfg = TrainConfig.from_json(args.config) if getattr(args, "config", None) else TrainConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def _model_config(cfg) -> ModelConfig:
    return ModelConfig(latent_dim=cfg.latent_dim, seq_len=cfg.seq_len)


def _dispatch(args, out: Path, seed: int) -> None:
    from . import demogen, training

    cmd = args.command
    if cmd == "gen-data":
        cfg = demogen.DemoConfig(target=args.target, scenes=tuple(args.scenes.split(",")), seed=seed)
        ds = demogen.generate_demo_corpus(cfg)
        out.mkdir(parents=True, exist_ok=True)
        demogen.write_dataset(ds, out / "demo.navd")
        _write_manifest(out, cmd, seed, {"target": cfg.target, "scenes": list(cfg.scenes)},
                        {"dataset": "demo.navd", "count": len(ds)})
        print(json.dumps({"path": str(out / "demo.navd"), "count": len(ds),
                          "mean_steps": ds.metadata.get("mean_steps")}))
    elif cmd == "inspect-data":
        ds = demogen.read_dataset(args.path)
        print(json.dumps({"path": str(args.path), "count": len(ds), "steps": ds.total_steps(),
                          "metadata": ds.metadata}, sort_keys=True))
        for row in demogen.summarize(ds):
            print(json.dumps(row, sort_keys=True))
        _write_manifest(out, cmd, seed, {"path": str(args.path)}, {"count": len(ds)})
    elif cmd == "train-demo":
        cfg = _train_config(args)
        ds = demogen.read_dataset(args.data)
        models = Models.initialize(cfg.seed, _model_config(cfg))
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "demo_log.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "l1", "l2", "l3", "total"])
            training.train_demo(models, ds, cfg, args.steps,
                                callback=lambda s, r: writer.writerow([s, r["l1"], r["l2"], r["l3"], r["total"]]))
        models.save(out / "checkpoints")
        _write_manifest(out, cmd, cfg.seed, cfg.to_json())
    elif cmd == "train-rl":
        cfg = _train_config(args)
        if args.iterations is not None:
            cfg.iterations = args.iterations
        cfg.use_reasoning = not args.no_reasoning
        cfg.use_drw = not args.no_drw
        if args.no_stage1:
            models = Models.initialize(cfg.seed, _model_config(cfg))
        else:
            if args.init is None:
                raise UsageError("train-rl needs --init <stage-1 checkpoints> unless --no-stage1 is given")
            models = Models.load(args.init, names=("perception", "decision", "reasoning"))
        models = training.run_stage2(cfg, models, get_suite(args.suite), out_dir=out)[0]
        models.save(out / "checkpoints")
        _write_manifest(out, cmd, cfg.seed, cfg.to_json(), {"suite": args.suite})
    elif cmd == "eval":
        models = Models.load(args.checkpoints)
        suite = get_suite(args.suite)
        report = run_benchmark(suite, lambda: ModelPolicy(models), args.episodes, seed)
        report.write(out)
        _write_manifest(out, cmd, seed, {"suite": args.suite, "episodes": args.episodes,
                                         "checkpoints": str(args.checkpoints)})
        sys.stdout.write(report.metrics_csv())
    elif cmd == "export-latents":
        models = Models.load(args.checkpoints)
        out.mkdir(parents=True, exist_ok=True)
        (out / "latents.csv").write_text(export_latents(models, get_suite(args.suite), args.episodes, seed))
        _write_manifest(out, cmd, seed, {"suite": args.suite, "episodes": args.episodes})
    elif cmd == "export-hist":
        models = Models.load(args.checkpoints)
        out.mkdir(parents=True, exist_ok=True)
        text = export_action_hist(lambda: ModelPolicy(models), get_suite(args.suite), args.episodes,
                                  args.bins, seed)
        (out / "action_hist.csv").write_text(text)
        _write_manifest(out, cmd, seed, {"suite": args.suite, "episodes": args.episodes, "bins": args.bins})


def cli_main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError(parser.format_help())
    except UsageError as exc:
        sys.stderr.write(f"{exc}\n")
        return 1
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    out = getattr(args, "out", None) or Path("navloop_out") / args.command
    seed = getattr(args, "seed", None) or 0
    if not 0 <= seed < 2**64:
        sys.stderr.write("navloop: --seed must be an unsigned 64-bit integer\n")
        return 1
    try:
        _dispatch(args, out, seed)
    except UsageError as exc:
        sys.stderr.write(f"navloop: {exc}\n")
        return 1
    except (FileNotFoundError, KeyError, ValueError, RuntimeError, OSError) as exc:
        sys.stderr.write(f"navloop {args.command}: {exc}\n")
        return 2
    return 0


def main() -> None:
    sys.exit(cli_main())
