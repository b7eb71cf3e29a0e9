"""Demonstration corpus: grid A* planning, pure-pursuit tracking, and the NAVD file format."""

from __future__ import annotations

import hashlib
import heapq
import json
import math
import struct
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .scenes import TRAINING_SCENES, SceneError, bundled_scene, build_scene, static_variant
from .simworld import (
    OBS_DIM,
    ROBOT_RADIUS,
    V_MAX,
    W_MAX,
    ActionCmd,
    Event,
    World,
    point_segment_distance,
    points_in_polygon,
    wrap_angle,
)

SQRT2 = math.sqrt(2.0)
SEQ_LEN = 20

DATASET_MAGIC = b"NAVD"
DATASET_VERSION = 1
EVENT_CODES = {Event.ALIVE: 0, Event.REACHED: 1, Event.COLLIDED: 2, Event.TIMEOUT: 3}
CODE_EVENTS = {v: k for k, v in EVENT_CODES.items()}


class UnreachableError(RuntimeError):
    """No collision-free grid path joins start and goal."""


class DatasetFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} (byte offset {offset})")


class GenerationError(RuntimeError):
    def __init__(self, message: str, causes: dict):
        self.causes = dict(causes)
        super().__init__(f"{message}; causes: {json.dumps(self.causes, sort_keys=True)}")


# -- occupancy grid and A* --------------------------------------------

@dataclass
class OccupancyGrid:
    occupied: np.ndarray  # (height, width) bool, row index = y
    resolution: float = 0.1
    origin: tuple = (0.0, 0.0)
    inflation: float = ROBOT_RADIUS

    @property
    def width(self) -> int:
        return self.occupied.shape[1]

    @property
    def height(self) -> int:
        return self.occupied.shape[0]

    def is_free(self, cell) -> bool:
        ix, iy = cell
        return 0 <= ix < self.width and 0 <= iy < self.height and not self.occupied[iy, ix]

    def cell_of(self, point) -> tuple:
        ix = int(math.floor((point[0] - self.origin[0]) / self.resolution))
        iy = int(math.floor((point[1] - self.origin[1]) / self.resolution))
        return min(max(ix, 0), self.width - 1), min(max(iy, 0), self.height - 1)

    def center_of(self, cell) -> np.ndarray:
        return np.array([self.origin[0] + (cell[0] + 0.5) * self.resolution,
                         self.origin[1] + (cell[1] + 0.5) * self.resolution])


def rasterize(world: World, resolution: float = 0.1, inflation: float = ROBOT_RADIUS + 0.15) -> OccupancyGrid:
    """Mark every cell whose centre lies within ``inflation`` of an obstacle."""
    if inflation < world.robot_radius:
        raise ValueError("inflation must be at least the robot radius")
    xmin, ymin, xmax, ymax = world.bounds
    width = int(math.ceil((xmax - xmin) / resolution))
    height = int(math.ceil((ymax - ymin) / resolution))
    xs = xmin + (np.arange(width) + 0.5) * resolution
    ys = ymin + (np.arange(height) + 0.5) * resolution
    gx, gy = np.meshgrid(xs, ys)
    centres = np.stack([gx.ravel(), gy.ravel()], axis=1)

    occupied = np.zeros(len(centres), dtype=bool)
    segs = world.all_segments()
    if len(segs):
        occupied |= point_segment_distance(centres, segs).min(axis=1) < inflation
    for poly in world.all_polygons():
        occupied |= points_in_polygon(centres, poly)
    circ = world.circles()
    if len(circ):
        d = np.linalg.norm(centres[:, None, :] - circ[None, :, :2], axis=-1) - circ[None, :, 2]
        occupied |= d.min(axis=1) < inflation
    return OccupancyGrid(occupied.reshape(height, width), resolution, (xmin, ymin), inflation)


_MOVES = [(1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1)]


def grid_neighbors(grid: OccupancyGrid, cell):
    """8-connected moves; a diagonal needs both side cells free (no corner cutting)."""
    ix, iy = cell
    for dx, dy in _MOVES:
        nxt = (ix + dx, iy + dy)
        if not grid.is_free(nxt):
            continue
        if dx and dy and not (grid.is_free((ix + dx, iy)) and grid.is_free((ix, iy + dy))):
            continue
        yield nxt, (SQRT2 if dx and dy else 1.0)


def octile(a, b) -> float:
    dx, dy = abs(a[0] - b[0]), abs(a[1] - b[1])
    return (dx + dy) + (SQRT2 - 2.0) * min(dx, dy)


def path_cost(path) -> float:
    diag = sum(1 for a, b in zip(path, path[1:]) if a[0] != b[0] and a[1] != b[1])
    return (len(path) - 1 - diag) + diag * SQRT2


def plan_astar(grid: OccupancyGrid, start, goal) -> list:
    start, goal = tuple(start), tuple(goal)
    for label, cell in (("start", start), ("goal", goal)):
        if not grid.is_free(cell):
            raise ValueError(f"{label} cell {cell} is occupied or outside the grid")
    g = {start: 0.0}
    parent = {start: None}
    heap = [(octile(start, goal), 0, start)]
    tie = 0
    closed = set()
    while heap:
        _, _, cell = heapq.heappop(heap)
        if cell in closed:
            continue
        if cell == goal:
            path = []
            while cell is not None:
                path.append(cell)
                cell = parent[cell]
            return path[::-1]
        closed.add(cell)
        for nxt, step in grid_neighbors(grid, cell):
            cand = g[cell] + step
            if cand < g.get(nxt, math.inf) - 1e-12:
                g[nxt] = cand
                parent[nxt] = cell
                tie += 1
                heapq.heappush(heap, (cand + octile(nxt, goal), tie, nxt))
    raise UnreachableError(f"no path from {start} to {goal}")


# -- pure pursuit --------------------------------------------------------

@dataclass
class TrackerGains:
    lookahead: float = 0.6
    k_heading: float = 2.0
    v_max: float = V_MAX
    w_max: float = W_MAX


@dataclass
class TrajectoryRecord:
    scene: str
    seed: int
    obs: np.ndarray  # (T, 184) float32
    actions: np.ndarray  # (T, 2) float32
    event: Event

    def __len__(self) -> int:
        return len(self.actions)

    def __eq__(self, other) -> bool:
        if not isinstance(other, TrajectoryRecord):
            return NotImplemented
        return (self.scene == other.scene and self.seed == other.seed and self.event == other.event
                and self.obs.shape == other.obs.shape and self.actions.shape == other.actions.shape
                and self.obs.tobytes() == other.obs.tobytes()
                and self.actions.tobytes() == other.actions.tobytes())


def pursuit_command(pose, path: np.ndarray, progress: int, gains: TrackerGains):
    """Return (ActionCmd, new progress index) for one control tick."""
    here = np.array([pose.x, pose.y])
    window = path[progress:progress + 30]
    progress += int(np.argmin(np.linalg.norm(window - here, axis=1)))
    target = path[-1]
    for point in path[progress:]:
        if np.linalg.norm(point - here) >= gains.lookahead:
            target = point
            break
    err = wrap_angle(math.atan2(target[1] - here[1], target[0] - here[0]) - pose.theta)
    w = min(max(gains.k_heading * err, -gains.w_max), gains.w_max)
    v = gains.v_max * max(0.0, math.cos(err))
    return ActionCmd(v, w), progress


def track_path(world: World, path, gains: TrackerGains | None = None, seed: int = 0) -> TrajectoryRecord:
    """Drive ``world`` along the waypoint list, recording (obs, action) each tick."""
    gains = gains or TrackerGains()
    path = np.asarray(path, dtype=np.float64).reshape(-1, 2)
    if len(path) == 0:
        raise ValueError("track_path needs at least one waypoint")
    obs_rows, act_rows = [], []
    obs = world.observe()
    progress = 0
    event = Event.ALIVE
    while not event.terminal:
        cmd, progress = pursuit_command(world.pose, path, progress, gains)
        # execute exactly what the float32 record will hold, so replays are bit-identical
        cmd = cmd.clamped(gains.v_max, gains.w_max)
        cmd = ActionCmd(float(np.float32(cmd.v)), float(np.float32(cmd.w)))
        obs_rows.append(obs)
        act_rows.append((cmd.v, cmd.w))
        out = world.step(cmd)
        obs, event = out.obs, out.event
    return TrajectoryRecord(world.name, seed, np.asarray(obs_rows, dtype=np.float32),
                            np.asarray(act_rows, dtype=np.float32), event)


# -- dataset ---------------------------------------------------------------

@dataclass
class DemoDataset:
    trajectories: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.trajectories)

    def __eq__(self, other) -> bool:
        if not isinstance(other, DemoDataset):
            return NotImplemented
        return self.trajectories == other.trajectories

    def total_steps(self) -> int:
        return sum(len(t) for t in self.trajectories)


def is_clean(traj: TrajectoryRecord, min_len: int = SEQ_LEN) -> bool:
    return traj.event is Event.REACHED and len(traj) >= min_len


def clean_dataset(ds: DemoDataset, min_len: int = SEQ_LEN) -> DemoDataset:
    kept, dropped = [], Counter()
    for traj in ds.trajectories:
        if traj.event is not Event.REACHED:
            dropped[f"event_{traj.event.value}"] += 1
        elif len(traj) < min_len:
            dropped["too_short"] += 1
        else:
            kept.append(traj)
    meta = dict(ds.metadata)
    meta["dropped"] = dict(sorted(dropped.items()))
    meta["count"] = len(kept)
    return DemoDataset(kept, meta)


def encode_dataset(ds: DemoDataset) -> bytes:
    chunks = [DATASET_MAGIC, struct.pack("<II", DATASET_VERSION, len(ds.trajectories))]
    for traj in ds.trajectories:
        name = traj.scene.encode("utf-8")
        obs = np.asarray(traj.obs, dtype="<f4")
        act = np.asarray(traj.actions, dtype="<f4")
        if obs.shape != (len(act), OBS_DIM) or act.shape[1:] != (2,):
            raise ValueError(f"trajectory {traj.scene}/{traj.seed}: malformed arrays {obs.shape}, {act.shape}")
        chunks.append(struct.pack("<I", len(name)))
        chunks.append(name)
        chunks.append(struct.pack("<QIB", traj.seed, len(act), EVENT_CODES[traj.event]))
        chunks.append(np.hstack([obs, act]).astype("<f4").tobytes())
    return b"".join(chunks)


def decode_dataset(raw: bytes) -> DemoDataset:
    def need(offset, n, what):
        if offset + n > len(raw):
            raise DatasetFormatError(f"truncated file while reading {what}", offset)

    need(0, 12, "header")
    if raw[:4] != DATASET_MAGIC:
        raise DatasetFormatError(f"bad magic {raw[:4]!r}", 0)
    version, count = struct.unpack_from("<II", raw, 4)
    if version != DATASET_VERSION:
        raise DatasetFormatError(f"unsupported dataset version {version}", 4)
    offset = 12
    trajectories = []
    row = OBS_DIM + 2
    for k in range(count):
        need(offset, 4, f"trajectory {k} name length")
        (n,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        need(offset, n, f"trajectory {k} name")
        try:
            name = raw[offset:offset + n].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DatasetFormatError(f"trajectory {k} name is not UTF-8", offset) from exc
        offset += n
        need(offset, 13, f"trajectory {k} header")
        seed, steps, code = struct.unpack_from("<QIB", raw, offset)
        if code not in CODE_EVENTS:
            raise DatasetFormatError(f"trajectory {k} has unknown event code {code}", offset + 12)
        offset += 13
        need(offset, 4 * row * steps, f"trajectory {k} steps")
        block = np.frombuffer(raw, dtype="<f4", count=row * steps, offset=offset).reshape(steps, row)
        offset += 4 * row * steps
        trajectories.append(TrajectoryRecord(name, seed, block[:, :OBS_DIM].astype(np.float32),
                                             block[:, OBS_DIM:].astype(np.float32), CODE_EVENTS[code]))
    if offset != len(raw):
        raise DatasetFormatError(f"{len(raw) - offset} trailing bytes after {count} trajectories", offset)
    return DemoDataset(trajectories)


def write_dataset(ds: DemoDataset, path) -> None:
    path = Path(path)
    path.write_bytes(encode_dataset(ds))
    if ds.metadata:
        Path(str(path) + ".meta.json").write_text(json.dumps(ds.metadata, indent=2, sort_keys=True) + "\n")


def read_dataset(path) -> DemoDataset:
    path = Path(path)
    ds = decode_dataset(path.read_bytes())
    meta = Path(str(path) + ".meta.json")
    if meta.is_file():
        ds.metadata = json.loads(meta.read_text())
    return ds


def summarize(ds: DemoDataset) -> list:
    """Per-trajectory summaries for ``inspect-data``."""
    rows = []
    for k, t in enumerate(ds.trajectories):
        rows.append({"index": k, "scene": t.scene, "seed": t.seed, "steps": len(t),
                     "event": t.event.value, "mean_v": float(np.mean(t.actions[:, 0])) if len(t) else 0.0,
                     "mean_abs_w": float(np.mean(np.abs(t.actions[:, 1]))) if len(t) else 0.0})
    return rows


# -- corpus generation -------------------------------------------------

@dataclass
class DemoConfig:
    target: int = 200
    scenes: tuple = TRAINING_SCENES
    seed: int = 0
    resolution: float = 0.1
    inflation: float = ROBOT_RADIUS + 0.15
    lookahead: float = 0.6
    k_heading: float = 2.0
    min_len: int = SEQ_LEN
    attempt_factor: int = 5

    def digest(self) -> str:
        doc = asdict(self)
        doc["scenes"] = list(self.scenes)
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


def demonstrate(spec, seed: int, cfg: DemoConfig) -> TrajectoryRecord:
    """One static-scene demonstration; raises on planning failure."""
    world = build_scene(static_variant(spec), seed)
    grid = rasterize(world, cfg.resolution, cfg.inflation)
    cells = plan_astar(grid, grid.cell_of((world.pose.x, world.pose.y)), grid.cell_of(world.goal))
    waypoints = np.array([grid.center_of(c) for c in cells])
    waypoints[-1] = world.goal
    return track_path(world, waypoints, TrackerGains(cfg.lookahead, cfg.k_heading), seed=seed)


def generate_demo_corpus(cfg: DemoConfig | None = None, specs: list | None = None) -> DemoDataset:
    cfg = cfg or DemoConfig()
    specs = specs if specs is not None else [bundled_scene(n) for n in cfg.scenes]
    causes = Counter()
    raw = []
    clean = 0
    max_attempts = cfg.attempt_factor * max(cfg.target, 1)
    attempt = 0
    while clean < cfg.target:
        if attempt >= max_attempts:
            raise GenerationError(f"only {clean}/{cfg.target} clean trajectories after {attempt} attempts",
                                  causes)
        spec = specs[attempt % len(specs)]
        seed = cfg.seed * 1_000_003 + attempt
        attempt += 1
        try:
            traj = demonstrate(spec, seed, cfg)
        except UnreachableError:
            causes["unreachable"] += 1
            continue
        except SceneError:
            causes["scene_error"] += 1
            continue
        except ValueError:
            causes["blocked_endpoint"] += 1
            continue
        raw.append(traj)
        if is_clean(traj, cfg.min_len):
            clean += 1
        elif traj.event is not Event.REACHED:
            causes[traj.event.value] += 1
        else:
            causes["too_short"] += 1
    ds = clean_dataset(DemoDataset(raw), cfg.min_len)
    steps = [len(t) for t in ds.trajectories]
    ds.metadata.update({
        "config_hash": cfg.digest(),
        "tool_version": __version__,
        "attempts": attempt,
        "raw_count": len(raw),
        "count": len(ds),
        "mean_steps": float(np.mean(steps)) if steps else 0.0,
        "failure_causes": dict(sorted(causes.items())),
    })
    return ds
