"""Deterministic 2D lidar navigation world with a differential-drive robot."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

import numpy as np

DT = 0.1
MAX_STEPS = 1000
ROBOT_RADIUS = 0.2
GOAL_RADIUS = 0.3
V_MAX = 1.0
W_MAX = 1.0
LIDAR_BEAMS = 180
LIDAR_RANGE = 6.0
GOAL_NORM = 15.0
OBS_DIM = LIDAR_BEAMS + 4

R_GOAL = 30.0
R_COLLISION = -20.0
R_TIME = -0.01

# Beam i points at -90 + i degrees, so the forward beam is i=90.
BEAM_ANGLES = -math.pi / 2 + np.arange(LIDAR_BEAMS) * (math.pi / LIDAR_BEAMS)


class EpisodeOverError(RuntimeError):
    """Raised when stepping a world whose episode already ended."""


class Event(str, Enum):
    ALIVE = "alive"
    REACHED = "reached"
    COLLIDED = "collided"
    TIMEOUT = "timeout"

    @property
    def terminal(self) -> bool:
        return self is not Event.ALIVE


def wrap_angle(a: float) -> float:
    """Wrap into (-pi, pi]."""
    a = math.remainder(a, 2.0 * math.pi)
    return math.pi if a <= -math.pi else a


@dataclass
class Pose:
    x: float
    y: float
    theta: float

    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass(frozen=True)
class ActionCmd:
    v: float
    w: float

    def clamped(self, v_max: float = V_MAX, w_max: float = W_MAX) -> "ActionCmd":
        return ActionCmd(min(max(float(self.v), 0.0), v_max), min(max(float(self.w), -w_max), w_max))

    def as_array(self) -> np.ndarray:
        return np.array([self.v, self.w])


@dataclass
class DynamicObstacle:
    shape: str  # "circle" or "rectangle"
    size: tuple  # (radius,) or (half_length, half_width)
    x: float
    y: float
    heading: float
    speed: float
    wander_std: float = 0.3
    orientation: float = 0.0

    @property
    def bounding_radius(self) -> float:
        return self.size[0] if self.shape == "circle" else math.hypot(*self.size)

    def polygon(self) -> np.ndarray:
        hl, hw = self.size
        c, s = math.cos(self.orientation), math.sin(self.orientation)
        local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array([self.x, self.y])


@dataclass
class StepOutcome:
    obs: np.ndarray
    nav_reward: float
    event: Event
    r_step: float = 0.0
    distance: float = 0.0


def polygon_edges(poly: np.ndarray) -> np.ndarray:
    """(K, 2) vertex ring -> (K, 4) segments."""
    return np.hstack([poly, np.roll(poly, -1, axis=0)])


def point_segment_distance(points: np.ndarray, segs: np.ndarray) -> np.ndarray:
    """Distances from (P, 2) points to (N, 4) segments, shape (P, N)."""
    if len(segs) == 0:
        return np.full((len(points), 0), np.inf)
    a = segs[:, :2]
    e = segs[:, 2:] - a
    ee = np.maximum(np.einsum("ij,ij->i", e, e), 1e-18)
    rel = points[:, None, :] - a[None, :, :]
    u = np.clip(np.einsum("pnj,nj->pn", rel, e) / ee, 0.0, 1.0)
    closest = a[None] + u[..., None] * e[None]
    return np.linalg.norm(points[:, None, :] - closest, axis=-1)


def points_in_polygon(points: np.ndarray, poly: np.ndarray) -> np.ndarray:
    """Inside test for a convex polygon given in either winding."""
    edges = np.roll(poly, -1, axis=0) - poly
    rel = points[:, None, :] - poly[None, :, :]
    cross = edges[None, :, 0] * rel[..., 1] - edges[None, :, 1] * rel[..., 0]
    return np.all(cross >= 0, axis=1) | np.all(cross <= 0, axis=1)


def ray_segment_distances(origin: np.ndarray, dirs: np.ndarray, segs: np.ndarray) -> np.ndarray:
    """Nearest hit along each unit ray in ``dirs`` (K, 2); inf where none."""
    if len(segs) == 0:
        return np.full(len(dirs), np.inf)
    a = segs[:, :2]
    e = segs[:, 2:] - a
    ap = a - origin
    denom = dirs[:, None, 0] * e[None, :, 1] - dirs[:, None, 1] * e[None, :, 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (ap[None, :, 0] * e[None, :, 1] - ap[None, :, 1] * e[None, :, 0]) / denom
        u = (ap[None, :, 0] * dirs[:, None, 1] - ap[None, :, 1] * dirs[:, None, 0]) / denom
    hit = (np.abs(denom) > 1e-12) & (t >= 0.0) & (u >= 0.0) & (u <= 1.0)
    return np.where(hit, t, np.inf).min(axis=1)


def ray_circle_distances(origin: np.ndarray, dirs: np.ndarray, circles: np.ndarray) -> np.ndarray:
    if len(circles) == 0:
        return np.full(len(dirs), np.inf)
    oc = origin - circles[:, :2]
    b = dirs @ oc.T
    cc = np.einsum("ij,ij->i", oc, oc) - circles[:, 2] ** 2
    disc = b * b - cc[None, :]
    root = np.sqrt(np.maximum(disc, 0.0))
    t_near = -b - root
    t = np.where(t_near >= 0.0, t_near, -b + root)
    return np.where((disc >= 0.0) & (t >= 0.0), t, np.inf).min(axis=1)


def step_kinematics(pose: Pose, a: ActionCmd, dt: float = DT) -> Pose:
    """Exact unicycle integration over ``dt``."""
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    v, w = a.v, a.w
    th = pose.theta
    if abs(w) < 1e-9:
        return Pose(pose.x + v * dt * math.cos(th), pose.y + v * dt * math.sin(th), wrap_angle(th))
    th_new = th + w * dt
    r = v / w
    return Pose(pose.x + r * (math.sin(th_new) - math.sin(th)),
                pose.y - r * (math.cos(th_new) - math.cos(th)),
                wrap_angle(th_new))


def compute_nav_reward(prev_dist: float, cur_dist: float, event: Event) -> float:
    event = Event(event)
    if event is Event.REACHED:
        return R_GOAL
    if event is Event.COLLIDED:
        return R_COLLISION
    if event is Event.TIMEOUT:
        return R_TIME
    return (prev_dist - cur_dist) + R_TIME


@dataclass
class World:
    bounds: tuple  # (xmin, ymin, xmax, ymax)
    goal: np.ndarray
    pose: Pose
    segments: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    polygons: list = field(default_factory=list)
    dynamic: list = field(default_factory=list)
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    robot_radius: float = ROBOT_RADIUS
    goal_radius: float = GOAL_RADIUS
    dt: float = DT
    max_steps: int = MAX_STEPS
    lidar_range: float = LIDAR_RANGE
    name: str = ""
    obs_filter: Callable | None = None
    steps: int = 0
    last_action: ActionCmd = ActionCmd(0.0, 0.0)
    event: Event = Event.ALIVE

    def __post_init__(self):
        if self.robot_radius <= 0:
            raise ValueError("robot radius must be positive")
        self.goal = np.asarray(self.goal, dtype=np.float64)
        self.segments = np.asarray(self.segments, dtype=np.float64).reshape(-1, 4)
        self.polygons = [np.asarray(p, dtype=np.float64) for p in self.polygons]
        self._static_edges = np.vstack([self.segments] + [polygon_edges(p) for p in self.polygons])

    # -- geometry views -------------------------------------------------
    def all_segments(self) -> np.ndarray:
        rects = [polygon_edges(o.polygon()) for o in self.dynamic if o.shape == "rectangle"]
        return np.vstack([self._static_edges] + rects) if rects else self._static_edges

    def all_polygons(self) -> list:
        return self.polygons + [o.polygon() for o in self.dynamic if o.shape == "rectangle"]

    def circles(self) -> np.ndarray:
        rows = [(o.x, o.y, o.size[0]) for o in self.dynamic if o.shape == "circle"]
        return np.array(rows, dtype=np.float64).reshape(-1, 3)

    def clearance(self, point) -> float:
        """Signed-ish clearance: distance to nearest obstacle surface, 0 if inside one."""
        p = np.asarray(point, dtype=np.float64).reshape(1, 2)
        best = np.inf
        segs = self.all_segments()
        if len(segs):
            best = float(point_segment_distance(p, segs).min())
        for poly in self.all_polygons():
            if points_in_polygon(p, poly)[0]:
                return 0.0
        circ = self.circles()
        if len(circ):
            best = min(best, float((np.linalg.norm(circ[:, :2] - p, axis=1) - circ[:, 2]).min()))
        return max(best, 0.0)

    def in_collision(self, pose: Pose | None = None) -> bool:
        pose = pose or self.pose
        return self.clearance((pose.x, pose.y)) < self.robot_radius

    def goal_distance(self, pose: Pose | None = None) -> float:
        pose = pose or self.pose
        return math.hypot(pose.x - self.goal[0], pose.y - self.goal[1])

    # -- sensing ---------------------------------------------------------
    def cast_lidar(self, pose: Pose | None = None) -> np.ndarray:
        return cast_lidar(self, pose or self.pose)

    def observe(self) -> np.ndarray:
        ranges = self.cast_lidar()
        lidar = np.clip(ranges / self.lidar_range, 0.0, 1.0)
        dx, dy = self.goal[0] - self.pose.x, self.goal[1] - self.pose.y
        dist = math.hypot(dx, dy)
        bearing = wrap_angle(math.atan2(dy, dx) - self.pose.theta) if dist > 0 else 0.0
        obs = np.empty(OBS_DIM)
        obs[:LIDAR_BEAMS] = lidar
        obs[LIDAR_BEAMS] = min(dist / GOAL_NORM, 1.0)
        obs[LIDAR_BEAMS + 1] = bearing / math.pi
        obs[LIDAR_BEAMS + 2] = self.last_action.v / V_MAX
        obs[LIDAR_BEAMS + 3] = self.last_action.w / W_MAX
        if self.obs_filter is not None:
            obs = self.obs_filter(obs)
        return obs

    # -- dynamics --------------------------------------------------------
    def advance_obstacles(self, dt: float | None = None) -> "World":
        return advance_obstacles(self, self.dt if dt is None else dt)

    def step(self, a: ActionCmd) -> StepOutcome:
        return step_episode(self, a)


def cast_lidar(world: World, pose: Pose) -> np.ndarray:
    """180 ranges in meters over the forward half-plane."""
    origin = np.array([pose.x, pose.y])
    for poly in world.all_polygons():
        if points_in_polygon(origin[None], poly)[0]:
            return np.zeros(LIDAR_BEAMS)
    circ = world.circles()
    if len(circ) and np.any(np.linalg.norm(circ[:, :2] - origin, axis=1) < circ[:, 2]):
        return np.zeros(LIDAR_BEAMS)
    angles = pose.theta + BEAM_ANGLES
    dirs = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    hits = np.minimum(ray_segment_distances(origin, dirs, world.all_segments()),
                      ray_circle_distances(origin, dirs, circ))
    return np.minimum(hits, world.lidar_range)


def advance_obstacles(world: World, dt: float) -> World:
    xmin, ymin, xmax, ymax = world.bounds
    for ob in world.dynamic:
        if ob.speed == 0.0:
            continue
        if ob.wander_std > 0.0:
            ob.heading += float(world.rng.normal(0.0, ob.wander_std))
        x = ob.x + ob.speed * dt * math.cos(ob.heading)
        y = ob.y + ob.speed * dt * math.sin(ob.heading)
        r = min(ob.bounding_radius, 0.5 * (xmax - xmin), 0.5 * (ymax - ymin))
        lo_x, hi_x, lo_y, hi_y = xmin + r, xmax - r, ymin + r, ymax - r
        if x < lo_x or x > hi_x:
            x = 2 * lo_x - x if x < lo_x else 2 * hi_x - x
            ob.heading = math.pi - ob.heading
        if y < lo_y or y > hi_y:
            y = 2 * lo_y - y if y < lo_y else 2 * hi_y - y
            ob.heading = -ob.heading
        ob.x = min(max(x, lo_x), hi_x)
        ob.y = min(max(y, lo_y), hi_y)
        ob.heading = wrap_angle(ob.heading)
    return world


def step_episode(world: World, a: ActionCmd) -> StepOutcome:
    if world.event.terminal:
        raise EpisodeOverError(f"episode already ended with {world.event.value}")
    a = a.clamped()
    prev_dist = world.goal_distance()
    world.pose = step_kinematics(world.pose, a, world.dt)
    world.last_action = a
    advance_obstacles(world, world.dt)
    world.steps += 1

    cur_dist = world.goal_distance()
    if world.in_collision():
        event = Event.COLLIDED
    elif cur_dist < world.goal_radius:
        event = Event.REACHED
    elif world.steps >= world.max_steps:
        event = Event.TIMEOUT
    else:
        event = Event.ALIVE
    world.event = event

    obs = world.observe()
    reward = compute_nav_reward(prev_dist, cur_dist, event)
    r_step = prev_dist - cur_dist if event is Event.ALIVE else 0.0
    return StepOutcome(obs=obs, nav_reward=reward, event=event, r_step=r_step, distance=cur_dist)
