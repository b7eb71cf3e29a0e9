"""Scene specifications, bundled suites, and zero-shot perturbations."""

from __future__ import annotations

import json
import math
import re
from dataclasses import asdict, dataclass, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .simworld import (
    GOAL_RADIUS,
    LIDAR_BEAMS,
    ROBOT_RADIUS,
    DynamicObstacle,
    Pose,
    World,
    points_in_polygon,
)

SCENE_VERSION = 1
MIN_START_GOAL = 3.0
MAX_TRIES = 1000
DEFAULT_ZERO_SHOT_NOISE = 0.02

TRAINING_SCENES = ("open", "sparse", "dense", "dynamic")


class SceneError(ValueError):
    """A scene cannot be constructed (infeasible spawn, bad geometry)."""


class SceneFileError(ValueError):
    def __init__(self, path, line: int, message: str):
        self.path, self.line = str(path), line
        super().__init__(f"{path}:{line}: {message}")


@dataclass(frozen=True)
class ObstacleTemplate:
    shape: str  # "circle" | "rectangle"
    size_range: tuple = (0.2, 0.4)
    speed_range: tuple = (0.0, 0.0)
    count: int = 0
    wander_std: float = 0.3

    def __post_init__(self):
        if self.shape not in ("circle", "rectangle"):
            raise ValueError(f"unknown obstacle shape {self.shape!r}")
        if self.count < 0:
            raise ValueError("obstacle count must be >= 0")
        object.__setattr__(self, "size_range", tuple(float(v) for v in self.size_range))
        object.__setattr__(self, "speed_range", tuple(float(v) for v in self.speed_range))


@dataclass(frozen=True)
class SceneSpec:
    name: str
    bounds: tuple = (0.0, 0.0, 10.0, 10.0)
    walls: tuple = ()
    polygons: tuple = ()
    dynamic: tuple = ()
    spawn: tuple = (0.5, 0.5, 9.5, 9.5)
    goal: tuple = (0.5, 0.5, 9.5, 9.5)
    obs_noise_std: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "bounds", tuple(float(v) for v in self.bounds))
        object.__setattr__(self, "walls", tuple(tuple(float(v) for v in w) for w in self.walls))
        object.__setattr__(self, "polygons",
                           tuple(tuple(tuple(float(v) for v in p) for p in poly) for poly in self.polygons))
        object.__setattr__(self, "dynamic", tuple(
            t if isinstance(t, ObstacleTemplate) else ObstacleTemplate(**t) for t in self.dynamic))
        object.__setattr__(self, "spawn", tuple(float(v) for v in self.spawn))
        object.__setattr__(self, "goal", tuple(float(v) for v in self.goal))
        validate_spec(self)

    def total_obstacles(self) -> int:
        return sum(t.count for t in self.dynamic)

    def to_json(self) -> dict:
        doc = {"scene_version": SCENE_VERSION}
        doc.update(asdict(self))
        return doc


@dataclass(frozen=True)
class Perturbation:
    density_scale: float = 1.0
    speed_scale: float = 1.0
    shape_swap: bool = False
    goal_shift: tuple | None = None
    noise_std: float | None = None

    def __post_init__(self):
        if self.density_scale <= 0 or self.speed_scale <= 0:
            raise ValueError("perturbation scales must be positive")
        if self.noise_std is not None and self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")


def _region_ok(region, bounds) -> bool:
    x0, y0, x1, y1 = region
    return bounds[0] <= x0 < x1 <= bounds[2] and bounds[1] <= y0 < y1 <= bounds[3]


def validate_spec(spec: SceneSpec) -> None:
    xmin, ymin, xmax, ymax = spec.bounds
    if not (xmax > xmin and ymax > ymin):
        raise ValueError(f"{spec.name}: empty bounds {spec.bounds}")
    for label in ("spawn", "goal"):
        region = getattr(spec, label)
        if not _region_ok(region, spec.bounds):
            raise ValueError(f"{spec.name}: {label} region {region} not inside bounds")
        centre = np.array([[(region[0] + region[2]) / 2, (region[1] + region[3]) / 2]])
        for poly in spec.polygons:
            if points_in_polygon(centre, np.array(poly))[0]:
                raise ValueError(f"{spec.name}: {label} region centred inside a static obstacle")
    if spec.obs_noise_std < 0:
        raise ValueError(f"{spec.name}: obs_noise_std must be >= 0")
    for w in spec.walls:
        if len(w) != 4:
            raise ValueError(f"{spec.name}: wall {w} needs 4 coordinates")
    for poly in spec.polygons:
        if len(poly) < 3:
            raise ValueError(f"{spec.name}: polygon needs >= 3 vertices")


def _perimeter(bounds) -> list:
    x0, y0, x1, y1 = bounds
    return [(x0, y0, x1, y0), (x1, y0, x1, y1), (x1, y1, x0, y1), (x0, y1, x0, y0)]


def _sample_point(rng, region) -> np.ndarray:
    return np.array([rng.uniform(region[0], region[2]), rng.uniform(region[1], region[3])])


def build_scene(spec: SceneSpec, seed: int) -> World:
    """Instantiate ``spec`` into a World; fully determined by (spec, seed)."""
    layout_ss, dyn_ss, noise_ss = np.random.SeedSequence(int(seed)).spawn(3)
    rng = np.random.default_rng(layout_ss)

    segments = np.array(_perimeter(spec.bounds) + list(spec.walls), dtype=np.float64)
    polygons = [np.array(p, dtype=np.float64) for p in spec.polygons]
    world = World(bounds=spec.bounds, goal=np.zeros(2), pose=Pose(0.0, 0.0, 0.0),
                  segments=segments, polygons=polygons, rng=np.random.default_rng(dyn_ss),
                  name=spec.name)

    for _ in range(MAX_TRIES):
        start = _sample_point(rng, spec.spawn)
        if world.clearance(start) >= ROBOT_RADIUS + 0.3:
            break
    else:
        raise SceneError(f"{spec.name}: no free spawn point after {MAX_TRIES} tries")
    for _ in range(MAX_TRIES):
        goal = _sample_point(rng, spec.goal)
        if (world.clearance(goal) >= ROBOT_RADIUS + 0.1
                and np.linalg.norm(goal - start) >= MIN_START_GOAL):
            break
    else:
        raise SceneError(f"{spec.name}: no free goal point {MIN_START_GOAL} m from spawn")

    world.pose = Pose(float(start[0]), float(start[1]), float(rng.uniform(-math.pi, math.pi)))
    world.goal = goal

    placed: list[DynamicObstacle] = []
    xmin, ymin, xmax, ymax = spec.bounds
    for template in spec.dynamic:
        for _ in range(template.count):
            size = rng.uniform(*template.size_range)
            if template.shape == "circle":
                dims = (float(size),)
            else:
                dims = (float(size), float(size * rng.uniform(0.5, 1.0)))
            heading = float(rng.uniform(-math.pi, math.pi))
            speed = float(rng.uniform(*template.speed_range))
            orientation = float(rng.uniform(-math.pi, math.pi))
            for _ in range(MAX_TRIES):
                ob = DynamicObstacle(template.shape, dims, 0.0, 0.0, heading, speed,
                                     template.wander_std, orientation)
                r = ob.bounding_radius
                if xmax - xmin <= 2 * r or ymax - ymin <= 2 * r:
                    raise SceneError(f"{spec.name}: obstacle of radius {r:.2f} exceeds bounds")
                ob.x = float(rng.uniform(xmin + r, xmax - r))
                ob.y = float(rng.uniform(ymin + r, ymax - r))
                centre = np.array([ob.x, ob.y])
                if np.linalg.norm(centre - start) < r + ROBOT_RADIUS + 1.0:
                    continue
                if np.linalg.norm(centre - goal) < r + GOAL_RADIUS + 0.3:
                    continue
                if any(np.hypot(o.x - ob.x, o.y - ob.y) < o.bounding_radius + r + 0.05 for o in placed):
                    continue
                if _static_clearance(world, centre) < r:
                    continue
                placed.append(ob)
                break
            else:
                raise SceneError(f"{spec.name}: could not place {template.shape} obstacle "
                                 f"after {MAX_TRIES} tries")
    world.dynamic = placed

    if spec.obs_noise_std > 0:
        noise_rng = np.random.default_rng(noise_ss)
        std = spec.obs_noise_std
        world.obs_filter = lambda obs: apply_obs_noise(obs, std, noise_rng)
    return world


def _static_clearance(world: World, point) -> float:
    dynamic, world.dynamic = world.dynamic, []
    try:
        return world.clearance(point)
    finally:
        world.dynamic = dynamic


def perturb_zero_shot(spec: SceneSpec, p: Perturbation) -> SceneSpec:
    templates = []
    for t in spec.dynamic:
        shape = t.shape
        if p.shape_swap:
            shape = "rectangle" if shape == "circle" else "circle"
        templates.append(replace(
            t,
            shape=shape,
            count=int(round(t.count * p.density_scale)),
            speed_range=tuple(v * p.speed_scale for v in t.speed_range),
        ))
    return replace(
        spec,
        dynamic=tuple(templates),
        goal=tuple(p.goal_shift) if p.goal_shift is not None else spec.goal,
        obs_noise_std=spec.obs_noise_std if p.noise_std is None else float(p.noise_std),
    )


def apply_obs_noise(obs: np.ndarray, noise_std: float, rng: np.random.Generator) -> np.ndarray:
    """Gaussian noise on the lidar block only, re-clamped to [0, 1]."""
    if noise_std < 0:
        raise ValueError("noise_std must be >= 0")
    if noise_std == 0:
        return obs
    out = np.array(obs, dtype=np.float64, copy=True)
    out[:LIDAR_BEAMS] = np.clip(out[:LIDAR_BEAMS] + rng.normal(0.0, noise_std, LIDAR_BEAMS), 0.0, 1.0)
    return out


def static_variant(spec: SceneSpec) -> SceneSpec:
    """Same layout with every dynamic obstacle frozen in place."""
    frozen = tuple(replace(t, speed_range=(0.0, 0.0), wander_std=0.0) for t in spec.dynamic)
    return replace(spec, dynamic=frozen, obs_noise_std=0.0)


# -- file I/O ----------------------------------------------------------

_FIELDS = {"name", "bounds", "walls", "polygons", "dynamic", "spawn", "goal", "obs_noise_std"}


def _line_of(text: str, key: str) -> int:
    m = re.search(r'"%s"\s*:' % re.escape(key), text)
    return text.count("\n", 0, m.start()) + 1 if m else 1


def parse_scene(text: str, source="<string>") -> SceneSpec:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SceneFileError(source, exc.lineno, exc.msg) from exc
    if not isinstance(doc, dict):
        raise SceneFileError(source, 1, "scene document must be a JSON object")
    version = doc.pop("scene_version", None)
    if version != SCENE_VERSION:
        raise SceneFileError(source, _line_of(text, "scene_version"),
                             f"scene_version must be {SCENE_VERSION}, got {version!r}")
    unknown = sorted(set(doc) - _FIELDS)
    if unknown:
        raise SceneFileError(source, _line_of(text, unknown[0]), f"unknown field {unknown[0]!r}")
    if "name" not in doc:
        raise SceneFileError(source, 1, "missing required field 'name'")
    try:
        return SceneSpec(**doc)
    except (TypeError, ValueError) as exc:
        field_name = next((k for k in doc if k in str(exc)), "name")
        raise SceneFileError(source, _line_of(text, field_name), str(exc)) from exc


def load_scene(path) -> SceneSpec:
    path = Path(path)
    return parse_scene(path.read_text(), source=path)


def save_scene(spec: SceneSpec, path) -> None:
    Path(path).write_text(json.dumps(spec.to_json(), indent=2) + "\n")


def _data_dir():
    return resources.files("navloop") / "data" / "scenes"


def bundled_scene(name: str) -> SceneSpec:
    for group in ("train", "fewshot"):
        entry = _data_dir() / group / f"{name}.json"
        if entry.is_file():
            return parse_scene(entry.read_text(), source=f"{group}/{name}.json")
    raise KeyError(f"no bundled scene named {name!r}")


def training_suite() -> list:
    return [bundled_scene(n) for n in TRAINING_SCENES]


def few_shot_suite() -> list:
    entries = sorted(e.name for e in (_data_dir() / "fewshot").iterdir() if e.name.endswith(".json"))
    return [bundled_scene(e[:-5]) for e in entries]


def zero_shot_perturbations() -> dict:
    raw = json.loads((_data_dir() / "zero_shot.json").read_text())
    out = {}
    for name, p in raw["perturbations"].items():
        p = dict(p)
        if p.get("goal_shift") is not None:
            p["goal_shift"] = tuple(p["goal_shift"])
        p.setdefault("noise_std", DEFAULT_ZERO_SHOT_NOISE)
        out[name] = Perturbation(**p)
    return out


def zero_shot_suite() -> list:
    perturbations = zero_shot_perturbations()
    suite = []
    for spec in few_shot_suite():
        zs = perturb_zero_shot(spec, perturbations[spec.name])
        suite.append(replace(zs, name=spec.name.replace("fs", "zs", 1)))
    return suite


def get_suite(name: str) -> list:
    if name in ("train", "training"):
        return training_suite()
    if name in ("fewshot", "few-shot"):
        return few_shot_suite()
    if name in ("zeroshot", "zero-shot"):
        return zero_shot_suite()
    if name == "desk":
        return [desk_scene()]
    try:
        return [bundled_scene(name)]
    except KeyError:
        pass
    path = Path(name)
    if path.is_file():
        return [load_scene(path)]
    raise KeyError(f"unknown suite or scene {name!r}")


def desk_scene(obstacles: int = 4) -> SceneSpec:
    """Open room with a few wandering circular obstacles; the small end-to-end benchmark."""
    base = bundled_scene("open")
    return replace(base, name="desk_open",
                   dynamic=(ObstacleTemplate("circle", (0.25, 0.4), (0.15, 0.3), obstacles, 0.3),))
