import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.sparse import lil_matrix
from scipy.sparse.csgraph import dijkstra

from navloop.demogen import (
    SQRT2,
    DatasetFormatError,
    DemoConfig,
    DemoDataset,
    GenerationError,
    OccupancyGrid,
    TrajectoryRecord,
    UnreachableError,
    clean_dataset,
    decode_dataset,
    demonstrate,
    encode_dataset,
    generate_demo_corpus,
    octile,
    path_cost,
    plan_astar,
    rasterize,
    read_dataset,
    summarize,
    write_dataset,
)
from navloop.scenes import bundled_scene, build_scene
from navloop.simworld import OBS_DIM, Event

# Costs are a + b*sqrt(2) with small integers a, b; distinct values of that form are
# separated by far more than this, so agreement within it means equal lattice costs.
LATTICE_TOL = 1e-9


def dijkstra_oracle(occupied: np.ndarray, start, goal) -> float:
    """Shortest 8-connected cost via scipy, with the no-corner-cutting rule rebuilt here."""
    h, w = occupied.shape
    free = ~occupied
    graph = lil_matrix((h * w, h * w))
    for y in range(h):
        for x in range(w):
            if not free[y, x]:
                continue
            for dx in (-1, 0, 1):
                for dy in (-1, 0, 1):
                    nx, ny = x + dx, y + dy
                    if (dx, dy) == (0, 0) or not (0 <= nx < w and 0 <= ny < h) or not free[ny, nx]:
                        continue
                    if dx and dy and not (free[y, nx] and free[ny, x]):
                        continue
                    graph[y * w + x, ny * w + nx] = SQRT2 if dx and dy else 1.0
    dist = dijkstra(graph.tocsr(), indices=start[1] * w + start[0])
    return float(dist[goal[1] * w + goal[0]])


def random_case(seed, size=20, density=0.3):
    rng = np.random.default_rng(seed)
    occ = rng.random((size, size)) < density
    free = np.argwhere(~occ)
    a, b = free[rng.choice(len(free), 2, replace=False)]
    return occ, (int(a[1]), int(a[0])), (int(b[1]), int(b[0]))


def check_path(grid, path, start, goal):
    assert path[0] == start and path[-1] == goal
    for (x0, y0), (x1, y1) in zip(path, path[1:]):
        assert max(abs(x1 - x0), abs(y1 - y0)) == 1
        assert grid.is_free((x1, y1))
        if x0 != x1 and y0 != y1:
            assert grid.is_free((x1, y0)) and grid.is_free((x0, y1))


@pytest.mark.parametrize("seed", range(20))
def test_astar_matches_dijkstra(seed):
    occ, start, goal = random_case(seed)
    grid = OccupancyGrid(occ)
    oracle = dijkstra_oracle(occ, start, goal)
    if np.isinf(oracle):
        with pytest.raises(UnreachableError):
            plan_astar(grid, start, goal)
        return
    path = plan_astar(grid, start, goal)
    check_path(grid, path, start, goal)
    assert abs(path_cost(path) - oracle) < LATTICE_TOL


def test_no_corner_cutting():
    occ = np.zeros((2, 2), dtype=bool)
    occ[0, 1] = occ[1, 0] = True
    with pytest.raises(UnreachableError):
        plan_astar(OccupancyGrid(occ), (0, 0), (1, 1))


def test_blocked_endpoints_rejected():
    occ = np.zeros((3, 3), dtype=bool)
    occ[1, 1] = True
    with pytest.raises(ValueError):
        plan_astar(OccupancyGrid(occ), (1, 1), (0, 0))
    with pytest.raises(ValueError):
        plan_astar(OccupancyGrid(occ), (0, 0), (5, 5))


def test_trivial_path():
    assert plan_astar(OccupancyGrid(np.zeros((3, 3), dtype=bool)), (1, 1), (1, 1)) == [(1, 1)]


@given(st.integers(0, 40), st.integers(0, 40), st.integers(0, 40), st.integers(0, 40))
def test_octile_is_exact_on_empty_grid(x0, y0, x1, y1):
    dx, dy = abs(x1 - x0), abs(y1 - y0)
    assert octile((x0, y0), (x1, y1)) == pytest.approx(max(dx, dy) + (SQRT2 - 1) * min(dx, dy))


def test_rasterize_marks_walls_and_keeps_spawn_free():
    world = build_scene(bundled_scene("dense"), 0)
    grid = rasterize(world)
    assert grid.occupied.shape == (100, 100)
    assert grid.occupied[0].all() and grid.occupied[:, -1].all()
    assert grid.is_free(grid.cell_of((world.pose.x, world.pose.y)))
    with pytest.raises(ValueError):
        rasterize(world, inflation=0.1)


def test_demonstration_reaches_goal():
    cfg = DemoConfig()
    traj = demonstrate(bundled_scene("sparse"), 3, cfg)
    assert traj.event is Event.REACHED
    assert traj.obs.dtype == np.float32 and traj.obs.shape == (len(traj), OBS_DIM)
    assert np.all((traj.actions[:, 0] >= 0) & (traj.actions[:, 0] <= 1))
    assert np.all(np.abs(traj.actions[:, 1]) <= 1)


def fake_traj(k, steps, event=Event.REACHED):
    rng = np.random.default_rng(k)
    return TrajectoryRecord(f"s{k}", k, rng.random((steps, OBS_DIM)).astype(np.float32),
                            rng.random((steps, 2)).astype(np.float32), event)


def test_clean_dataset_filters():
    ds = DemoDataset([fake_traj(0, 25), fake_traj(1, 10), fake_traj(2, 30, Event.COLLIDED), fake_traj(3, 20)])
    out = clean_dataset(ds)
    assert [t.seed for t in out.trajectories] == [0, 3]
    assert out.metadata["dropped"] == {"event_collided": 1, "too_short": 1}


def test_encode_round_trip_and_truncation(tmp_path):
    ds = DemoDataset([fake_traj(k, 20 + k) for k in range(5)], {"note": "x"})
    raw = encode_dataset(ds)
    assert raw[:4] == b"NAVD"
    assert decode_dataset(raw) == ds
    for cut in (3, 11, 20, len(raw) - 1):
        with pytest.raises(DatasetFormatError) as exc:
            decode_dataset(raw[:cut])
        assert exc.value.offset <= cut
    with pytest.raises(DatasetFormatError, match="trailing"):
        decode_dataset(raw + b"\0")
    write_dataset(ds, tmp_path / "d.navd")
    back = read_dataset(tmp_path / "d.navd")
    assert back == ds and back.metadata == {"note": "x"}
    rows = summarize(back)
    assert rows[0]["steps"] == 20 and json.dumps(rows)


def test_generate_small_corpus_is_deterministic():
    cfg = DemoConfig(target=4, scenes=("open", "sparse"))
    a, b = generate_demo_corpus(cfg), generate_demo_corpus(cfg)
    assert len(a) == 4 and a == b
    assert encode_dataset(a) == encode_dataset(b)
    assert a.metadata["config_hash"] == cfg.digest()
    assert all(t.event is Event.REACHED and len(t) >= 20 for t in a.trajectories)


def test_generation_gives_up_with_causes():
    with pytest.raises(GenerationError) as exc:
        generate_demo_corpus(DemoConfig(target=2, min_len=10_000, attempt_factor=1), [bundled_scene("open")])
    assert exc.value.causes == {"too_short": 2}


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_astar_path_is_valid_and_no_longer_than_oracle(seed):
    occ, start, goal = random_case(seed, size=12, density=0.25)
    grid = OccupancyGrid(occ)
    try:
        path = plan_astar(grid, start, goal)
    except UnreachableError:
        assert np.isinf(dijkstra_oracle(occ, start, goal))
        return
    check_path(grid, path, start, goal)
    assert path_cost(path) >= octile(start, goal) - LATTICE_TOL


# -- worked examples -----------------------------------------------------

def test_astar_empty_grid_diagonal():
    occ = np.zeros((5, 5), dtype=bool)
    path = plan_astar(OccupancyGrid(occ), (0, 0), (4, 4))
    assert path == [(k, k) for k in range(5)]
    assert path_cost(path) == 4 * SQRT2 == pytest.approx(dijkstra_oracle(occ, (0, 0), (4, 4)), abs=LATTICE_TOL)
    assert path_cost(plan_astar(OccupancyGrid(occ), (2, 2), (2, 2))) == 0.0


def test_astar_walled_goal():
    occ = np.zeros((6, 6), dtype=bool)
    occ[3:6, 3] = occ[3, 3:6] = True
    with pytest.raises(UnreachableError):
        plan_astar(OccupancyGrid(occ), (0, 0), (5, 5))


def corridor_world():
    from navloop.simworld import Pose, World
    walls = np.array([[0, 0, 14, 0], [14, 0, 14, 2], [14, 2, 0, 2], [0, 2, 0, 0]], dtype=float)
    return World(bounds=(0, 0, 14, 2), goal=np.array([12.0, 1.0]), pose=Pose(1.0, 1.0, 0.3), segments=walls)


def test_tracker_on_straight_corridor():
    from navloop.demogen import track_path
    world = corridor_world()
    path = np.column_stack([np.linspace(1.0, 12.0, 111), np.ones(111)])
    traj = track_path(world, path)
    assert traj.event is Event.REACHED
    settled = traj.actions[40:]  # after the alignment transient
    assert np.all(settled[:, 0] > 0.999)
    assert np.all(np.abs(settled[:, 1]) < 0.05)


def test_tracker_single_waypoint_at_robot():
    from navloop.demogen import track_path
    from navloop.simworld import Pose, World
    world = World(bounds=(0, 0, 10, 10), goal=np.array([5.1, 5.0]), pose=Pose(5.0, 5.0, 0.0))
    traj = track_path(world, [(5.0, 5.0)])
    assert traj.event is Event.REACHED and len(traj) == 1


def test_recorded_actions_replay_identically():
    cfg = DemoConfig()
    traj = demonstrate(bundled_scene("sparse"), 5, cfg)
    from navloop.scenes import static_variant
    from navloop.simworld import ActionCmd
    world = build_scene(static_variant(bundled_scene("sparse")), 5)
    obs = [world.observe()]
    for v, w in traj.actions[:-1]:
        obs.append(world.step(ActionCmd(float(v), float(w))).obs)
    np.testing.assert_array_equal(np.asarray(obs, dtype=np.float32), traj.obs)


def test_clean_examples():
    reached = DemoDataset([fake_traj(k, 25) for k in range(10)])
    assert clean_dataset(reached) == reached
    mixed = DemoDataset([fake_traj(k, 25) for k in range(9)] + [fake_traj(9, 25, Event.COLLIDED)])
    assert len(clean_dataset(mixed)) == 9
    assert len(clean_dataset(DemoDataset([fake_traj(0, 12)]))) == 0


def test_empty_dataset_round_trip(tmp_path):
    write_dataset(DemoDataset(), tmp_path / "e.navd")
    assert read_dataset(tmp_path / "e.navd") == DemoDataset()


def test_single_target_on_empty_scene():
    from navloop.scenes import SceneSpec
    ds = generate_demo_corpus(DemoConfig(target=1), [SceneSpec("empty")])
    assert len(ds) == 1 and ds.trajectories[0].event is Event.REACHED
    assert 10 <= ds.metadata["mean_steps"] <= 1000
