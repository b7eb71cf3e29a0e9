import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from navloop.scenes import (
    MIN_START_GOAL,
    ObstacleTemplate,
    Perturbation,
    SceneFileError,
    SceneSpec,
    apply_obs_noise,
    build_scene,
    bundled_scene,
    desk_scene,
    few_shot_suite,
    get_suite,
    load_scene,
    parse_scene,
    perturb_zero_shot,
    save_scene,
    static_variant,
    training_suite,
    zero_shot_suite,
)
from navloop.simworld import OBS_DIM


def all_specs():
    return training_suite() + few_shot_suite() + zero_shot_suite() + [desk_scene()]


def test_suites_have_expected_members():
    assert [s.name for s in training_suite()] == ["open", "sparse", "dense", "dynamic"]
    fs = few_shot_suite()
    assert len(fs) == 8 and all(s.name.startswith("fs") for s in fs)
    zs = zero_shot_suite()
    assert [s.name[2:] for s in zs] == [s.name[2:] for s in fs]
    assert all(s.name.startswith("zs") for s in zs)
    assert all(s.obs_noise_std > 0 for s in zs)


@pytest.mark.parametrize("spec", all_specs(), ids=lambda s: s.name)
def test_every_scene_builds_valid_episodes(spec):
    for seed in range(10):
        world = build_scene(spec, seed)
        assert not world.in_collision()
        assert world.goal_distance() >= MIN_START_GOAL
        assert world.clearance(world.goal) >= world.robot_radius
        assert len(world.dynamic) == spec.total_obstacles()
        assert world.observe().shape == (OBS_DIM,)


def test_build_is_deterministic():
    spec = bundled_scene("dynamic")
    a, b = build_scene(spec, 42), build_scene(spec, 42)
    assert a.pose == b.pose
    np.testing.assert_array_equal(a.goal, b.goal)
    np.testing.assert_array_equal(a.observe(), b.observe())
    c = build_scene(spec, 43)
    assert (a.pose, tuple(a.goal)) != (c.pose, tuple(c.goal))


def test_desk_scene_has_four_moving_circles():
    world = build_scene(desk_scene(), 0)
    assert len(world.dynamic) == 4
    assert all(o.shape == "circle" and o.speed > 0 for o in world.dynamic)


def test_static_variant_freezes_obstacles():
    world = build_scene(static_variant(bundled_scene("dynamic")), 3)
    before = [(o.x, o.y) for o in world.dynamic]
    for _ in range(20):
        world.advance_obstacles()
    assert before == [(o.x, o.y) for o in world.dynamic]


def test_perturbation_scales():
    spec = SceneSpec("t", dynamic=(ObstacleTemplate("circle", (0.2, 0.3), (0.2, 0.4), 4),))
    out = perturb_zero_shot(spec, Perturbation(density_scale=1.5, speed_scale=2.0, shape_swap=True,
                                               goal_shift=(5, 5, 9, 9), noise_std=0.05))
    t = out.dynamic[0]
    assert (t.count, t.shape, t.speed_range) == (6, "rectangle", (0.4, 0.8))
    assert out.goal == (5.0, 5.0, 9.0, 9.0) and out.obs_noise_std == 0.05
    assert perturb_zero_shot(spec, Perturbation()) == spec
    with pytest.raises(ValueError):
        Perturbation(density_scale=0.0)


def test_obs_noise_only_touches_lidar():
    obs = np.full(OBS_DIM, 0.5)
    noisy = apply_obs_noise(obs, 0.1, np.random.default_rng(0))
    assert not np.array_equal(noisy[:180], obs[:180])
    np.testing.assert_array_equal(noisy[180:], obs[180:])
    assert np.all((noisy >= 0) & (noisy <= 1))
    assert apply_obs_noise(obs, 0.0, np.random.default_rng(0)) is obs


def test_round_trip_through_json(tmp_path):
    for spec in training_suite() + few_shot_suite():
        path = tmp_path / f"{spec.name}.json"
        save_scene(spec, path)
        assert load_scene(path) == spec
        assert json.loads(path.read_text())["scene_version"] == 1


def test_parse_errors_carry_line_numbers():
    with pytest.raises(SceneFileError) as exc:
        parse_scene('{\n "scene_version": 1,\n "name": "x",\n "bogus": 3\n}')
    assert exc.value.line == 4
    with pytest.raises(SceneFileError) as exc:
        parse_scene('{\n "scene_version": 2,\n "name": "x"\n}')
    assert exc.value.line == 2
    with pytest.raises(SceneFileError):
        parse_scene('{"scene_version": 1, "name": "x",\n "spawn": [5, 5, 4, 4]}')
    with pytest.raises(SceneFileError):
        parse_scene("{not json")


def test_get_suite_resolution(tmp_path):
    assert len(get_suite("train")) == 4
    assert get_suite("desk")[0].name == "desk_open"
    assert get_suite("open")[0].name == "open"
    path = tmp_path / "mine.json"
    save_scene(SceneSpec("mine"), path)
    assert get_suite(str(path))[0].name == "mine"
    with pytest.raises(KeyError):
        get_suite("nope")


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(0, 6))
def test_generated_obstacles_do_not_overlap_spawn(seed, count):
    spec = SceneSpec("p", dynamic=(ObstacleTemplate("circle", (0.2, 0.4), (0.1, 0.3), count),))
    world = build_scene(spec, seed)
    assert not world.in_collision()
    centres = np.array([[o.x, o.y] for o in world.dynamic]).reshape(-1, 2)
    radii = np.array([o.bounding_radius for o in world.dynamic])
    for i in range(len(centres)):
        for j in range(i + 1, len(centres)):
            assert np.linalg.norm(centres[i] - centres[j]) >= radii[i] + radii[j]


# -- worked examples -----------------------------------------------------

def test_open_scene_has_walls_only():
    world = build_scene(bundled_scene("open"), 0)
    assert world.dynamic == [] and world.polygons == [] and len(world.segments) >= 4


def test_dense_count_twenty_non_overlapping():
    spec = SceneSpec("d20", dynamic=(ObstacleTemplate("circle", (0.2, 0.35), (0.0, 0.0), 20),))
    world = build_scene(spec, 1)
    assert len(world.dynamic) == 20
    c = np.array([[o.x, o.y] for o in world.dynamic])
    r = np.array([o.bounding_radius for o in world.dynamic])
    d = np.linalg.norm(c[:, None] - c[None], axis=-1) - (r[:, None] + r[None])
    assert d[~np.eye(20, dtype=bool)].min() > 0


def test_perturbation_worked_examples():
    spec = SceneSpec("p", dynamic=(ObstacleTemplate("circle", (0.2, 0.3), (0.15, 0.3), 8),))
    assert perturb_zero_shot(spec, Perturbation(speed_scale=2.0)).dynamic[0].speed_range == pytest.approx((0.3, 0.6))
    assert perturb_zero_shot(spec, Perturbation(density_scale=1.5)).dynamic[0].count == 12


def test_noise_clamp_and_statistics():
    obs = np.full(OBS_DIM, 0.999)
    clipped = apply_obs_noise(obs, 10.0, np.random.default_rng(0))
    draws = np.random.default_rng(0).normal(0.0, 10.0, 180)
    assert np.all(clipped[:180][draws > 0.001] == 1.0)
    assert np.all(clipped[:180][draws < -0.999] == 0.0)
    clean = np.full(OBS_DIM, 0.5)
    rng = np.random.default_rng(1)
    diffs = np.concatenate([apply_obs_noise(clean, 0.02, rng)[:180] - 0.5 for _ in range(556)])
    assert diffs.size >= 100_000
    assert abs(diffs.std() - 0.02) < 0.05 * 0.02
