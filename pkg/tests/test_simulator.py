import numpy as np
import pytest

from particle_world import simulator as sim
from particle_world.episodes import make_policy
from particle_world.errors import InvalidActionError, InvalidInputError
from particle_world.simulator import (
    TASKS,
    TaskSpec,
    create_scene,
    default_task_spec,
    max_disk_overlap,
    rope_stretch,
    step,
    total_rest_length,
)


def same_scene(a, b):
    return (
        np.array_equal(a.obj, b.obj)
        and np.array_equal(a.tools, b.tools)
        and np.array_equal(a.codes, b.codes)
        and np.array_equal(a.ee_offsets, b.ee_offsets)
    )


def box_scene(x=0.35, y=0.275, theta=0.0):
    scene = create_scene(default_task_spec("box_push"), seed=0)
    scene.box_pose = np.array([x, y, theta])
    sim._apply_box_pose(scene)
    return scene


def push_box(scene, start_xy, direction, steps=6):
    scene.tools[0, :2] = start_xy
    scene.last_delta[:] = 0.0
    delta = np.array([*direction, 0.0]) * scene.spec.max_step * 0.8
    for _ in range(steps):
        scene = step(scene, delta)
    return scene


# task specs and scene construction


def test_task_spec_validation():
    with pytest.raises(InvalidInputError):
        TaskSpec("juggling")
    with pytest.raises(InvalidInputError):
        default_task_spec("rope", dt=0.0)
    with pytest.raises(InvalidInputError):
        default_task_spec("rope", bounds=((0, 1), (1, 1), (0, 1)))
    with pytest.raises(InvalidInputError):
        default_task_spec("rope", counts={"rope": 0})


def test_task_spec_dict_round_trip():
    spec = default_task_spec("cloth_gather")
    assert TaskSpec.from_dict(spec.to_dict()) == spec


@pytest.mark.parametrize("task", TASKS)
def test_scene_creation_is_deterministic(task):
    spec = default_task_spec(task)
    assert same_scene(create_scene(spec, 3), create_scene(spec, 3))
    assert not same_scene(create_scene(spec, 3), create_scene(spec, 4))


def test_rope_rest_length_arithmetic():
    spec = default_task_spec("rope", counts={"rope": 17}, rest_length=0.05)
    scene = create_scene(spec, 0)
    assert total_rest_length(scene) == pytest.approx(0.80, abs=1e-12)
    assert rope_stretch(scene) < 1e-12


def test_granular_initial_scene_has_no_overlap():
    spec = default_task_spec("granular", counts={"granular": 32})
    scene = create_scene(spec, 5)
    p = scene.obj[scene.granular_idx, :2]
    worst = min(
        np.hypot(*(p[i] - p[j])) for i in range(len(p)) for j in range(i + 1, len(p))
    )
    assert worst >= 2 * spec.granular_radius - 1e-9


def test_overfull_scene_is_rejected():
    with pytest.raises(InvalidInputError):
        create_scene(default_task_spec("granular", counts={"granular": 5000}), 0)
    with pytest.raises(InvalidInputError):
        create_scene(default_task_spec("box_push", counts={"rigid": 10_000}), 0)


@pytest.mark.parametrize("task", TASKS)
def test_effector_has_eight_points_and_zero_material(task):
    ps = create_scene(default_task_spec(task), 0).particle_set().validate()
    assert ps.num_effector == sim.EFFECTOR_POINTS
    assert not ps.materials[ps.is_ee].any()
    assert (ps.materials[~ps.is_ee].sum(axis=1) == 1).all()


# stepping


def test_speed_limit_is_enforced():
    scene = create_scene(default_task_spec("rope"), 0)
    with pytest.raises(InvalidActionError):
        step(scene, np.array([scene.spec.max_step * 1.01, 0.0, 0.0]))
    with pytest.raises(InvalidActionError):
        step(scene, np.zeros(7))


def test_step_does_not_mutate_its_input():
    scene = create_scene(default_task_spec("box_push"), 0)
    before = scene.copy()
    step(scene, np.array([0.01, 0.0, 0.0]))
    assert same_scene(scene, before)


@pytest.mark.parametrize("task", TASKS)
def test_zero_motion_on_a_settled_scene_changes_nothing(task):
    spec = default_task_spec(task)
    scene = create_scene(spec, 1)
    for _ in range(40):
        scene = step(scene, np.zeros(spec.action_dim))
    nxt = step(scene, np.zeros(spec.action_dim))
    assert np.abs(nxt.obj - scene.obj).max() <= 1e-9


def test_central_push_translates_without_rotation():
    scene = box_scene()
    hx = sim.BOX_SIZE[0] / 2
    centre_y = scene.box_pose[1]
    # the box centre of mass is the pose origin
    out = push_box(scene, (scene.box_pose[0] - hx - 0.03, centre_y), (1.0, 0.0))
    assert out.box_pose[0] > 0.35 + 0.01
    assert abs(out.box_pose[2]) < 1e-6
    assert abs(out.box_pose[1] - centre_y) < 1e-6


@pytest.mark.parametrize("offset", [0.025, -0.025])
def test_offset_push_rotates_with_the_cross_product_sign(offset):
    scene = box_scene()
    hx = sim.BOX_SIZE[0] / 2
    out = push_box(scene, (scene.box_pose[0] - hx - 0.03, scene.box_pose[1] + offset), (1.0, 0.0))
    arm = np.array([-hx, offset])
    push = np.array([1.0, 0.0])
    expected_sign = np.sign(arm[0] * push[1] - arm[1] * push[0])
    assert np.sign(out.box_pose[2]) == expected_sign
    assert abs(out.box_pose[2]) > 1e-3


def test_effector_poses_integrate_commands_exactly():
    spec = default_task_spec("rope_sweep")
    scene = create_scene(spec, 2)
    rng = np.random.default_rng(0)
    policy = make_policy(scene, rng)
    tools = scene.tools.copy()
    for _ in range(15):
        a = policy(scene)
        tools = tools + np.asarray(a).reshape(spec.num_tools, 3)
        scene = step(scene, a)
        np.testing.assert_array_equal(scene.tools, tools)


def test_per_point_effector_motion_must_be_rigid():
    spec = default_task_spec("box_push")
    scene = create_scene(spec, 0)
    motion = np.tile([0.01, 0.0, 0.0], (sim.EFFECTOR_POINTS, 1))
    assert np.array_equal(sim.tool_delta(scene, motion), [[0.01, 0.0, 0.0]])
    motion[3, 0] = 0.0
    with pytest.raises(InvalidActionError):
        sim.tool_delta(scene, motion)


# conservation on random interaction episodes


def run_interaction(task, seed, steps=50):
    spec = default_task_spec(task)
    scene = create_scene(spec, seed)
    policy = make_policy(scene, np.random.default_rng(seed))
    scenes = [scene]
    for _ in range(steps):
        scene = step(scene, policy(scene))
        scenes.append(scene)
    return scenes


@pytest.mark.parametrize("task", TASKS)
def test_constraints_hold_every_step(task):
    for seed in (0, 1):
        scenes = run_interaction(task, seed)
        first = scenes[0].obj
        d0 = np.linalg.norm(first[:, None] - first[None], axis=-1)
        moved = False
        for s in scenes[1:]:
            assert rope_stretch(s) <= 0.01
            assert s.obj[:, 2].min() >= -1e-9
            assert max_disk_overlap(s) <= 1e-6
            if task == "box_push":
                d = np.linalg.norm(s.obj[:, None] - s.obj[None], axis=-1)
                assert np.abs(d - d0).max() <= 1e-9
            moved |= not np.array_equal(s.obj, first)
        assert moved, "random interaction never touched the object"


@pytest.mark.parametrize("task", TASKS)
def test_passive_motion_dissipates(task):
    spec = default_task_spec(task)
    scene = run_interaction(task, 3, steps=20)[-1]
    energy = []
    for _ in range(20):
        nxt = step(scene, np.zeros(spec.action_dim))
        energy.append(float(((nxt.obj - scene.obj) ** 2).sum()))
        scene = nxt
    assert all(b <= a for a, b in zip(energy, energy[1:]))


def test_farthest_point_sampling_spreads_points():
    pts = np.array([[0.0, 0, 0], [0.1, 0, 0], [1.0, 0, 0], [0.5, 0, 0]])
    assert list(sim.farthest_point_sampling(pts, 3)) == [0, 2, 3]
    with pytest.raises(InvalidInputError):
        sim.farthest_point_sampling(pts, 5)
