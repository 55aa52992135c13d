import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dexhand.control import N_JOINTS
from dexhand.errors import UnknownTaskError
from dexhand.simplant import (
    TASK_KINDS,
    GraspScripts,
    GuideState,
    HandPlant,
    HandState,
    MotorJointPlant,
    SceneSpec,
    default_scripts,
    evaluation_scenes,
    load_grasp_scripts,
    plant_step,
    render_scene,
    run_task,
    scripted_expert,
    zero_policy,
)

DT = 1 / 30


class TestPlant:
    def test_rest_is_fixed_point(self):
        assert plant_step(MotorJointPlant(), 0.0, 0.0, DT) == 0.0

    def test_spring_returns_towards_rest(self):
        p = MotorJointPlant()
        a = plant_step(p, 30.0, 0.0, DT)
        assert 0.0 < a < 30.0

    @pytest.mark.parametrize("c", [0.2, 0.5, -0.3])
    def test_constant_command_equilibrium(self, c):
        p = MotorJointPlant(gain=90.0, spring_rate=2.0, rest_angle=10.0, limits=(-90.0, 90.0))
        target = p.rest_angle + p.gain * c / p.spring_rate
        assert plant_step(p, target, c, DT) == pytest.approx(target, abs=1e-12)
        a = 10.0
        for _ in range(2000):
            a = plant_step(p, a, c, DT)
        assert a == pytest.approx(target, abs=1e-9)

    def test_command_range(self):
        with pytest.raises(ValueError):
            plant_step(MotorJointPlant(), 0.0, 1.5, DT)

    @settings(max_examples=50)
    @given(st.lists(st.floats(-1, 1), min_size=1, max_size=200), st.floats(-90, 90))
    def test_angles_stay_in_limits(self, commands, start):
        p = MotorJointPlant(limits=(-90.0, 90.0))
        a = start
        for c in commands:
            a = plant_step(p, a, c, DT)
            assert -90.0 <= a <= 90.0

    @given(st.floats(-90, 90))
    def test_monotone_spring_return(self, start):
        plant = HandPlant.default()
        q = np.clip(np.full(N_JOINTS, start), plant.lo, plant.hi)
        dist = np.abs(q - plant.rest)
        for _ in range(100):
            q, _ = plant.step(q, np.zeros(N_JOINTS), DT)
            new = np.abs(q - plant.rest)
            assert np.all(new <= dist + 1e-12)
            dist = new

    def test_hand_plant_flags_clamping(self):
        plant = HandPlant.default()
        q, clamped = plant.step(np.zeros(N_JOINTS), -np.ones(N_JOINTS), DT)
        assert np.all(q >= plant.lo)
        assert clamped[1] and not clamped[0]


class TestRender:
    def test_shape_and_determinism(self):
        scene = SceneSpec("cup-grasp", background_seed=3)
        guide = GuideState(scene.object_height_mm - 40)
        hand = HandState(np.full(N_JOINTS, 12.0))
        a = render_scene(scene, guide, hand)
        assert a.shape == (160, 320, 3) and a.dtype == np.uint8
        assert np.array_equal(a, render_scene(scene, guide, hand))

    def test_out_of_view_is_background(self):
        scene = SceneSpec("cup-grasp", object_height_mm=300.0, background_seed=1)
        far = render_scene(scene, GuideState(100.0), HandState())
        other = SceneSpec("faucet-grasp-unscrew", object_height_mm=400.0, background_seed=1)
        assert np.array_equal(far, render_scene(other, GuideState(0.0), HandState()))

    @pytest.mark.parametrize("task", TASK_KINDS)
    def test_closer_object_looks_bigger(self, task):
        scene = SceneSpec(task, object_height_mm=300.0, background_seed=2)
        background = render_scene(scene, GuideState(0.0))

        def count(gap):
            img = render_scene(scene, GuideState(300.0 - gap))
            return int(np.any(img != background, axis=2).sum())

        counts = [count(g) for g in (90, 60, 30, 10, 0)]
        assert all(a < b for a, b in zip(counts, counts[1:]))

    def test_finger_overlay_tracks_angles(self):
        scene = SceneSpec("foam-grasp", background_seed=4)
        guide = GuideState(0.0)
        base = render_scene(scene, guide, HandState())
        bent = np.zeros(N_JOINTS)
        bent[5] = 30.0
        img = render_scene(scene, guide, HandState(bent))
        changed = np.any(img != base, axis=2)
        assert changed.any()
        cols = np.nonzero(changed.any(axis=0))[0]
        assert cols.max() - cols.min() < 10


class TestExpert:
    def test_far_from_object_is_idle(self):
        scene = SceneSpec("cup-grasp")
        guide = GuideState(scene.object_height_mm - 85.0)
        assert not scripted_expert(scene, guide, HandState()).any()

    def test_contact_emits_script_pattern(self):
        scene = SceneSpec("cup-grasp")
        guide = GuideState(scene.object_height_mm)
        bits = scripted_expert(scene, guide, HandState())
        with open_table() as table:
            expected = {j for j, _, stage in table["tasks"]["cup-grasp"] if stage == 0}
        assert set(np.nonzero(bits)[0]) == expected

    def test_targets_reached_is_idle(self):
        scene = SceneSpec("faucet-grasp-unscrew")
        guide = GuideState(scene.object_height_mm)
        q = np.zeros(N_JOINTS)
        for stage in default_scripts().stages(scene.task):
            for j, target in stage:
                q[j] = target
        assert not scripted_expert(scene, guide, HandState(q)).any()

    def test_stages_in_order(self):
        scene = SceneSpec("faucet-grasp-unscrew")
        guide = GuideState(scene.object_height_mm)
        first, second = default_scripts().stages(scene.task)
        bits = scripted_expert(scene, guide, HandState())
        assert set(np.nonzero(bits)[0]) == {j for j, _ in first}
        q = np.zeros(N_JOINTS)
        for j, target in first:
            q[j] = target
        bits = scripted_expert(scene, guide, HandState(q))
        assert set(np.nonzero(bits)[0]) == {j for j, _ in second}

    def test_unknown_task(self):
        with pytest.raises(UnknownTaskError):
            SceneSpec("juggle")
        scripts = GraspScripts.from_dict({"tasks": {}})
        with pytest.raises(UnknownTaskError):
            scripted_expert(SceneSpec("cup-grasp"), GuideState(300.0), HandState(), scripts)

    def test_custom_table_file(self, tmp_path):
        path = tmp_path / "scripts.json"
        path.write_text(json.dumps({"version": 2, "tasks": {"cup-grasp": [[4, 10]]}}))
        scripts = load_grasp_scripts(path)
        scene = SceneSpec("cup-grasp")
        bits = scripted_expert(scene, GuideState(scene.object_height_mm), HandState(), scripts)
        assert np.nonzero(bits)[0].tolist() == [4]


class open_table:
    def __enter__(self):
        from importlib import resources

        return json.loads(resources.files("dexhand").joinpath("data/grasp_scripts.json").read_text())

    def __exit__(self, *exc):
        return False


class TestRunTask:
    @pytest.mark.parametrize("task", TASK_KINDS)
    def test_expert_succeeds(self, task):
        for k, scene in enumerate(evaluation_scenes(task, 3, seed=5)):
            assert run_task(scene, scripted_expert, seed=k).success

    @pytest.mark.parametrize("task", TASK_KINDS)
    def test_zero_policy_fails(self, task):
        scene = evaluation_scenes(task, 1, seed=5)[0]
        result = run_task(scene, zero_policy, seed=0, max_steps=200)
        assert not result.success and result.steps == 200

    def test_deterministic(self):
        scene = evaluation_scenes("foam-grasp", 1, seed=8)[0]
        a = run_task(scene, scripted_expert, seed=3)
        b = run_task(scene, scripted_expert, seed=3)
        assert a.success == b.success and a.steps == b.steps
        assert np.array_equal(a.log.q_m, b.log.q_m) and np.array_equal(a.log.z, b.log.z)

    def test_unscrew_before_grasp_does_not_count(self):
        scene = SceneSpec("faucet-grasp-unscrew")
        first, second = default_scripts().stages(scene.task)

        def impatient(scene, guide, hand):
            # rotate first, then grasp: same end pose, wrong order
            bits = np.zeros(N_JOINTS, dtype=np.uint8)
            if scene.object_height_mm - guide.z > 5.0:
                return bits
            todo = [j for j, t in second if hand.angles[j] < t - 1] or \
                   [j for j, t in first if hand.angles[j] < t - 1]
            bits[todo] = 1
            return bits

        assert not run_task(scene, impatient, seed=0, max_steps=400).success
        assert run_task(scene, scripted_expert, seed=0, max_steps=400).success

    def test_log_csv(self, tmp_path):
        scene = SceneSpec("foam-rotate")
        result = run_task(scene, scripted_expert, seed=0)
        lines = result.log.write_csv(tmp_path / "log.csv").read_text().splitlines()
        assert len(lines) == 1 + result.steps + 1
        assert lines[0].startswith("step,t,z,q0")
