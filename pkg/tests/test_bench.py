"""
Statistical acceptance runs over the shipped scenarios. Slow; run with `pytest -m bench`.
"""
from pathlib import Path

import numpy as np
import pytest

from config import load_config
from dstorm import DStormPlanner
from gdsp import VoxelEstimates
from harness import run_mapping_benchmark, run_suite
from robot import JointState

SCENARIO_DIR = Path(__file__).resolve().parent.parent / "scenarios"

pytestmark = pytest.mark.bench


def _scenario(name: str):
    return load_config(str(SCENARIO_DIR / f"{name}.yaml"))


def test_static_scene_occupancy_f1():
    config = _scenario("static_occupancy")
    metrics = run_mapping_benchmark(config, seed=0)
    assert metrics.best_f1 >= 0.90


def test_constant_velocity_rmse():
    config = _scenario("constant_velocity")
    metrics = run_mapping_benchmark(config, seed=0)
    assert not np.isnan(metrics.velocity_rmse)
    assert metrics.velocity_rmse <= 0.06


def test_map_step_mean_time():
    config = _scenario("static_occupancy")
    config = config.model_copy(update={
        "duration": 3.0,
        "map": config.map.model_copy(update={"max_particles": 200_000, "max_observations": 5_000}),
    })
    metrics = run_mapping_benchmark(config, seed=0)
    assert metrics.map_step_ms["total"] <= 100.0


def test_free_space_equilibrium():
    config = _scenario("planar_free")
    robot = config.build_robot()
    start = np.asarray(config.robot.start, dtype=float)
    planner = DStormPlanner(robot, config.planner, goal=start, seed=0)
    planner.observe(VoxelEstimates.empty(config.map.voxel_size), t=0.0)
    state = JointState.at_rest(start)
    tau = config.planner.control_interval
    for i in range(50):
        result = planner.step(state, i * tau)
        assert np.linalg.norm(result.u0) < 0.1
        state = JointState(result.q_desired, result.qdot_desired, result.u0.copy())


def test_free_space_reaching_path_length():
    config = _scenario("planar_free")
    report = run_suite(config, config.seed_list())
    straight = np.linalg.norm(np.subtract(config.robot.goal, config.robot.start))
    assert report.summary()["success_rate"] == 1.0
    for episode in report.episodes:
        assert episode.path_length <= 1.10 * straight


def test_static_cross_success_rate():
    config = _scenario("cross_static")
    report = run_suite(config, config.seed_list())
    summary = report.summary()
    assert summary["episodes"] == 20
    assert summary["success_rate"] == 1.0


def test_dynamic_planner_beats_static_assumption():
    config = _scenario("six_body_dynamic")
    seeds = config.seed_list()
    dynamic = run_suite(config, seeds, baseline=False).summary()
    baseline = run_suite(config, seeds, baseline=True).summary()
    assert dynamic["mode"] == "dynamic" and baseline["mode"] == "baseline"
    assert dynamic["success_rate"] >= 0.85
    assert dynamic["success_rate"] - baseline["success_rate"] >= 0.10
