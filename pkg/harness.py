# harness.py
"""
Experiment drivers: the mapping benchmark, the closed perception-planning loop and the
seeded episode suites with their CSV/JSON reports.

Everything written to summary.json and episodes.csv is a function of (config, seeds) only;
wall-clock measurements go to timing.json.
"""
import os
import time
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from config import ScenarioConfig
from dstorm import DStormPlanner, diagnostics_header
from gdsp import VOXEL_CSV_HEADER, DynamicParticleMap, VoxelEstimates
from geometry import PointCloud, transform_points
from robot import JointState, RobotModel
from sensor import GroundTruth, Scene, ground_truth_voxels, render_depth, robot_scene_clearance
from utils import ConfigError, write_csv, write_json

logger = logging.getLogger(__name__)

EPISODE_FIELDS = ["seed", "success", "outcome", "execution_time", "path_length", "steps",
                  "velocity_rmse", "auc", "best_f1", "false_positives"]
MAP_STAGES = ("preprocess", "predict", "update", "estimate", "resample", "birth", "total")

ProgressCallback = Callable[[int], None]


@dataclass
class RunMetrics:
    seed: int
    success: bool = False
    outcome: str = ""
    execution_time: float = float('nan')
    path_length: float = 0.0
    steps: int = 0
    velocity_rmse: float = float('nan')
    auc: float = float('nan')
    best_f1: float = float('nan')
    false_positives: int = 0
    control_rate_hz: float = float('nan')
    map_step_ms: Dict[str, float] = field(default_factory=dict)
    diagnostics: List[list] = field(default_factory=list)

    def row(self) -> list:
        return [getattr(self, name) for name in EPISODE_FIELDS]


def frame_seed(seed: int, frame: int, camera: int) -> int:
    return int(np.random.SeedSequence([seed, frame, camera]).generate_state(1)[0])


def render_frame(config: ScenarioConfig, scene: Scene, seed: int, frame: int,
                 robot: Optional[RobotModel] = None, q: Optional[np.ndarray] = None):
    """Cameras at the current robot state and one camera-frame cloud per camera."""
    cameras = config.build_cameras(robot, q)
    clouds = [render_depth(scene, cam, spec.noise_std, frame_seed(seed, frame, c), robot, q)
              for c, (cam, spec) in enumerate(zip(cameras, config.cameras))]
    return cameras, clouds


def _dump_frame(output_dir: str, frame: int, estimates: VoxelEstimates, cameras, clouds: Sequence[PointCloud]) -> None:
    write_csv(os.path.join(output_dir, "voxels", f"frame_{frame:05d}.csv"), VOXEL_CSV_HEADER, estimates.rows())
    os.makedirs(os.path.join(output_dir, "clouds"), exist_ok=True)
    for c, (cam, cloud) in enumerate(zip(cameras, clouds)):
        transform_points(cam.pose, cloud).save_xyz(os.path.join(output_dir, "clouds", f"frame_{frame:05d}_cam{c}.xyz"))


@dataclass
class _FrameScore:
    p_occ: np.ndarray
    labels: np.ndarray
    num_visible: int


def _score_frame(estimates: VoxelEstimates, occupied: np.ndarray, visible: np.ndarray) -> _FrameScore:
    """Labels every prediction: 1 visible occupied, 0 free, -1 occupied but unobservable (ignored)."""
    labels = np.zeros(len(estimates), dtype=np.int64)
    if occupied.size and len(estimates):
        pos = np.searchsorted(occupied, estimates.indices)
        pos = np.minimum(pos, occupied.size - 1)
        hit = occupied[pos] == estimates.indices
        labels[hit] = np.where(visible[pos[hit]], 1, -1)
    return _FrameScore(np.asarray(estimates.occupancy), labels, int(np.count_nonzero(visible)))


def precision_recall(scores: Sequence[_FrameScore], thresholds: np.ndarray):
    """Pooled precision and recall at each occupancy threshold."""
    total_visible = sum(s.num_visible for s in scores)
    precision = np.ones(thresholds.size)
    recall = np.zeros(thresholds.size)
    for k, tau in enumerate(thresholds):
        tp = sum(int(np.count_nonzero((s.p_occ >= tau) & (s.labels == 1))) for s in scores)
        fp = sum(int(np.count_nonzero((s.p_occ >= tau) & (s.labels == 0))) for s in scores)
        if tp + fp:
            precision[k] = tp / (tp + fp)
        if total_visible:
            recall[k] = tp / total_visible
    return precision, recall


def occupancy_scores(scores: Sequence[_FrameScore], floor: float, count: int):
    """(AUC, best F1, false positives at the floor threshold); AUC and F1 are NaN without visible ground truth."""
    false_positives = sum(int(np.count_nonzero((s.p_occ >= floor) & (s.labels == 0))) for s in scores)
    if sum(s.num_visible for s in scores) == 0:
        return float('nan'), float('nan'), false_positives
    top = max([float(s.p_occ.max()) for s in scores if s.p_occ.size] + [floor])
    thresholds = np.linspace(floor, top, count)
    precision, recall = precision_recall(scores, thresholds)
    order = np.argsort(recall, kind='stable')
    auc = float(np.trapezoid(precision[order], recall[order]))
    with np.errstate(invalid='ignore', divide='ignore'):
        f1 = np.where(precision + recall > 0, 2 * precision * recall / (precision + recall), 0.0)
    return auc, float(f1.max()), false_positives


def _velocity_errors(estimates: VoxelEstimates, scene: Scene, truth: GroundTruth) -> List[float]:
    """Squared error of the mean estimated voxel velocity of each visible moving body.

    A body with visible ground-truth voxels but no estimate on any of its voxels counts as a
    miss, scored against a zero velocity.
    """
    errors = []
    occupied = truth.occupied
    if not occupied.size:
        return errors
    owners = np.full(len(estimates), -1, dtype=np.int64)
    if len(estimates):
        pos = np.minimum(np.searchsorted(occupied, estimates.indices), occupied.size - 1)
        hit = occupied[pos] == estimates.indices
        owners = np.where(hit, truth.voxel_body[pos], -1)
    seen = set(truth.voxel_body[truth.visible].tolist())
    for b, body in enumerate(scene.bodies):
        if body.background or body.motion.peak_speed == 0.0:
            continue
        mine = owners == b
        if np.any(mine):
            mean = estimates.velocities[mine].mean(axis=0)
        elif b in seen:
            mean = np.zeros(3)
        else:
            continue
        errors.append(float(np.sum((mean - truth.body_velocities[b]) ** 2)))
    return errors


def run_mapping_benchmark(config: ScenarioConfig, seed: int, output_dir: Optional[str] = None,
                          dump_frames: bool = False, progress: Optional[ProgressCallback] = None) -> RunMetrics:
    """Runs the map alone over the scenario duration and scores it against ground truth."""
    scene = config.build_scene()
    robot = config.build_robot()
    q = np.asarray(config.robot.start, dtype=float) if config.robot else None
    params = config.map
    frames = int(round(config.duration / params.dt))
    scores: List[_FrameScore] = []
    velocity_errors: List[float] = []
    timing: Dict[str, List[float]] = {stage: [] for stage in MAP_STAGES}
    cameras = config.build_cameras(robot, q)
    with DynamicParticleMap(params, cameras, seed, robot) as dpm:
        for frame in range(frames):
            t = frame * params.dt
            snapshot = scene.at(t)
            cameras, clouds = render_frame(config, snapshot, seed, frame, robot, q)
            step = dpm.map_step(clouds, q, cameras)
            for stage in MAP_STAGES:
                timing[stage].append(step.timing[stage])
            truth = ground_truth_voxels(snapshot, params.extents, cameras, robot, q)
            if t >= config.evaluation.score_after:
                scores.append(_score_frame(step.estimates, truth.occupied, truth.visible))
            if t >= config.evaluation.velocity_warmup:
                velocity_errors += _velocity_errors(step.estimates, snapshot, truth)
            if dump_frames and output_dir:
                _dump_frame(output_dir, frame, step.estimates, cameras, clouds)
            if progress:
                progress(1)
    auc, best_f1, false_positives = occupancy_scores(scores, params.occupancy_threshold,
                                                     config.evaluation.thresholds)
    metrics = RunMetrics(seed, outcome="mapped", steps=frames, auc=auc, best_f1=best_f1,
                         false_positives=false_positives)
    metrics.success = True
    if velocity_errors:
        metrics.velocity_rmse = float(np.sqrt(np.mean(velocity_errors)))
    metrics.map_step_ms = {stage: float(np.mean(values)) if values else 0.0 for stage, values in timing.items()}
    logger.info("seed %d: AUC %.3f, best F1 %.3f, velocity RMSE %.3f", seed, auc, best_f1, metrics.velocity_rmse)
    return metrics


def run_planning_episode(config: ScenarioConfig, seed: int, baseline: Optional[bool] = None,
                         output_dir: Optional[str] = None, dump_frames: bool = False) -> RunMetrics:
    """Closed loop: render and map at the map rate, plan at the control rate, track perfectly.

    Ends on reaching the goal tolerance, on the timeout, or when the robot penetrates any scene shape.
    """
    if config.robot is None:
        raise ConfigError(f"scenario '{config.name}' has no robot section")
    scene = config.build_scene()
    robot = config.build_robot()
    params = config.planner
    if baseline is not None:
        params = params.model_copy(update={"baseline": baseline})
    goal = np.asarray(config.robot.goal, dtype=float)
    state = JointState.at_rest(config.robot.start)
    planner = DStormPlanner(robot, params, goal, seed)
    tau = params.control_interval
    per_map = config.control_steps_per_map_step
    max_steps = int(np.ceil(config.termination.timeout / tau - 1e-9))
    metrics = RunMetrics(seed, outcome="timeout")
    map_ms: Dict[str, List[float]] = {stage: [] for stage in MAP_STAGES}
    cameras = config.build_cameras(robot, state.q)
    started = time.perf_counter()
    with DynamicParticleMap(config.map, cameras, seed, robot) as dpm:
        for i in range(max_steps):
            t = i * tau
            if i % per_map == 0:
                frame = i // per_map
                snapshot = scene.at(t)
                cameras, clouds = render_frame(config, snapshot, seed, frame, robot, state.q)
                step = dpm.map_step(clouds, state.q, cameras)
                planner.observe(step.estimates, t)
                for stage in MAP_STAGES:
                    map_ms[stage].append(step.timing[stage])
                if dump_frames and output_dir:
                    _dump_frame(output_dir, frame, step.estimates, cameras, clouds)
            result = planner.step(state, t)
            metrics.diagnostics.append(result.diagnostics_row(t))
            metrics.path_length += float(np.linalg.norm(result.q_desired - state.q))
            state = JointState(result.q_desired, result.qdot_desired, result.u0.copy())
            metrics.steps = i + 1
            t_next = (i + 1) * tau
            if robot_scene_clearance(robot, state.q, scene.at(t_next)) < 0.0:
                metrics.outcome = "collision"
                metrics.execution_time = t_next
                break
            if np.linalg.norm(state.q - goal) <= config.termination.goal_tolerance:
                metrics.outcome = "goal"
                metrics.success = True
                metrics.execution_time = t_next
                break
    elapsed = time.perf_counter() - started
    if metrics.outcome == "timeout":
        metrics.execution_time = metrics.steps * tau
    metrics.control_rate_hz = metrics.steps / elapsed if elapsed > 0 else float('nan')
    metrics.map_step_ms = {stage: float(np.mean(v)) if v else 0.0 for stage, v in map_ms.items()}
    if output_dir:
        write_csv(os.path.join(output_dir, "diagnostics.csv"), diagnostics_header(robot.dof), metrics.diagnostics)
    logger.info("seed %d: %s after %.2f s, path length %.3f rad", seed, metrics.outcome,
                metrics.execution_time, metrics.path_length)
    return metrics


@dataclass
class SuiteReport:
    name: str
    mode: str
    episodes: List[RunMetrics]

    def summary(self) -> Dict[str, object]:
        ordered = sorted(self.episodes, key=lambda m: m.seed)
        successes = [m for m in ordered if m.success]
        # execution time and path length fall back to every episode when none succeeded
        basis = successes or ordered

        def mean(values):
            values = [v for v in values if not np.isnan(v)]
            return float(np.mean(values)) if values else float('nan')

        return {
            "scenario": self.name,
            "mode": self.mode,
            "episodes": len(ordered),
            "seeds": [m.seed for m in ordered],
            "success_rate": len(successes) / len(ordered) if ordered else float('nan'),
            "collisions": sum(1 for m in ordered if m.outcome == "collision"),
            "timeouts": sum(1 for m in ordered if m.outcome == "timeout"),
            "mean_execution_time": mean([m.execution_time for m in basis]),
            "mean_path_length": mean([m.path_length for m in basis]),
            "execution_basis": "successes" if successes else "all",
            "mean_velocity_rmse": mean([m.velocity_rmse for m in ordered]),
            "mean_auc": mean([m.auc for m in ordered]),
            "mean_best_f1": mean([m.best_f1 for m in ordered]),
            "false_positives": sum(m.false_positives for m in ordered),
        }

    def timing(self) -> Dict[str, object]:
        ordered = sorted(self.episodes, key=lambda m: m.seed)
        return {
            "control_rate_hz": {str(m.seed): m.control_rate_hz for m in ordered},
            "map_step_ms": {str(m.seed): m.map_step_ms for m in ordered},
        }

    def write(self, output_dir: str) -> None:
        ordered = sorted(self.episodes, key=lambda m: m.seed)
        write_json(os.path.join(output_dir, "summary.json"), self.summary())
        write_csv(os.path.join(output_dir, "episodes.csv"), EPISODE_FIELDS, (m.row() for m in ordered))
        write_json(os.path.join(output_dir, "timing.json"), self.timing())


def run_suite(config: ScenarioConfig, seeds: Sequence[int], mode: str = "plan", baseline: Optional[bool] = None,
              output_dir: Optional[str] = None, progress: Optional[ProgressCallback] = None) -> SuiteReport:
    """Runs one episode per seed ("plan" closed loop or "map" benchmark) and aggregates them."""
    episodes = []
    for seed in seeds:
        if mode == "map":
            metrics = run_mapping_benchmark(config, seed)
        else:
            metrics = run_planning_episode(config, seed, baseline)
        episodes.append(metrics)
        if progress:
            progress(1)
    label = mode if mode == "map" else ("baseline" if (baseline if baseline is not None
                                                       else config.planner.baseline) else "dynamic")
    report = SuiteReport(config.name, label, episodes)
    if output_dir:
        report.write(output_dir)
    return report
