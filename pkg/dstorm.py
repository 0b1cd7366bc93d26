# dstorm.py
"""
Sampling-based receding-horizon planner with dynamic obstacles.

Each control step samples K perturbed joint-acceleration sequences around the nominal
sequence, rolls the robot and the nearest mapped obstacles forward over the horizon
(obstacles at constant velocity with growing position covariance), scores every rollout
and moves the nominal sequence and its sampling covariance towards the low-cost samples.
"""
import logging
from dataclasses import dataclass, field
from typing import List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.special import logsumexp

from gdsp import VoxelEstimates
from robot import (JointState, RobotModel, manipulability_batch, min_distance_batch,
                   self_collision_distance_batch)
from utils import ParameterError, as_vector, psd_sqrt, symmetrize_psd

logger = logging.getLogger(__name__)

DIAGNOSTICS_HEADER_PREFIX = ["t", "best_cost", "mean_cost", "min_cost", "min_clearance", "snapshot_age"]


class PlannerParams(BaseModel):
    """Sampling, cost and obstacle-model settings of the planner."""
    model_config = ConfigDict(extra="forbid")

    num_samples: int = Field(100, ge=1)
    horizon: int = Field(30, ge=1)
    dt_fine: float = Field(0.02, gt=0)
    dt_coarse: float = Field(0.06, gt=0)
    fine_steps: int = Field(5, ge=0)
    dt: Optional[List[float]] = None
    init_cov: float = Field(0.25, ge=0)
    temperature: float = Field(0.05, gt=0)
    step_mean: float = Field(0.98, ge=0, le=1)
    step_cov: float = Field(0.2, ge=0, le=1)
    discount: float = Field(0.98, gt=0, le=1)
    control_cost: float = Field(1e-4, ge=0)
    w_goal: float = Field(25.0, ge=0)
    w_collision: float = Field(100.0, ge=0)
    w_limits: float = Field(50.0, ge=0)
    w_manipulability: float = Field(1.0, ge=0)
    confidence: float = Field(2.5, gt=0)
    safety_margin: float = Field(0.01, ge=0)
    softmax_sharpness: float = Field(25.0, gt=0)
    manipulability_threshold: float = Field(0.05, gt=0)
    max_obstacles: int = Field(20, ge=0)
    process_noise: float = Field(0.0, ge=0)
    control_interval: float = Field(0.02, gt=0)
    covariance_floor: float = Field(1e-8, gt=0)
    joint_limit_margin: float = Field(0.0, ge=0)
    radius_mode: Literal["ellipsoid", "fixed"] = "ellipsoid"
    collision_mode: Literal["softmax", "max"] = "softmax"
    baseline: bool = False

    @model_validator(mode="after")
    def _check_schedule(self):
        if self.dt is not None:
            if len(self.dt) != self.horizon:
                raise ValueError(f"dt has {len(self.dt)} entries for horizon {self.horizon}")
            if any(step <= 0 for step in self.dt):
                raise ValueError("dt entries must be positive")
        return self

    @property
    def dt_schedule(self) -> np.ndarray:
        if self.dt is not None:
            return np.asarray(self.dt, dtype=float)
        steps = np.full(self.horizon, self.dt_coarse)
        steps[:min(self.fine_steps, self.horizon)] = self.dt_fine
        return steps


@dataclass
class RolloutBatch:
    q: np.ndarray
    qdot: np.ndarray
    qddot: np.ndarray
    perturbations: np.ndarray
    costs: Optional[np.ndarray] = None
    weights: Optional[np.ndarray] = None


@dataclass
class ObstaclePrediction:
    positions: np.ndarray
    velocities: np.ndarray
    covariances: np.ndarray
    radii: np.ndarray
    voxel_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def count(self) -> int:
        return self.positions.shape[0]

    @classmethod
    def empty(cls, horizon: int) -> "ObstaclePrediction":
        return cls(np.zeros((0, horizon, 3)), np.zeros((0, 3)), np.zeros((0, horizon, 3, 3)), np.zeros((0, horizon)))


def sample_controls(U: np.ndarray, cov: np.ndarray, K: int,
                    rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Draws δU[k, h] ~ N(0, cov) for every sample and step; sample 0 is the unperturbed U."""
    chol = psd_sqrt(cov, "control covariance")
    H, d = U.shape
    z = rng.standard_normal((K, H, d))
    perturbations = z @ chol.T
    perturbations[0] = 0.0
    return perturbations, U[None] + perturbations


def rollout_robot(q0: np.ndarray, qdot0: np.ndarray, V: np.ndarray,
                  dt: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Semi-implicit Euler over the horizon: velocities from the inclusive cumulative sum of
    dt·acceleration, positions from the inclusive cumulative sum of dt·velocity."""
    step = np.asarray(dt, dtype=float)[None, :, None]
    qdot = qdot0 + np.cumsum(step * V, axis=1)
    q = q0 + np.cumsum(step * qdot, axis=1)
    return q, qdot, V


def rollout_obstacles(X0: np.ndarray, V0: np.ndarray, dt: np.ndarray) -> np.ndarray:
    """Constant-velocity obstacle centers, shape (N, H, 3)."""
    elapsed = np.cumsum(dt)
    return X0[:, None, :] + elapsed[None, :, None] * V0[:, None, :]


def propagate_obstacle_covariance(cov_p0: np.ndarray, cov_v: np.ndarray, dt: np.ndarray,
                                  process_noise: float = 0.0) -> np.ndarray:
    """Closed-form position covariance Σ_p0 + T_h² Σ_v (+ h·Q) at every horizon step, shape (N, H, 3, 3)."""
    elapsed = np.cumsum(dt)
    cov = cov_p0[:, None] + (elapsed ** 2)[None, :, None, None] * cov_v[:, None]
    if process_noise > 0:
        steps = np.arange(1, elapsed.shape[0] + 1)
        cov = cov + (process_noise * steps)[None, :, None, None] * np.eye(3)
    return cov


def uncertainty_radius(cov_p: np.ndarray, confidence: float, voxel_size: float, margin: float) -> np.ndarray:
    """ν·sqrt(λ_max) clamped to [¾l + δr, 5⁄4 l + δr]."""
    lam = np.linalg.eigvalsh(cov_p)[..., -1]
    radius = confidence * np.sqrt(np.clip(lam, 0.0, None))
    return np.clip(radius, 0.75 * voxel_size + margin, 1.25 * voxel_size + margin)


def obstacle_distances(q: np.ndarray, X: np.ndarray, model: RobotModel) -> np.ndarray:
    """Signed robot distance to every obstacle center along the horizon, shape (K, H, N)."""
    K, H, d = q.shape
    N = X.shape[0]
    if N == 0:
        return np.zeros((K, H, 0))
    points = np.broadcast_to(X.transpose(1, 0, 2)[None], (K, H, N, 3)).reshape(K * H, N, 3)
    return min_distance_batch(model, q.reshape(K * H, d), points).reshape(K, H, N)


def collision_cost(q: np.ndarray, X: np.ndarray, radii: np.ndarray, model: RobotModel,
                   mode: str = "softmax", sharpness: float = 25.0) -> np.ndarray:
    """Hinge penetration max(0, r_o − dist) aggregated over obstacles, shape (K, H)."""
    K, H, _ = q.shape
    if X.shape[0] == 0:
        return np.zeros((K, H))
    hinge = np.maximum(0.0, radii.T[None] - obstacle_distances(q, X, model))
    if mode == "max":
        return hinge.max(axis=-1)
    if mode == "softmax":
        return logsumexp(sharpness * hinge, axis=-1) / sharpness
    raise ParameterError(f"unknown collision mode '{mode}'")


def self_collision_cost(model: RobotModel, q: np.ndarray) -> np.ndarray:
    """Penetration depth −min(0, dist) over the self-collision pairs."""
    q = np.asarray(q, dtype=float)
    dist = self_collision_distance_batch(model, q.reshape(-1, model.dof)).reshape(q.shape[:-1])
    return -np.minimum(0.0, dist)


def joint_limit_cost(q: np.ndarray, q_min: np.ndarray, q_max: np.ndarray, margin: float = 0.0) -> np.ndarray:
    """Norm of the violation of the limits shrunk by `margin`."""
    q = np.asarray(q, dtype=float)
    violation = np.maximum(q_min + margin - q, 0.0) + np.maximum(q - (q_max - margin), 0.0)
    return np.linalg.norm(violation, axis=-1)


def manipulability_cost(model: RobotModel, q: np.ndarray, threshold: float) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    m = manipulability_batch(model, q.reshape(-1, model.dof)).reshape(q.shape[:-1])
    return np.where(m < threshold, 1.0 - m / threshold, 0.0)


def goal_cost(goal: np.ndarray, q_terminal: np.ndarray) -> np.ndarray:
    return np.linalg.norm(np.asarray(q_terminal, dtype=float) - goal, axis=-1)


def total_cost(batch: RolloutBatch, prediction: ObstaclePrediction, params: PlannerParams, model: RobotModel,
               goal: np.ndarray, U: np.ndarray) -> np.ndarray:
    """Discounted sum of the stage costs plus the terminal goal cost, one value per rollout."""
    K, H, d = batch.q.shape
    stage = params.w_collision * (collision_cost(batch.q, prediction.positions, prediction.radii, model,
                                                 params.collision_mode, params.softmax_sharpness)
                                  + self_collision_cost(model, batch.q))
    stage = stage + params.w_limits * joint_limit_cost(batch.q, model.q_min, model.q_max, params.joint_limit_margin)
    stage = stage + params.w_manipulability * manipulability_cost(model, batch.q, params.manipulability_threshold)
    R = params.control_cost * np.eye(d)
    stage = stage + 0.5 * np.einsum('hi,ij,khj->kh', U, R, U[None] + 2.0 * batch.perturbations)
    stage[:, -1] += params.w_goal * goal_cost(goal, batch.q[:, -1])
    discount = params.discount ** np.arange(H)
    return stage @ discount


def trajectory_weights(costs: np.ndarray, temperature: float) -> np.ndarray:
    if temperature <= 0:
        raise ParameterError("temperature must be positive")
    costs = np.asarray(costs, dtype=float)
    weights = np.exp(-(costs - costs.min()) / temperature)
    return weights / weights.sum()


def update_control_and_covariance(U: np.ndarray, cov: np.ndarray, V: np.ndarray, weights: np.ndarray,
                                  step_mean: float, step_cov: float,
                                  floor: float = 1e-8) -> Tuple[np.ndarray, np.ndarray]:
    """Moves U towards the weighted sample mean and the covariance towards the weighted
    deviation scatter (outer products averaged over the horizon)."""
    U_new = (1.0 - step_mean) * U + step_mean * np.einsum('k,khd->hd', weights, V)
    deviation = V - U[None]
    scatter = np.einsum('k,khi,khj->ij', weights, deviation, deviation) / U.shape[0]
    cov_new = symmetrize_psd((1.0 - step_cov) * cov + step_cov * scatter, floor)
    return U_new, cov_new


def select_top_obstacles(estimates: VoxelEstimates, q: np.ndarray, model: RobotModel, cap: int) -> np.ndarray:
    """Positions in `estimates` of the `cap` voxels closest to the robot, ties by voxel index."""
    if len(estimates) == 0 or cap == 0:
        return np.zeros(0, dtype=np.int64)
    dist = min_distance_batch(model, np.asarray(q, dtype=float)[None], estimates.centers)[0]
    order = np.lexsort((estimates.indices, dist))
    return order[:cap]


def predict_obstacles(estimates: VoxelEstimates, chosen: np.ndarray, params: PlannerParams) -> ObstaclePrediction:
    """Horizon rollout of the chosen voxel estimates (static and certain in baseline mode)."""
    dt = params.dt_schedule
    if chosen.size == 0:
        return ObstaclePrediction.empty(dt.shape[0])
    X0 = estimates.centers[chosen]
    cov_p0 = estimates.cov_p[chosen]
    if params.baseline:
        V0 = np.zeros_like(X0)
        cov_v = np.zeros_like(cov_p0)
    else:
        V0 = estimates.velocities[chosen]
        cov_v = estimates.cov_v[chosen]
    positions = rollout_obstacles(X0, V0, dt)
    covariances = propagate_obstacle_covariance(cov_p0, cov_v, dt, params.process_noise)
    if params.radius_mode == "fixed":
        radii = np.full(positions.shape[:2], 0.5 * np.sqrt(3.0) * estimates.size + params.safety_margin)
    else:
        radii = uncertainty_radius(covariances, params.confidence, estimates.size, params.safety_margin)
    return ObstaclePrediction(positions, V0, covariances, radii, estimates.indices[chosen])


@dataclass
class ControlStepResult:
    q_desired: np.ndarray
    qdot_desired: np.ndarray
    control: np.ndarray
    updated: np.ndarray
    covariance: np.ndarray
    rollouts: RolloutBatch
    obstacles: ObstaclePrediction
    best_cost: float
    mean_cost: float
    min_cost: float
    min_clearance: float
    snapshot_age: float

    @property
    def u0(self) -> np.ndarray:
        return self.updated[0]

    def diagnostics_row(self, t: float) -> list:
        return ([t, self.best_cost, self.mean_cost, self.min_cost, self.min_clearance, self.snapshot_age]
                + self.q_desired.tolist() + self.qdot_desired.tolist() + self.u0.tolist())


def diagnostics_header(dof: int) -> List[str]:
    return (DIAGNOSTICS_HEADER_PREFIX + [f"q_d{i}" for i in range(dof)]
            + [f"qdot_d{i}" for i in range(dof)] + [f"u0_{i}" for i in range(dof)])


def control_step(state: JointState, estimates: VoxelEstimates, U: np.ndarray, cov: np.ndarray,
                 params: PlannerParams, rng: np.random.Generator, model: RobotModel, goal: np.ndarray,
                 snapshot_age: float = 0.0) -> ControlStepResult:
    """One planning iteration: sample, roll out, score, update, integrate u₀ over Δτ and shift."""
    dt = params.dt_schedule
    perturbations, V = sample_controls(U, cov, params.num_samples, rng)
    q, qdot, qddot = rollout_robot(state.q, state.qdot, V, dt)
    batch = RolloutBatch(q, qdot, qddot, perturbations)
    chosen = select_top_obstacles(estimates, state.q, model, params.max_obstacles)
    prediction = predict_obstacles(estimates, chosen, params)
    batch.costs = total_cost(batch, prediction, params, model, goal, U)
    batch.weights = trajectory_weights(batch.costs, params.temperature)
    updated, cov_new = update_control_and_covariance(U, cov, V, batch.weights, params.step_mean,
                                                     params.step_cov, params.covariance_floor)
    tau = params.control_interval
    qdot_desired = state.qdot + updated[0] * tau
    q_desired = state.q + qdot_desired * tau
    shifted = np.vstack([updated[1:], np.zeros((1, U.shape[1]))])
    if prediction.count:
        clearance = obstacle_distances(q[:1], prediction.positions, model)[0] - prediction.radii.T
        min_clearance = float(clearance.min())
    else:
        min_clearance = float('inf')
    return ControlStepResult(q_desired, qdot_desired, shifted, updated, cov_new, batch, prediction,
                             float(batch.weights @ batch.costs), float(batch.costs.mean()),
                             float(batch.costs.min()), min_clearance, snapshot_age)


class DStormPlanner:
    """Warm-started planner state (nominal sequence, covariance, latest map snapshot)."""

    def __init__(self, model: RobotModel, params: PlannerParams, goal, seed: int):
        self.model = model
        self.params = params
        self.goal = as_vector(goal, model.dof, "goal")
        self.rng = np.random.default_rng(seed)
        self.U = np.zeros((params.horizon, model.dof))
        self.cov = params.init_cov * np.eye(model.dof)
        self.snapshot = VoxelEstimates.empty(1.0)
        self.snapshot_time = 0.0

    def observe(self, estimates: VoxelEstimates, t: float) -> None:
        self.snapshot = estimates
        self.snapshot_time = t

    def step(self, state: JointState, t: float) -> ControlStepResult:
        age = t - self.snapshot_time
        result = control_step(state, self.snapshot, self.U, self.cov, self.params, self.rng,
                              self.model, self.goal, age)
        self.U = result.control
        self.cov = result.covariance
        return result
