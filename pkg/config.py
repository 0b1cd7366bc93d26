# config.py
"""
Scenario schema. A scenario file is YAML; every section is validated by a pydantic
model and unknown keys are rejected.
"""
import math
import logging
from typing import List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from dstorm import PlannerParams
from gdsp import MapParams
from geometry import CameraModel, RigidTransform
from robot import ROBOT_MODELS, RobotModel, forward_kinematics, load_robot
from sensor import Box, Motion, ObstacleBody, Scene, Sphere
from utils import ConfigError, get_config_value, load_config as load_yaml

logger = logging.getLogger(__name__)

Vec3 = Tuple[float, float, float]

__all__ = ["ScenarioConfig", "load_config", "get_config_value"]


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SegmentConfig(_Section):
    duration: float = Field(gt=0)
    velocity: Vec3


class MotionConfig(_Section):
    kind: Literal["static", "sinusoidal", "conveyor"] = "static"
    p0: Vec3 = (0.0, 0.0, 0.0)
    delta_p: Vec3 = (0.0, 0.0, 0.0)
    period: float = Field(1.0, gt=0)
    segments: List[SegmentConfig] = []

    def build(self) -> Motion:
        return Motion(self.kind, np.array(self.p0), np.array(self.delta_p), self.period,
                      tuple((s.duration, np.array(s.velocity)) for s in self.segments))


class ShapeConfig(_Section):
    type: Literal["sphere", "box"]
    center: Vec3 = (0.0, 0.0, 0.0)
    radius: Optional[float] = Field(None, gt=0)
    half_extents: Optional[Vec3] = None

    @model_validator(mode="after")
    def _check_size(self):
        if self.type == "sphere" and self.radius is None:
            raise ValueError("sphere needs a radius")
        if self.type == "box" and (self.half_extents is None or min(self.half_extents) <= 0):
            raise ValueError("box needs positive half_extents")
        return self

    def build(self):
        if self.type == "sphere":
            return Sphere(np.array(self.center), self.radius)
        return Box(np.array(self.center), np.array(self.half_extents))


class BodyConfig(_Section):
    name: str
    shapes: List[ShapeConfig] = Field(min_length=1)
    motion: MotionConfig = MotionConfig()
    background: bool = False

    def build(self) -> ObstacleBody:
        return ObstacleBody(self.name, tuple(s.build() for s in self.shapes), self.motion.build(), self.background)


class SceneConfig(_Section):
    bodies: List[BodyConfig] = []


class CameraConfig(_Section):
    name: str = "camera"
    mount: Literal["world", "end_effector"] = "world"
    position: Vec3
    look_at: Vec3
    up: Vec3 = (0.0, 0.0, 1.0)
    fov_h_deg: float = Field(58.0, gt=0, lt=180)
    fov_v_deg: float = Field(45.0, gt=0, lt=180)
    resolution_deg: float = Field(2.0, gt=0)
    max_range: float = Field(4.0, gt=0)
    rows: int = Field(120, ge=1)
    cols: int = Field(160, ge=1)
    noise_std: float = Field(0.005, ge=0)

    @property
    def mount_pose(self) -> RigidTransform:
        return RigidTransform.look_at(self.position, self.look_at, self.up)

    def build(self, robot: Optional[RobotModel] = None, q: Optional[np.ndarray] = None) -> CameraModel:
        pose = self.mount_pose
        if self.mount == "end_effector":
            pose = forward_kinematics(robot, q).end_effector @ pose
        return CameraModel(pose, math.radians(self.fov_h_deg), math.radians(self.fov_v_deg),
                           math.radians(self.resolution_deg), self.max_range, self.rows, self.cols, self.name)


class RobotConfig(_Section):
    model: str = "planar3"
    start: List[float]
    goal: List[float]
    base_position: Vec3 = (0.0, 0.0, 0.0)
    base_rpy: Vec3 = (0.0, 0.0, 0.0)

    @model_validator(mode="after")
    def _check_model(self):
        if self.model not in ROBOT_MODELS:
            raise ValueError(f"unknown robot model '{self.model}' (known: {sorted(ROBOT_MODELS)})")
        dof = load_robot(self.model).dof
        if len(self.start) != dof or len(self.goal) != dof:
            raise ValueError(f"{self.model} start/goal need {dof} joint values")
        return self

    def build(self) -> RobotModel:
        return load_robot(self.model).with_base(RigidTransform.from_xyz_rpy(self.base_position, self.base_rpy))


class TerminationConfig(_Section):
    goal_tolerance: float = Field(0.05, gt=0)
    timeout: float = Field(20.0, gt=0)


class RatesConfig(_Section):
    map_hz: float = Field(10.0, gt=0)
    control_hz: float = Field(50.0, gt=0)


class EvaluationConfig(_Section):
    score_after: float = Field(1.0, ge=0)
    velocity_warmup: float = Field(1.0, ge=0)
    thresholds: int = Field(50, ge=2)


class ScenarioConfig(_Section):
    name: str
    seeds: List[int] = Field(min_length=1)
    episodes: Optional[int] = Field(None, ge=1)
    duration: float = Field(10.0, gt=0)
    map: MapParams = MapParams()
    cameras: List[CameraConfig] = Field(min_length=1, max_length=2)
    scene: SceneConfig = SceneConfig()
    robot: Optional[RobotConfig] = None
    planner: PlannerParams = PlannerParams()
    termination: TerminationConfig = TerminationConfig()
    rates: RatesConfig = RatesConfig()
    evaluation: EvaluationConfig = EvaluationConfig()

    @model_validator(mode="after")
    def _check_consistency(self):
        if self.episodes is not None and self.episodes > len(self.seeds):
            raise ValueError(f"{self.episodes} episodes requested but only {len(self.seeds)} seeds listed")
        if abs(self.map.dt * self.rates.map_hz - 1.0) > 1e-9:
            raise ValueError("map.dt must equal 1 / rates.map_hz")
        if abs(self.planner.control_interval * self.rates.control_hz - 1.0) > 1e-9:
            raise ValueError("planner.control_interval must equal 1 / rates.control_hz")
        ratio = self.rates.control_hz / self.rates.map_hz
        if abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("control rate must be an integer multiple of the map rate")
        if any(cam.mount == "end_effector" for cam in self.cameras) and self.robot is None:
            raise ValueError("an end-effector camera needs a robot section")
        extents = self.map.extents
        for body in self.scene.bodies:
            if body.background:
                continue
            lo, hi = body.build().bounds_over_period()
            if np.any(lo < extents.origin - 1e-9) or np.any(hi > extents.upper + 1e-9):
                raise ValueError(f"body '{body.name}' leaves the map extents during its motion")
        return self

    @property
    def control_steps_per_map_step(self) -> int:
        return int(round(self.rates.control_hz / self.rates.map_hz))

    def seed_list(self, override: Optional[int] = None) -> List[int]:
        if override is not None:
            return [override]
        count = self.episodes or len(self.seeds)
        return list(self.seeds[:count])

    def build_scene(self) -> Scene:
        return Scene(tuple(body.build() for body in self.scene.bodies))

    def build_robot(self) -> Optional[RobotModel]:
        return self.robot.build() if self.robot else None

    def build_cameras(self, robot: Optional[RobotModel] = None,
                      q: Optional[Sequence[float]] = None) -> List[CameraModel]:
        q = None if q is None else np.asarray(q, dtype=float)
        return [cam.build(robot, q) for cam in self.cameras]


def load_config(config_path: str) -> ScenarioConfig:
    """Loads and validates a scenario file.

    Raises:
        ConfigError: If the file is missing, is not valid YAML, or fails validation.
    """
    raw = load_yaml(config_path)
    try:
        config = ScenarioConfig.model_validate(raw)
    except ValidationError as e:
        name = get_config_value(raw, "name", "<unnamed>")
        model = get_config_value(raw, "robot.model", "none")
        raise ConfigError(f"{config_path} (scenario '{name}', robot '{model}'): {e}") from e
    logger.info("Loaded scenario '%s' (%d seeds) from %s", config.name, len(config.seeds), config_path)
    return config
