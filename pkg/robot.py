# robot.py
"""
Serial-manipulator kinematics and an analytic capsule collision model.

Every query has a batched form working on an (N, d) array of configurations; the
single-configuration functions are thin wrappers over the batched kernels so the
planner and the map share one implementation.
"""
import math
import logging
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from geometry import RigidTransform
from utils import ParameterError, as_vector

logger = logging.getLogger(__name__)

BASE_LINK = -1
PLANAR_ROWS = (0, 1, 5)


@dataclass(frozen=True, eq=False)
class JointSpec:
    """A revolute joint: fixed offset from the previous frame, then rotation about `axis`."""
    name: str
    axis: np.ndarray
    origin: RigidTransform = field(default_factory=RigidTransform)

    def __post_init__(self):
        axis = np.asarray(self.axis, dtype=float).reshape(3)
        object.__setattr__(self, 'axis', axis / np.linalg.norm(axis))


@dataclass(frozen=True, eq=False)
class CapsuleBody:
    """A capsule rigidly attached to a link frame (BASE_LINK for the fixed base)."""
    link: int
    start: np.ndarray
    end: np.ndarray
    radius: float

    def __post_init__(self):
        if self.radius <= 0:
            raise ParameterError("capsule radius must be positive")
        object.__setattr__(self, 'start', np.asarray(self.start, dtype=float).reshape(3))
        object.__setattr__(self, 'end', np.asarray(self.end, dtype=float).reshape(3))


@dataclass(frozen=True, eq=False)
class RobotModel:
    name: str
    joints: Tuple[JointSpec, ...]
    q_min: np.ndarray
    q_max: np.ndarray
    capsules: Tuple[CapsuleBody, ...]
    self_collision_pairs: Tuple[Tuple[int, int], ...] = ()
    tool: RigidTransform = field(default_factory=RigidTransform)
    base: RigidTransform = field(default_factory=RigidTransform)
    planar: bool = False

    def __post_init__(self):
        d = len(self.joints)
        q_min = as_vector(self.q_min, d, "q_min")
        q_max = as_vector(self.q_max, d, "q_max")
        if np.any(q_min >= q_max):
            raise ParameterError("joint limits must satisfy q_min < q_max")
        for i, j in self.self_collision_pairs:
            if abs(i - j) <= 1:
                raise ParameterError(f"self-collision pair ({i}, {j}) joins adjacent links")
        object.__setattr__(self, 'q_min', q_min)
        object.__setattr__(self, 'q_max', q_max)

    @property
    def dof(self) -> int:
        return len(self.joints)

    def with_base(self, base: RigidTransform) -> "RobotModel":
        return RobotModel(self.name, self.joints, self.q_min, self.q_max, self.capsules,
                          self.self_collision_pairs, self.tool, base, self.planar)

    @property
    def capsule_links(self) -> np.ndarray:
        return np.array([c.link for c in self.capsules], dtype=np.int64)

    @property
    def capsule_radii(self) -> np.ndarray:
        return np.array([c.radius for c in self.capsules])


@dataclass
class JointState:
    q: np.ndarray
    qdot: np.ndarray
    qddot: np.ndarray

    @classmethod
    def at_rest(cls, q: Sequence[float]) -> "JointState":
        q = np.asarray(q, dtype=float)
        return cls(q.copy(), np.zeros_like(q), np.zeros_like(q))


@dataclass
class FKResult:
    links: List[RigidTransform]
    end_effector: RigidTransform


def _as_batch(model: RobotModel, q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    batch = q.reshape(-1, q.shape[-1]) if q.ndim > 0 else q.reshape(1, 1)
    if batch.shape[-1] != model.dof:
        raise ParameterError(f"{model.name} expects {model.dof} joint values, got {batch.shape[-1]}")
    return batch


def _skew(v: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def link_frames_batch(model: RobotModel, q: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Homogeneous link frames (N, d, 4, 4) and end-effector frames (N, 4, 4)."""
    batch = _as_batch(model, q)
    n = batch.shape[0]
    current = np.broadcast_to(model.base.as_matrix(), (n, 4, 4)).copy()
    frames = np.empty((n, model.dof, 4, 4))
    rot = np.zeros((n, 4, 4))
    rot[:, 3, 3] = 1.0
    for i, joint in enumerate(model.joints):
        k = _skew(joint.axis)
        s = np.sin(batch[:, i])[:, None, None]
        c = np.cos(batch[:, i])[:, None, None]
        rot[:, :3, :3] = np.eye(3) + s * k + (1.0 - c) * (k @ k)
        current = current @ joint.origin.as_matrix() @ rot
        frames[:, i] = current
    return frames, current @ model.tool.as_matrix()


def forward_kinematics(model: RobotModel, q: np.ndarray) -> FKResult:
    """Per-link world transforms and the end-effector pose for one configuration.

    Raises:
        ParameterError: If q does not have one entry per joint.
    """
    q = np.asarray(q, dtype=float)
    if q.shape != (model.dof,):
        raise ParameterError(f"{model.name} expects {model.dof} joint values, got shape {q.shape}")
    frames, ee = link_frames_batch(model, q[None])
    return FKResult([RigidTransform.from_matrix(f) for f in frames[0]], RigidTransform.from_matrix(ee[0]))


def jacobian_batch(model: RobotModel, q: np.ndarray) -> np.ndarray:
    """Geometric end-effector Jacobians (N, 6, d): linear rows first, then angular."""
    frames, ee = link_frames_batch(model, q)
    axes = np.stack([frames[:, i, :3, :3] @ joint.axis for i, joint in enumerate(model.joints)], axis=1)
    origins = frames[:, :, :3, 3]
    linear = np.cross(axes, ee[:, None, :3, 3] - origins)
    return np.concatenate([linear, axes], axis=2).transpose(0, 2, 1)


def jacobian(model: RobotModel, q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if q.shape != (model.dof,):
        raise ParameterError(f"{model.name} expects {model.dof} joint values, got shape {q.shape}")
    return jacobian_batch(model, q[None])[0]


def manipulability_batch(model: RobotModel, q: np.ndarray) -> np.ndarray:
    jac = jacobian_batch(model, q)
    if model.planar:
        jac = jac[:, PLANAR_ROWS, :]
    det = np.linalg.det(jac @ jac.transpose(0, 2, 1))
    return np.sqrt(np.clip(det, 0.0, None))


def manipulability(model: RobotModel, q: np.ndarray) -> float:
    """sqrt(det(J Jᵀ)); planar models use the (vx, vy, wz) rows only."""
    q = np.asarray(q, dtype=float)
    if q.shape != (model.dof,):
        raise ParameterError(f"{model.name} expects {model.dof} joint values, got shape {q.shape}")
    return float(manipulability_batch(model, q[None])[0])


def capsule_segments_batch(model: RobotModel, q: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """World endpoints of every capsule axis: two (N, C, 3) arrays."""
    frames, _ = link_frames_batch(model, q)
    n = frames.shape[0]
    base = np.broadcast_to(model.base.as_matrix(), (n, 1, 4, 4))
    extended = np.concatenate([base, frames], axis=1)
    chosen = extended[:, model.capsule_links + 1]
    starts = np.stack([c.start for c in model.capsules])
    ends = np.stack([c.end for c in model.capsules])
    rot = chosen[:, :, :3, :3]
    trans = chosen[:, :, :3, 3]
    return (np.einsum('ncij,cj->nci', rot, starts) + trans,
            np.einsum('ncij,cj->nci', rot, ends) + trans)


def point_segment_distance(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distance from points to segments [a, b]; all arguments broadcast over leading axes."""
    ab = b - a
    denom = np.sum(ab * ab, axis=-1)
    safe = np.where(denom > 0.0, denom, 1.0)
    t = np.where(denom > 0.0, np.clip(np.sum((points - a) * ab, axis=-1) / safe, 0.0, 1.0), 0.0)
    closest = a + t[..., None] * ab
    return np.linalg.norm(points - closest, axis=-1)


def segment_segment_distance(p1: np.ndarray, q1: np.ndarray, p2: np.ndarray, q2: np.ndarray) -> np.ndarray:
    """Closest distance between segments [p1, q1] and [p2, q2] (broadcast over leading axes)."""
    eps = 1e-14
    d1 = q1 - p1
    d2 = q2 - p2
    r = p1 - p2
    a = np.sum(d1 * d1, axis=-1)
    e = np.sum(d2 * d2, axis=-1)
    f = np.sum(d2 * r, axis=-1)
    c = np.sum(d1 * r, axis=-1)
    b = np.sum(d1 * d2, axis=-1)
    a_ok = a > eps
    e_ok = e > eps
    a_safe = np.where(a_ok, a, 1.0)
    e_safe = np.where(e_ok, e, 1.0)
    denom = a * e - b * b
    denom_safe = np.where(denom > eps, denom, 1.0)

    s = np.where(denom > eps, np.clip((b * f - c * e) / denom_safe, 0.0, 1.0), 0.0)
    t = (b * s + f) / e_safe
    s = np.where(t < 0.0, np.clip(-c / a_safe, 0.0, 1.0), s)
    s = np.where(t > 1.0, np.clip((b - c) / a_safe, 0.0, 1.0), s)
    t = np.clip(t, 0.0, 1.0)

    # first segment degenerate: closest point on the second one to p1
    s = np.where(a_ok, s, 0.0)
    t = np.where(a_ok, t, np.clip(f / e_safe, 0.0, 1.0))
    # second segment degenerate
    s = np.where(e_ok | ~a_ok, s, np.clip(-c / a_safe, 0.0, 1.0))
    t = np.where(e_ok, t, 0.0)

    c1 = p1 + s[..., None] * d1
    c2 = p2 + t[..., None] * d2
    return np.linalg.norm(c1 - c2, axis=-1)


def min_distance_batch(model: RobotModel, q: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Signed robot distance of M points per configuration.

    Args:
        q: (N, d) configurations.
        points: (N, M, 3) points, or (M, 3) shared by all configurations.

    Returns:
        (N, M) minimum signed point-to-capsule distance (negative inside).
    """
    starts, ends = capsule_segments_batch(model, q)
    points = np.asarray(points, dtype=float)
    if points.ndim == 2:
        points = np.broadcast_to(points, (starts.shape[0],) + points.shape)
    if points.shape[1] == 0:
        return np.zeros((starts.shape[0], 0))
    dist = point_segment_distance(points[:, :, None, :], starts[:, None], ends[:, None])
    return np.min(dist - model.capsule_radii, axis=2)


def min_dist_to_robot(model: RobotModel, q: np.ndarray, p: np.ndarray):
    """Signed distance from a point (or (M, 3) points) to the robot surface at configuration q."""
    pts = np.asarray(p, dtype=float)
    single = pts.ndim == 1
    result = min_distance_batch(model, np.asarray(q, dtype=float)[None], pts.reshape(-1, 3))[0]
    return float(result[0]) if single else result


def self_collision_distance_batch(model: RobotModel, q: np.ndarray) -> np.ndarray:
    """Minimum signed capsule-capsule distance over the self-collision pairs, per configuration."""
    starts, ends = capsule_segments_batch(model, q)
    links = model.capsule_links
    radii = model.capsule_radii
    first, second = [], []
    for i, j in model.self_collision_pairs:
        for ci in np.flatnonzero(links == i):
            for cj in np.flatnonzero(links == j):
                first.append(ci)
                second.append(cj)
    if not first:
        return np.full(starts.shape[0], np.inf)
    first = np.array(first)
    second = np.array(second)
    dist = segment_segment_distance(starts[:, first], ends[:, first], starts[:, second], ends[:, second])
    return np.min(dist - radii[first] - radii[second], axis=1)


def self_collision_distance(model: RobotModel, q: np.ndarray) -> float:
    q = np.asarray(q, dtype=float)
    if q.shape != (model.dof,):
        raise ParameterError(f"{model.name} expects {model.dof} joint values, got shape {q.shape}")
    return float(self_collision_distance_batch(model, q[None])[0])


def planar_3dof(lengths: Sequence[float] = (0.35, 0.3, 0.25), radius: float = 0.03) -> RobotModel:
    """Three revolute joints about z, links along x, moving in the z = 0 plane."""
    l1, l2, l3 = lengths
    z_axis = np.array([0.0, 0.0, 1.0])
    joints = (
        JointSpec("joint1", z_axis),
        JointSpec("joint2", z_axis, RigidTransform.from_xyz_rpy((l1, 0.0, 0.0))),
        JointSpec("joint3", z_axis, RigidTransform.from_xyz_rpy((l2, 0.0, 0.0))),
    )
    capsules = tuple(CapsuleBody(i, (0.0, 0.0, 0.0), (length, 0.0, 0.0), radius)
                     for i, length in enumerate(lengths))
    return RobotModel(
        name="planar3",
        joints=joints,
        q_min=np.array([-math.pi, -2.8, -2.8]),
        q_max=np.array([math.pi, 2.8, 2.8]),
        capsules=capsules,
        self_collision_pairs=((0, 2),),
        tool=RigidTransform.from_xyz_rpy((l3, 0.0, 0.0)),
        planar=True,
    )


def ur5() -> RobotModel:
    """A UR5-like six-axis arm (standard URDF joint offsets) with a capsule hull."""
    y_axis = np.array([0.0, 1.0, 0.0])
    z_axis = np.array([0.0, 0.0, 1.0])
    half_pi = 0.5 * math.pi
    joints = (
        JointSpec("shoulder_pan", z_axis, RigidTransform.from_xyz_rpy((0.0, 0.0, 0.089159))),
        JointSpec("shoulder_lift", y_axis, RigidTransform.from_xyz_rpy((0.0, 0.13585, 0.0), (0.0, half_pi, 0.0))),
        JointSpec("elbow", y_axis, RigidTransform.from_xyz_rpy((0.0, -0.1197, 0.425))),
        JointSpec("wrist1", y_axis, RigidTransform.from_xyz_rpy((0.0, 0.0, 0.39225), (0.0, half_pi, 0.0))),
        JointSpec("wrist2", z_axis, RigidTransform.from_xyz_rpy((0.0, 0.093, 0.0))),
        JointSpec("wrist3", y_axis, RigidTransform.from_xyz_rpy((0.0, 0.0, 0.09465))),
    )
    capsules = (
        CapsuleBody(BASE_LINK, (0.0, 0.0, 0.0), (0.0, 0.0, 0.089159), 0.06),
        CapsuleBody(0, (0.0, 0.0, 0.0), (0.0, 0.13585, 0.0), 0.06),
        CapsuleBody(1, (0.0, -0.06, 0.0), (0.0, -0.06, 0.425), 0.06),
        CapsuleBody(2, (0.0, 0.0, 0.0), (0.0, 0.0, 0.39225), 0.05),
        CapsuleBody(3, (0.0, 0.0, 0.0), (0.0, 0.093, 0.0), 0.04),
        CapsuleBody(4, (0.0, 0.0, 0.0), (0.0, 0.0, 0.09465), 0.04),
        CapsuleBody(5, (0.0, 0.0, 0.0), (0.0, 0.0823, 0.0), 0.04),
    )
    limits = np.array([2 * math.pi, 2 * math.pi, math.pi, 2 * math.pi, 2 * math.pi, 2 * math.pi])
    return RobotModel(
        name="ur5",
        joints=joints,
        q_min=-limits,
        q_max=limits,
        capsules=capsules,
        self_collision_pairs=((BASE_LINK, 2), (BASE_LINK, 3), (BASE_LINK, 4), (BASE_LINK, 5),
                              (0, 3), (0, 4), (0, 5), (1, 4), (1, 5)),
        tool=RigidTransform.from_xyz_rpy((0.0, 0.0823, 0.0), (0.0, 0.0, half_pi)),
    )


ROBOT_MODELS = {
    "planar3": planar_3dof,
    "ur5": ur5,
}


def load_robot(name: str) -> RobotModel:
    """Builds one of the shipped robot models by name."""
    try:
        factory = ROBOT_MODELS[name]
    except KeyError:
        raise ParameterError(f"Unknown robot model '{name}'. Available: {sorted(ROBOT_MODELS)}") from None
    return factory()
