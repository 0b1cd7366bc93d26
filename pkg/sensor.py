# sensor.py
"""
Synthetic depth sensing: scripted obstacle bodies, a ray-casting depth camera,
point-cloud preprocessing and the exact ground truth used by the benchmarks.
"""
import math
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from geometry import (CameraModel, MapExtents, PointCloud, pyramid_index, camera_distances)
from robot import RobotModel, capsule_segments_batch, min_dist_to_robot, point_segment_distance
from utils import ParameterError

logger = logging.getLogger(__name__)

RAY_EPS = 1e-9
GOLDEN = 0.5 * (math.sqrt(5.0) - 1.0)


@dataclass(frozen=True, eq=False)
class Sphere:
    center: np.ndarray
    radius: float

    def __post_init__(self):
        if self.radius <= 0:
            raise ParameterError("sphere radius must be positive")
        object.__setattr__(self, 'center', np.asarray(self.center, dtype=float).reshape(3))

    def translated(self, offset: np.ndarray) -> "Sphere":
        return Sphere(self.center + offset, self.radius)

    def bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.center - self.radius, self.center + self.radius

    def sdf(self, points: np.ndarray) -> np.ndarray:
        return np.linalg.norm(points - self.center, axis=-1) - self.radius

    def intersect(self, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        """Nearest positive hit distance along unit rays, inf on a miss."""
        oc = origin - self.center
        b = dirs @ oc if oc.ndim == 1 else np.sum(dirs * oc, axis=-1)
        c = np.sum(oc * oc, axis=-1) - self.radius ** 2
        disc = b * b - c
        root = np.sqrt(np.clip(disc, 0.0, None))
        near = -b - root
        far = -b + root
        t = np.where(near > RAY_EPS, near, np.where(far > RAY_EPS, far, np.inf))
        return np.where(disc >= 0.0, t, np.inf)


@dataclass(frozen=True, eq=False)
class Box:
    """Axis-aligned box given by its center and half extents."""
    center: np.ndarray
    half_extents: np.ndarray

    def __post_init__(self):
        half = np.asarray(self.half_extents, dtype=float).reshape(3)
        if np.any(half <= 0):
            raise ParameterError("box half extents must be positive")
        object.__setattr__(self, 'center', np.asarray(self.center, dtype=float).reshape(3))
        object.__setattr__(self, 'half_extents', half)

    def translated(self, offset: np.ndarray) -> "Box":
        return Box(self.center + offset, self.half_extents)

    def bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.center - self.half_extents, self.center + self.half_extents

    def sdf(self, points: np.ndarray) -> np.ndarray:
        q = np.abs(points - self.center) - self.half_extents
        outside = np.linalg.norm(np.clip(q, 0.0, None), axis=-1)
        inside = np.minimum(np.max(q, axis=-1), 0.0)
        return outside + inside

    def intersect(self, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        lo, hi = self.bounds()
        safe = np.where(np.abs(dirs) < 1e-15, 1e-15, dirs)
        t1 = (lo - origin) / safe
        t2 = (hi - origin) / safe
        t_near = np.max(np.minimum(t1, t2), axis=-1)
        t_far = np.min(np.maximum(t1, t2), axis=-1)
        hit = t_far >= np.maximum(t_near, 0.0)
        t = np.where(t_near > RAY_EPS, t_near, np.where(t_far > RAY_EPS, t_far, np.inf))
        return np.where(hit, t, np.inf)


Shape = Union[Sphere, Box]


def intersect_capsule(origin: np.ndarray, dirs: np.ndarray, a: np.ndarray, b: np.ndarray,
                      radius: float) -> np.ndarray:
    """Nearest positive hit of unit rays with the capsule [a, b] of given radius, inf on a miss."""
    ba = b - a
    oa = origin - a
    baba = ba @ ba
    bard = dirs @ ba
    baoa = oa @ ba
    rdoa = dirs @ oa
    oaoa = oa @ oa
    quad_a = baba - bard * bard
    quad_b = baba * rdoa - baoa * bard
    quad_c = baba * oaoa - baoa * baoa - radius * radius * baba
    h = quad_b * quad_b - quad_a * quad_c
    result = np.full(dirs.shape[0], np.inf)
    with np.errstate(divide='ignore', invalid='ignore'):
        t_body = (-quad_b - np.sqrt(np.clip(h, 0.0, None))) / quad_a
    y = baoa + t_body * bard
    body_hit = (h >= 0.0) & (quad_a > 1e-15) & (y > 0.0) & (y < baba) & (t_body > RAY_EPS)
    result = np.where(body_hit, t_body, result)
    for cap in (a, b):
        cap_t = Sphere(cap, radius).intersect(origin, dirs)
        result = np.where(~body_hit, np.minimum(result, cap_t), result)
    return result


@dataclass(frozen=True, eq=False)
class Motion:
    """Scripted body motion: static, sinusoidal p0 + δp sin(2πt/T), or piecewise-constant velocity."""
    kind: str = "static"
    p0: np.ndarray = field(default_factory=lambda: np.zeros(3))
    delta_p: np.ndarray = field(default_factory=lambda: np.zeros(3))
    period: float = 1.0
    segments: Tuple[Tuple[float, np.ndarray], ...] = ()

    def __post_init__(self):
        if self.kind not in ("static", "sinusoidal", "conveyor"):
            raise ParameterError(f"unknown motion kind '{self.kind}'")
        if self.period <= 0:
            raise ParameterError("motion period must be positive")
        if self.kind == "conveyor" and not self.segments:
            raise ParameterError("conveyor motion needs at least one segment")
        object.__setattr__(self, 'p0', np.asarray(self.p0, dtype=float).reshape(3))
        object.__setattr__(self, 'delta_p', np.asarray(self.delta_p, dtype=float).reshape(3))
        object.__setattr__(self, 'segments', tuple((float(d), np.asarray(v, dtype=float).reshape(3))
                                                   for d, v in self.segments))

    def position(self, t: float) -> np.ndarray:
        if self.kind == "sinusoidal":
            return self.p0 + self.delta_p * math.sin(2.0 * math.pi * t / self.period)
        if self.kind == "conveyor":
            position = self.p0.copy()
            elapsed = 0.0
            for i, (duration, velocity) in enumerate(self.segments):
                last = i == len(self.segments) - 1
                span = max(0.0, t - elapsed) if last else min(max(0.0, t - elapsed), duration)
                position = position + velocity * span
                elapsed += duration
            return position
        return self.p0.copy()

    def velocity(self, t: float) -> np.ndarray:
        if self.kind == "sinusoidal":
            omega = 2.0 * math.pi / self.period
            return self.delta_p * omega * math.cos(omega * t)
        if self.kind == "conveyor":
            elapsed = 0.0
            for duration, velocity in self.segments:
                elapsed += duration
                if t < elapsed:
                    return velocity.copy()
            return self.segments[-1][1].copy()
        return np.zeros(3)

    @property
    def peak_speed(self) -> float:
        if self.kind == "sinusoidal":
            return float(np.linalg.norm(self.delta_p * 2.0 * math.pi / self.period))
        if self.kind == "conveyor":
            return max(float(np.linalg.norm(v)) for _, v in self.segments)
        return 0.0


@dataclass(frozen=True, eq=False)
class ObstacleBody:
    """Rigid composite of spheres and boxes (centers relative to the body position) moving by `motion`.

    Background bodies (table, walls) may lie outside the map extents; they are rendered and
    collide with the robot but never contribute ground-truth voxels.
    """
    name: str
    shapes: Tuple[Shape, ...]
    motion: Motion = field(default_factory=Motion)
    background: bool = False

    def shapes_at(self, t: float) -> List[Shape]:
        offset = self.motion.position(t)
        return [shape.translated(offset) for shape in self.shapes]

    def bounds_over_period(self, samples: int = 200) -> Tuple[np.ndarray, np.ndarray]:
        horizon = self.motion.period
        if self.motion.kind == "conveyor":
            horizon = sum(d for d, _ in self.motion.segments)
        lo = np.full(3, np.inf)
        hi = np.full(3, -np.inf)
        for t in np.linspace(0.0, horizon, samples):
            for shape in self.shapes_at(float(t)):
                s_lo, s_hi = shape.bounds()
                lo = np.minimum(lo, s_lo)
                hi = np.maximum(hi, s_hi)
        return lo, hi


@dataclass(frozen=True, eq=False)
class Scene:
    bodies: Tuple[ObstacleBody, ...] = ()
    t: float = 0.0

    def at(self, t: float) -> "Scene":
        return Scene(self.bodies, t)

    def shapes(self, include_background: bool = True) -> List[Tuple[int, Shape]]:
        return [(i, shape) for i, body in enumerate(self.bodies)
                if include_background or not body.background
                for shape in body.shapes_at(self.t)]

    def body_velocities(self) -> np.ndarray:
        if not self.bodies:
            return np.zeros((0, 3))
        return np.stack([body.motion.velocity(self.t) for body in self.bodies])


def cast_rays(scene: Scene, origin: np.ndarray, dirs: np.ndarray,
              robot: Optional[RobotModel] = None, q: Optional[np.ndarray] = None) -> np.ndarray:
    """Nearest hit distance of unit world rays against the scene (and optionally the robot)."""
    t_best = np.full(dirs.shape[0], np.inf)
    for _, shape in scene.shapes():
        t_best = np.minimum(t_best, shape.intersect(origin, dirs))
    if robot is not None and q is not None:
        starts, ends = capsule_segments_batch(robot, np.asarray(q, dtype=float)[None])
        for a, b, radius in zip(starts[0], ends[0], robot.capsule_radii):
            t_best = np.minimum(t_best, intersect_capsule(origin, dirs, a, b, radius))
    return t_best


def render_depth(scene: Scene, cam: CameraModel, noise_std: float, seed: int,
                 robot: Optional[RobotModel] = None, q: Optional[np.ndarray] = None) -> PointCloud:
    """Ray-casts one ray per intrinsic grid cell and returns the hits in the camera frame.

    Range noise N(0, noise_std²) is added along each hit ray; misses and hits beyond the
    camera's max range produce no point.
    """
    if noise_std < 0:
        raise ParameterError("camera noise must be non-negative")
    dirs_cam = cam.ray_directions()
    dirs_world = dirs_cam @ cam.pose.rotation.T
    t_hit = cast_rays(scene, cam.position, dirs_world, robot, q)
    hits = np.isfinite(t_hit) & (t_hit <= cam.max_range)
    depth = t_hit[hits]
    if noise_std > 0 and depth.size:
        rng = np.random.default_rng(seed)
        depth = depth + rng.normal(0.0, noise_std, size=depth.shape[0])
    return PointCloud(dirs_cam[hits] * depth[:, None], frame=f"camera:{cam.name}")


def voxel_filter(cloud: PointCloud, voxel_size: float, origin: Optional[np.ndarray] = None) -> PointCloud:
    """Replaces the points of every occupied grid cell by their centroid (cells ordered by key)."""
    if voxel_size <= 0:
        raise ParameterError("voxel filter size must be positive")
    if len(cloud) == 0:
        return cloud
    origin = np.zeros(3) if origin is None else np.asarray(origin, dtype=float)
    keys = np.floor((cloud.points - origin) / voxel_size).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    sums = np.stack([np.bincount(inverse, weights=cloud.points[:, k], minlength=counts.size)
                     for k in range(3)], axis=1)
    return PointCloud(sums / counts[:, None], cloud.frame)


def remove_robot_points(cloud: PointCloud, model: RobotModel, q: np.ndarray, margin: float) -> PointCloud:
    """Drops every world point whose signed robot distance is at most `margin`."""
    if margin <= 0:
        raise ParameterError("robot surface margin must be positive")
    if len(cloud) == 0:
        return cloud
    dist = min_dist_to_robot(model, q, cloud.points)
    return PointCloud(cloud.points[dist > margin], cloud.frame)


@dataclass
class GroundTruth:
    occupied: np.ndarray
    visible: np.ndarray
    voxel_body: np.ndarray
    body_velocities: np.ndarray

    @property
    def visible_set(self) -> set:
        return set(self.occupied[self.visible].tolist())


def _shape_voxels(shape: Shape, extents: MapExtents, tol: float) -> np.ndarray:
    lo, hi = shape.bounds()
    shape_cells = np.array(extents.shape)
    first = np.clip(np.floor((lo - extents.origin) / extents.voxel_size).astype(int), 0, shape_cells - 1)
    last = np.clip(np.floor((hi - extents.origin) / extents.voxel_size).astype(int), 0, shape_cells - 1)
    if np.any(hi <= extents.origin) or np.any(lo >= extents.upper):
        return np.zeros(0, dtype=np.int64)
    ix, iy, iz = np.meshgrid(*[np.arange(first[k], last[k] + 1) for k in range(3)], indexing='ij')
    coords = np.stack([ix.ravel(), iy.ravel(), iz.ravel()], axis=1)
    vox_lo = extents.origin + coords * extents.voxel_size
    vox_hi = vox_lo + extents.voxel_size
    if isinstance(shape, Box):
        overlap = np.minimum(hi, vox_hi) - np.maximum(lo, vox_lo)
        keep = np.all(overlap > tol, axis=1)
    else:
        nearest = np.clip(shape.center, vox_lo, vox_hi)
        keep = np.linalg.norm(nearest - shape.center, axis=1) < shape.radius - tol
    nx, ny, _ = extents.shape
    coords = coords[keep]
    return coords[:, 0] + nx * (coords[:, 1] + ny * coords[:, 2])


def _ray_box_entry(origin: np.ndarray, dirs: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    safe = np.where(np.abs(dirs) < 1e-15, 1e-15, dirs)
    t1 = (lo - origin) / safe
    t2 = (hi - origin) / safe
    return np.maximum(np.max(np.minimum(t1, t2), axis=-1), 0.0)


def ground_truth_voxels(scene: Scene, extents: MapExtents, cams: Sequence[CameraModel],
                        robot: Optional[RobotModel] = None, q: Optional[np.ndarray] = None) -> GroundTruth:
    """Occupied voxels of the scene, their visibility from any camera, and body velocities.

    A voxel is occupied when it overlaps a non-background body with positive volume. It is
    visible when, for some camera, its center is in the field of view and range and the
    first surface along the ray to the center is not reached before the ray enters the voxel.
    """
    tol = 1e-9 * extents.voxel_size
    owner = {}
    for body_id, shape in scene.shapes(include_background=False):
        for index in _shape_voxels(shape, extents, tol).tolist():
            owner.setdefault(index, body_id)
    occupied = np.array(sorted(owner), dtype=np.int64)
    voxel_body = np.array([owner[i] for i in occupied.tolist()], dtype=np.int64)
    visible = np.zeros(occupied.shape[0], dtype=bool)
    if occupied.size:
        centers = extents.voxel_center(occupied)
        lower = extents.voxel_lower(occupied)
        for cam in cams:
            dist = camera_distances(centers, cam)
            in_view = (np.asarray(pyramid_index(centers, cam)) >= 0) & (dist <= cam.max_range)
            dirs = (centers - cam.position) / np.maximum(dist, 1e-12)[:, None]
            t_hit = cast_rays(scene, cam.position, dirs, robot, q)
            t_entry = _ray_box_entry(cam.position, dirs, lower, lower + extents.voxel_size)
            visible |= in_view & (t_hit >= t_entry - 1e-9)
    return GroundTruth(occupied, visible, voxel_body, scene.body_velocities())


def _capsule_box_clearance(a: np.ndarray, b: np.ndarray, radius: np.ndarray, box: Box,
                           iterations: int = 80) -> np.ndarray:
    """Signed clearance of capsules against a box: golden-section minimisation of the (convex) box SDF."""
    lo = np.zeros(a.shape[0])
    hi = np.ones(a.shape[0])

    def f(t):
        return box.sdf(a + t[:, None] * (b - a))

    x1 = hi - GOLDEN * (hi - lo)
    x2 = lo + GOLDEN * (hi - lo)
    f1, f2 = f(x1), f(x2)
    for _ in range(iterations):
        left = f1 < f2
        hi = np.where(left, x2, hi)
        lo = np.where(left, lo, x1)
        x1 = hi - GOLDEN * (hi - lo)
        x2 = lo + GOLDEN * (hi - lo)
        f1, f2 = f(x1), f(x2)
    best = np.minimum.reduce([f(np.zeros_like(lo)), f(np.ones_like(lo)), f(0.5 * (lo + hi))])
    return best - radius


def robot_scene_clearance(model: RobotModel, q: np.ndarray, scene: Scene) -> float:
    """Minimum signed distance between the robot capsules and every scene shape (negative = penetration)."""
    starts, ends = capsule_segments_batch(model, np.asarray(q, dtype=float)[None])
    a, b = starts[0], ends[0]
    radii = model.capsule_radii
    clearance = np.inf
    for _, shape in scene.shapes():
        if isinstance(shape, Sphere):
            dist = point_segment_distance(shape.center, a, b) - radii - shape.radius
        else:
            dist = _capsule_box_clearance(a, b, radii, shape)
        clearance = min(clearance, float(np.min(dist)))
    return clearance
