# geometry.py
"""
Rigid transforms, point-cloud containers and the two spatial partitions of the map.

The voxel partition tiles the fixed workspace with cubes of edge l (x index fastest).
The pyramid partition bins a camera's field of view by azimuth/elevation at a fixed
angular resolution. Both index functions accept a single point or an (N, 3) array and
return OUTSIDE / OUTSIDE_FOV (-1) for points not covered by the partition.
"""
import math
import logging
from dataclasses import dataclass, field
from typing import Tuple, Union

import numpy as np

from utils import ParameterError

logger = logging.getLogger(__name__)

OUTSIDE = -1
OUTSIDE_FOV = -1

IndexResult = Union[int, np.ndarray]


def rotation_about(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix for a unit axis."""
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    x, y, z = axis
    k = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    return np.eye(3) + math.sin(angle) * k + (1.0 - math.cos(angle)) * (k @ k)


def rotation_rpy(roll: float, pitch: float, yaw: float) -> np.ndarray:
    """Fixed-axis roll/pitch/yaw (URDF convention): R = Rz(yaw) Ry(pitch) Rx(roll)."""
    return (rotation_about(np.array([0.0, 0.0, 1.0]), yaw)
            @ rotation_about(np.array([0.0, 1.0, 0.0]), pitch)
            @ rotation_about(np.array([1.0, 0.0, 0.0]), roll))


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """A proper rigid motion x -> R x + t."""
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        trans = np.asarray(self.translation, dtype=float).reshape(3)
        if not np.allclose(rot.T @ rot, np.eye(3), atol=1e-9) or abs(np.linalg.det(rot) - 1.0) > 1e-9:
            raise ParameterError("rotation must be orthonormal with determinant +1")
        object.__setattr__(self, 'rotation', rot)
        object.__setattr__(self, 'translation', trans)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_matrix(cls, matrix: np.ndarray) -> "RigidTransform":
        matrix = np.asarray(matrix, dtype=float)
        return cls(matrix[:3, :3], matrix[:3, 3])

    @classmethod
    def from_xyz_rpy(cls, xyz=(0.0, 0.0, 0.0), rpy=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return cls(rotation_rpy(*rpy), np.asarray(xyz, dtype=float))

    @classmethod
    def look_at(cls, position, target, up=(0.0, 0.0, 1.0)) -> "RigidTransform":
        """Camera pose with z along the viewing direction, y pointing down and x to the right."""
        position = np.asarray(position, dtype=float)
        z = np.asarray(target, dtype=float) - position
        norm = np.linalg.norm(z)
        if norm == 0.0:
            raise ParameterError("look_at target coincides with the camera position")
        z = z / norm
        down = -np.asarray(up, dtype=float)
        y = down - np.dot(down, z) * z
        if np.linalg.norm(y) < 1e-9:
            raise ParameterError("camera up vector is parallel to the viewing direction")
        y = y / np.linalg.norm(y)
        x = np.cross(y, z)
        return cls(np.column_stack([x, y, z]), position)

    def as_matrix(self) -> np.ndarray:
        matrix = np.eye(4)
        matrix[:3, :3] = self.rotation
        matrix[:3, 3] = self.translation
        return matrix

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Returns self ∘ other (apply other first)."""
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return self.compose(other)

    def inverse(self) -> "RigidTransform":
        rot_t = self.rotation.T
        return RigidTransform(rot_t, -rot_t @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.translation


@dataclass(frozen=True, eq=False)
class PointCloud:
    """An (N, 3) array of finite points tagged with the frame they are expressed in."""
    points: np.ndarray
    frame: str = "world"

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ParameterError("point cloud contains non-finite coordinates")
        object.__setattr__(self, 'points', pts)

    @classmethod
    def empty(cls, frame: str = "world") -> "PointCloud":
        return cls(np.zeros((0, 3)), frame)

    def __len__(self) -> int:
        return self.points.shape[0]

    def save_xyz(self, path: str) -> None:
        """Debug dump: one "x y z" line per point."""
        with open(path, 'w', encoding='utf-8') as f:
            for x, y, z in self.points:
                f.write(f"{x!r} {y!r} {z!r}\n")


def transform_points(transform: RigidTransform, cloud: PointCloud, frame: str = "world") -> PointCloud:
    """Maps every point p to R p + t and relabels the cloud with the target frame."""
    return PointCloud(transform.apply(cloud.points), frame)


@dataclass(frozen=True, eq=False)
class MapExtents:
    """A cuboid workspace partitioned into cubic voxels of edge `voxel_size`."""
    lengths: np.ndarray
    voxel_size: float
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        lengths = np.asarray(self.lengths, dtype=float).reshape(3)
        origin = np.asarray(self.origin, dtype=float).reshape(3)
        if self.voxel_size <= 0 or np.any(lengths <= 0):
            raise ParameterError("extents and voxel size must be positive")
        counts = np.rint(lengths / self.voxel_size)
        if np.any(counts < 1) or np.any(np.abs(counts * self.voxel_size - lengths) > 1e-9 * max(1.0, lengths.max())):
            raise ParameterError(f"extents {lengths.tolist()} are not integer multiples of voxel size {self.voxel_size}")
        object.__setattr__(self, 'lengths', lengths)
        object.__setattr__(self, 'origin', origin)

    @property
    def shape(self) -> Tuple[int, int, int]:
        counts = np.rint(self.lengths / self.voxel_size).astype(int)
        return int(counts[0]), int(counts[1]), int(counts[2])

    @property
    def num_voxels(self) -> int:
        nx, ny, nz = self.shape
        return nx * ny * nz

    @property
    def upper(self) -> np.ndarray:
        return self.origin + self.lengths

    def contains(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(voxel_index(np.asarray(points, dtype=float).reshape(-1, 3), self)) >= 0

    def voxel_coords(self, index: np.ndarray) -> np.ndarray:
        """Integer (ix, iy, iz) coordinates of flattened voxel indices."""
        index = np.asarray(index, dtype=np.int64)
        nx, ny, _ = self.shape
        return np.stack([index % nx, (index // nx) % ny, index // (nx * ny)], axis=-1)

    def voxel_lower(self, index: np.ndarray) -> np.ndarray:
        return self.origin + self.voxel_coords(index) * self.voxel_size

    def voxel_center(self, index: np.ndarray) -> np.ndarray:
        return self.voxel_lower(index) + 0.5 * self.voxel_size


def voxel_index(p: np.ndarray, extents: MapExtents) -> IndexResult:
    """Flattened voxel index (x fastest) of a point or an (N, 3) array; OUTSIDE if not in the extents."""
    pts = np.asarray(p, dtype=float)
    single = pts.ndim == 1
    pts = pts.reshape(-1, 3)
    nx, ny, nz = extents.shape
    cell = np.floor((pts - extents.origin) / extents.voxel_size)
    inside = np.all((cell >= 0) & (cell < np.array([nx, ny, nz])), axis=1) & np.all(np.isfinite(pts), axis=1)
    cell = np.where(inside[:, None], cell, 0).astype(np.int64)
    index = np.where(inside, cell[:, 0] + nx * (cell[:, 1] + ny * cell[:, 2]), OUTSIDE)
    if single:
        return int(index[0])
    return index


@dataclass(frozen=True, eq=False)
class CameraModel:
    """A depth camera: pose in the world, angular field of view and its pyramid binning.

    Camera frame convention: z is the optical axis, x to the right, y down. Azimuth is
    atan2(x, z); elevation is atan2(y, hypot(x, z)).
    """
    pose: RigidTransform
    fov_h: float
    fov_v: float
    resolution: float
    max_range: float = 4.0
    rows: int = 120
    cols: int = 160
    name: str = "camera"

    def __post_init__(self):
        if not 0.0 < self.resolution <= min(self.fov_h, self.fov_v):
            raise ParameterError("angular resolution must satisfy 0 < θ ≤ min(θ_h, θ_v)")
        if self.fov_h >= math.pi or self.fov_v >= math.pi:
            raise ParameterError("field of view must be below 180 degrees")
        if self.max_range <= 0 or self.rows < 1 or self.cols < 1:
            raise ParameterError("max range and intrinsic grid must be positive")

    @property
    def grid(self) -> Tuple[int, int]:
        """Pyramid grid (horizontal bins, vertical bins)."""
        return (int(math.ceil(self.fov_h / self.resolution - 1e-9)),
                int(math.ceil(self.fov_v / self.resolution - 1e-9)))

    @property
    def num_pyramids(self) -> int:
        n_h, n_v = self.grid
        return n_h * n_v

    @property
    def center_pyramid(self) -> int:
        return int(pyramid_index(self.pose.apply(np.array([0.0, 0.0, 1.0])), self))

    @property
    def position(self) -> np.ndarray:
        return self.pose.translation

    def with_pose(self, pose: RigidTransform) -> "CameraModel":
        return CameraModel(pose, self.fov_h, self.fov_v, self.resolution, self.max_range,
                           self.rows, self.cols, self.name)

    def ray_directions(self) -> np.ndarray:
        """Unit ray directions in the camera frame, one per intrinsic grid cell (row-major)."""
        az = -0.5 * self.fov_h + (np.arange(self.cols) + 0.5) * self.fov_h / self.cols
        el = -0.5 * self.fov_v + (np.arange(self.rows) + 0.5) * self.fov_v / self.rows
        el_grid, az_grid = np.meshgrid(el, az, indexing='ij')
        dirs = np.stack([np.cos(el_grid) * np.sin(az_grid),
                         np.sin(el_grid),
                         np.cos(el_grid) * np.cos(az_grid)], axis=-1)
        return dirs.reshape(-1, 3)


def camera_angles(points_cam: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Azimuth and elevation of camera-frame points."""
    x, y, z = points_cam[:, 0], points_cam[:, 1], points_cam[:, 2]
    return np.arctan2(x, z), np.arctan2(y, np.hypot(x, z))


def pyramid_index(p: np.ndarray, cam: CameraModel) -> IndexResult:
    """Pyramid index (horizontal bin fastest) of a world point or (N, 3) array; OUTSIDE_FOV if not in view."""
    pts = np.asarray(p, dtype=float)
    single = pts.ndim == 1
    pts = pts.reshape(-1, 3)
    local = cam.pose.inverse().apply(pts)
    az, el = camera_angles(local)
    half_h, half_v = 0.5 * cam.fov_h, 0.5 * cam.fov_v
    visible = (local[:, 2] > 0.0) & (np.abs(az) <= half_h) & (np.abs(el) <= half_v)
    n_h, n_v = cam.grid
    i_h = np.clip(np.floor((az + half_h) / cam.resolution), 0, n_h - 1).astype(np.int64)
    i_v = np.clip(np.floor((el + half_v) / cam.resolution), 0, n_v - 1).astype(np.int64)
    index = np.where(visible, i_h + n_h * i_v, OUTSIDE_FOV)
    if single:
        return int(index[0])
    return index


def camera_distances(points: np.ndarray, cam: CameraModel) -> np.ndarray:
    """Euclidean distance of world points to the camera center."""
    return np.linalg.norm(np.asarray(points, dtype=float).reshape(-1, 3) - cam.position, axis=1)
