# gdsp.py
"""
Dual-structure particle occupancy map.

Particles live in a fixed-capacity structure-of-arrays pool and carry two indices: the
voxel they fall in (for estimation and resampling) and, per camera, the view pyramid they
fall in (for occlusion-aware updates). Every kernel is batched over the pool with numpy;
the pool keeps its live particles compacted in slots [0, count).
"""
import math
import time
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from scipy.optimize import linear_sum_assignment
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from geometry import (CameraModel, MapExtents, PointCloud, camera_distances, pyramid_index,
                      transform_points, voxel_index)
from robot import RobotModel, min_dist_to_robot
from sensor import remove_robot_points, voxel_filter
from utils import ParameterError, psd_sqrt

logger = logging.getLogger(__name__)

REGULARIZATION = 1e-6
VOXEL_CSV_HEADER = (
    ["t", "px", "py", "pz", "vx", "vy", "vz"]
    + [f"sp{i}{j}" for i in range(3) for j in range(3)]
    + [f"sv{i}{j}" for i in range(3) for j in range(3)]
    + ["l", "p_occ"]
)


class MapParams(BaseModel):
    """Filter constants and workspace of the particle map."""
    model_config = ConfigDict(extra="forbid")

    lengths: Tuple[float, float, float] = (1.2, 1.2, 1.0)
    origin: Tuple[float, float, float] = (-0.6, -0.6, 0.0)
    voxel_size: float = Field(0.05, gt=0)
    max_particles: int = Field(120_000, gt=0)
    survival_prob: float = Field(0.98, gt=0, le=1)
    detection_prob: float = Field(0.9, gt=0, le=1)
    clutter: float = Field(0.01, ge=0)
    birth_weight: float = Field(0.1, gt=0)
    obs_std: float = Field(0.02, gt=0)
    pred_pos_var: float = Field(2.5e-5, ge=0)
    pred_vel_var: float = Field(1e-4, ge=0)
    prediction_noise: Optional[List[List[float]]] = None
    occupancy_threshold: float = Field(0.3, gt=0)
    occlusion_thickness: float = Field(0.2, ge=0)
    robot_margin: float = Field(0.06, gt=0)
    dt: float = Field(0.1, gt=0)
    filter_size: float = Field(0.02, gt=0)
    cluster_gate: float = Field(0.1, gt=0)
    max_observations: int = Field(20_000, gt=0)
    dense_update_limit: int = Field(4_000_000, gt=0)
    likelihood_cutoff: Optional[float] = Field(None, gt=0)

    @field_validator("prediction_noise")
    @classmethod
    def _check_prediction_noise(cls, value):
        if value is not None:
            matrix = np.asarray(value, dtype=float)
            if matrix.shape != (6, 6):
                raise ValueError(f"prediction_noise must be 6x6, got {matrix.shape}")
            psd_sqrt(matrix, "prediction_noise")
        return value

    @model_validator(mode="after")
    def _check_capacity(self):
        extents = self.extents
        if self.max_particles < extents.num_voxels:
            raise ValueError(f"max_particles ({self.max_particles}) must be at least the voxel count "
                             f"({extents.num_voxels})")
        return self

    @property
    def extents(self) -> MapExtents:
        return MapExtents(np.array(self.lengths), self.voxel_size, np.array(self.origin))

    @property
    def resample_cap(self) -> int:
        return self.max_particles // self.extents.num_voxels

    @property
    def birth_cap(self) -> int:
        return 5 * self.resample_cap

    @property
    def prediction_cov(self) -> np.ndarray:
        if self.prediction_noise is not None:
            return np.asarray(self.prediction_noise, dtype=float)
        return np.diag([self.pred_pos_var] * 3 + [self.pred_vel_var] * 3)

    @property
    def cutoff(self) -> float:
        return self.likelihood_cutoff if self.likelihood_cutoff is not None else 5.0 * self.obs_std


@dataclass
class ParticlePool:
    """Fixed-capacity particle storage; slots at or beyond `count` are ignored by every kernel."""
    positions: np.ndarray
    velocities: np.ndarray
    weights: np.ndarray
    voxel_ids: np.ndarray
    pyramid_ids: np.ndarray
    count: int = 0

    @classmethod
    def empty(cls, capacity: int, num_cameras: int = 1) -> "ParticlePool":
        return cls(np.zeros((capacity, 3)), np.zeros((capacity, 3)), np.zeros(capacity),
                   np.full(capacity, -1, dtype=np.int64), np.full((capacity, max(1, num_cameras)), -1, dtype=np.int64))

    @classmethod
    def from_arrays(cls, positions, velocities, weights, capacity: Optional[int] = None,
                    num_cameras: int = 1, extents: Optional[MapExtents] = None) -> "ParticlePool":
        positions = np.asarray(positions, dtype=float).reshape(-1, 3)
        pool = cls.empty(capacity or max(1, positions.shape[0]), num_cameras)
        pool.append(positions, np.asarray(velocities, dtype=float).reshape(-1, 3), np.asarray(weights, dtype=float))
        if extents is not None:
            refresh_indices(pool, extents)
        return pool

    @property
    def capacity(self) -> int:
        return self.weights.shape[0]

    @property
    def valid(self) -> np.ndarray:
        return np.arange(self.capacity) < self.count

    @property
    def p(self) -> np.ndarray:
        return self.positions[:self.count]

    @property
    def v(self) -> np.ndarray:
        return self.velocities[:self.count]

    @property
    def w(self) -> np.ndarray:
        return self.weights[:self.count]

    @property
    def total_weight(self) -> float:
        return float(self.w.sum())

    def copy(self) -> "ParticlePool":
        return ParticlePool(self.positions.copy(), self.velocities.copy(), self.weights.copy(),
                            self.voxel_ids.copy(), self.pyramid_ids.copy(), self.count)

    def append(self, positions: np.ndarray, velocities: np.ndarray, weights: np.ndarray,
               voxel_ids: Optional[np.ndarray] = None, pyramid_ids: Optional[np.ndarray] = None) -> None:
        n = positions.shape[0]
        if self.count + n > self.capacity:
            raise ParameterError(f"pool overflow: {self.count} + {n} > {self.capacity}")
        sl = slice(self.count, self.count + n)
        self.positions[sl] = positions
        self.velocities[sl] = velocities
        self.weights[sl] = weights
        self.voxel_ids[sl] = -1 if voxel_ids is None else voxel_ids
        self.pyramid_ids[sl] = -1 if pyramid_ids is None else pyramid_ids
        self.count += n

    def take(self, index: np.ndarray) -> None:
        """Rewrites the live range as the given (ordered) selection of current live slots."""
        index = np.asarray(index, dtype=np.int64)
        n = index.shape[0]
        for arr in (self.positions, self.velocities, self.weights, self.voxel_ids, self.pyramid_ids):
            arr[:n] = arr[index]
        self.count = n

    def compact(self, keep: np.ndarray) -> int:
        """Drops live particles where keep is False, preserving order. Returns the number dropped."""
        dropped = int(self.count - np.count_nonzero(keep))
        if dropped:
            self.take(np.flatnonzero(keep))
        return dropped


def refresh_indices(pool: ParticlePool, extents: MapExtents, cameras: Sequence[CameraModel] = ()) -> int:
    """Recomputes voxel and pyramid indices, invalidating particles outside the extents."""
    if pool.count == 0:
        return 0
    ids = voxel_index(pool.p, extents)
    dropped = pool.compact(ids >= 0)
    pool.voxel_ids[:pool.count] = ids[ids >= 0]
    for slot, cam in enumerate(cameras):
        pool.pyramid_ids[:pool.count, slot] = pyramid_index(pool.p, cam) if pool.count else -1
    return dropped


def predict_particles(pool: ParticlePool, params: MapParams, rng: np.random.Generator,
                      cameras: Sequence[CameraModel] = ()) -> ParticlePool:
    """Constant-velocity prediction with additive Gaussian noise and survival thinning."""
    n = pool.count
    if n == 0:
        return pool
    cov = params.prediction_cov
    p, v = pool.p, pool.v
    p += params.dt * v
    if np.any(cov != 0.0):
        chol = psd_sqrt(cov, "prediction_noise")
        z = rng.standard_normal((n, 6))
        noise = (z[:, None, :] * chol[None, :, :]).sum(axis=-1)
        p += noise[:, :3]
        v += noise[:, 3:]
    pool.w[:] *= params.survival_prob
    finite = np.all(np.isfinite(p), axis=1) & np.all(np.isfinite(v), axis=1)
    if not np.all(finite):
        pool.compact(finite)
    dropped = refresh_indices(pool, params.extents, cameras)
    if dropped:
        logger.debug("%d particles left the map extents", dropped)
    return pool


def drop_robot_particles(pool: ParticlePool, model: RobotModel, q: np.ndarray, margin: float) -> int:
    """Removes live particles within `margin` of the robot surface. Returns the number dropped."""
    if pool.count == 0:
        return 0
    dropped = pool.compact(min_dist_to_robot(model, q, pool.p) > margin)
    if dropped:
        logger.debug("%d particles inside the robot margin", dropped)
    return dropped


@dataclass
class PyramidTable:
    """Per-pyramid ranges into the pool ordered by pyramid index (out-of-view particles last)."""
    order: np.ndarray
    counts: np.ndarray
    first: np.ndarray
    last: np.ndarray

    @property
    def num_in_view(self) -> int:
        return int(self.counts.sum())

    def members(self, k: int) -> np.ndarray:
        if self.counts[k] == 0:
            return np.zeros(0, dtype=np.int64)
        return self.order[self.first[k]:self.last[k] + 1]


def assign_particles_to_pyramids(pool: ParticlePool, cam: CameraModel, slot: int = 0) -> PyramidTable:
    """Groups live particles by pyramid: a stable sort, then range ends found by comparing the
    sorted index sequence with its one-step circular shifts."""
    n_p = cam.num_pyramids
    counts = np.zeros(n_p, dtype=np.int64)
    first = np.full(n_p, -1, dtype=np.int64)
    last = np.full(n_p, -1, dtype=np.int64)
    ids = pool.pyramid_ids[:pool.count, slot]
    key = np.where(ids >= 0, ids, n_p)
    order = np.argsort(key, kind='stable')
    in_view = int(np.count_nonzero(ids >= 0))
    if in_view == 0:
        return PyramidTable(order, counts, first, last)
    sorted_ids = key[order][:in_view]
    starts = sorted_ids != np.roll(sorted_ids, 1)
    ends = sorted_ids != np.roll(sorted_ids, -1)
    starts[0] = True
    ends[-1] = True
    positions = np.arange(in_view)
    first[sorted_ids[starts]] = positions[starts]
    last[sorted_ids[ends]] = positions[ends]
    occupied = first >= 0
    counts[occupied] = last[occupied] - first[occupied] + 1
    return PyramidTable(order, counts, first, last)


@dataclass
class PyramidObservations:
    """Observation distances binned by pyramid (nearest `cap` kept per pyramid) and their maxima."""
    pyramid_ids: np.ndarray
    distances: np.ndarray
    d_max: np.ndarray

    def distances_in(self, k: int) -> np.ndarray:
        return np.sort(self.distances[self.pyramid_ids == k])


def assign_points_to_pyramids(cloud: PointCloud, cam: CameraModel,
                              max_observations: int = 20_000) -> PyramidObservations:
    n_p = cam.num_pyramids
    d_max = np.zeros(n_p)
    if len(cloud) == 0:
        return PyramidObservations(np.zeros(0, dtype=np.int64), np.zeros(0), d_max)
    ids = np.asarray(pyramid_index(cloud.points, cam))
    dist = camera_distances(cloud.points, cam)
    ids, dist = ids[ids >= 0], dist[ids >= 0]
    cap = max(1, max_observations // n_p)
    order = np.lexsort((dist, ids))
    ids, dist = ids[order], dist[order]
    group_start = np.searchsorted(ids, ids, side='left')
    keep = (np.arange(ids.shape[0]) - group_start) < cap
    ids, dist = ids[keep], dist[keep]
    np.maximum.at(d_max, ids, dist)
    return PyramidObservations(ids, dist, d_max)


def observable_mask(pool: ParticlePool, cam: CameraModel, table: PyramidTable,
                    observations: PyramidObservations, thickness: float) -> np.ndarray:
    """Live particles in view whose camera distance is within their pyramid's d_max + thickness."""
    mask = np.zeros(pool.count, dtype=bool)
    in_view = table.num_in_view
    if in_view == 0:
        return mask
    members = table.order[:in_view]
    occupied = np.flatnonzero(table.counts)
    bound = np.repeat(observations.d_max[occupied], table.counts[occupied]) + thickness
    dist = camera_distances(pool.p[members], cam)
    mask[members] = dist <= bound
    return mask


def gaussian_likelihood(z: np.ndarray, x: np.ndarray, std: float) -> np.ndarray:
    """Isotropic 3-D Gaussian g(z_i | x_j) for all pairs, shape (len(z), len(x))."""
    d2 = cdist(z, x, 'sqeuclidean')
    return np.exp(-0.5 * d2 / std ** 2) / (2.0 * math.pi * std ** 2) ** 1.5


def _in_extent_points(cloud: PointCloud, extents: MapExtents) -> np.ndarray:
    if len(cloud) == 0:
        return np.zeros((0, 3))
    return cloud.points[extents.contains(cloud.points)]


def apply_update(pool: ParticlePool, observations: np.ndarray, mask: np.ndarray, params: MapParams,
                 birth_count: Optional[int] = None) -> np.ndarray:
    """Multiplies observable weights by (1 - P_d + P_d Σ_i g_ij / C_i) and returns C.

    C_i = P_d Σ_j ω_j g_ij + L_b ω_b + κ, summed over the observable particles.
    """
    z = observations
    m = z.shape[0]
    l_b = m if birth_count is None else birth_count
    idx = np.flatnonzero(mask)
    w = pool.weights
    p_d = params.detection_prob
    if m == 0:
        w[idx] *= 1.0 - p_d
        return np.zeros(0)
    base = l_b * params.birth_weight + params.clutter
    x = pool.positions[idx]
    if m * idx.shape[0] <= params.dense_update_limit:
        g = gaussian_likelihood(z, x, params.obs_std)
        c = p_d * (g @ w[idx]) + base
        ratio = (g / c[:, None]).sum(axis=0)
    else:
        pairs = cKDTree(z).sparse_distance_matrix(cKDTree(x), params.cutoff, output_type='ndarray')
        norm = (2.0 * math.pi * params.obs_std ** 2) ** -1.5
        g = norm * np.exp(-0.5 * pairs['v'] ** 2 / params.obs_std ** 2)
        c = p_d * np.bincount(pairs['i'], weights=g * w[idx][pairs['j']], minlength=m) + base
        ratio = np.bincount(pairs['j'], weights=g / c[pairs['i']], minlength=idx.shape[0])
    w[idx] *= 1.0 - p_d + p_d * ratio
    return c


def _camera_mask(pool: ParticlePool, cloud: PointCloud, cam: CameraModel, params: MapParams,
                 slot: int) -> np.ndarray:
    table = assign_particles_to_pyramids(pool, cam, slot)
    observations = assign_points_to_pyramids(cloud, cam, params.max_observations)
    return observable_mask(pool, cam, table, observations, params.occlusion_thickness)


def update_weights(pool: ParticlePool, cloud: PointCloud, cam: CameraModel, params: MapParams,
                   slot: int = 0, birth_count: Optional[int] = None) -> np.ndarray:
    """Single-view PHD weight update. Returns the per-observation normaliser C."""
    mask = _camera_mask(pool, cloud, cam, params, slot)
    return apply_update(pool, _in_extent_points(cloud, params.extents), mask, params, birth_count)


def update_dual_view(pool: ParticlePool, cloud: PointCloud, cams: Sequence[CameraModel], params: MapParams,
                     birth_count: Optional[int] = None) -> np.ndarray:
    """Weight update over the union of the per-camera observable sets against the merged cloud."""
    mask = np.zeros(pool.count, dtype=bool)
    for slot, cam in enumerate(cams):
        mask |= _camera_mask(pool, cloud, cam, params, slot)
    return apply_update(pool, _in_extent_points(cloud, params.extents), mask, params, birth_count)


@dataclass(frozen=True, eq=False)
class VoxelEstimate:
    index: int
    center: np.ndarray
    velocity: np.ndarray
    cov_p: np.ndarray
    cov_v: np.ndarray
    size: float
    p_occ: float


@dataclass(frozen=True, eq=False)
class VoxelEstimates:
    """Immutable batch of occupied-voxel estimates, ordered by voxel index."""
    indices: np.ndarray
    centers: np.ndarray
    velocities: np.ndarray
    cov_p: np.ndarray
    cov_v: np.ndarray
    occupancy: np.ndarray
    size: float
    t: float = 0.0

    def __post_init__(self):
        for name in ("indices", "centers", "velocities", "cov_p", "cov_v", "occupancy"):
            getattr(self, name).setflags(write=False)

    @classmethod
    def empty(cls, size: float, t: float = 0.0) -> "VoxelEstimates":
        return cls(np.zeros(0, dtype=np.int64), np.zeros((0, 3)), np.zeros((0, 3)),
                   np.zeros((0, 3, 3)), np.zeros((0, 3, 3)), np.zeros(0), size, t)

    def __len__(self) -> int:
        return self.indices.shape[0]

    def __getitem__(self, k: int) -> VoxelEstimate:
        return VoxelEstimate(int(self.indices[k]), self.centers[k], self.velocities[k],
                             self.cov_p[k], self.cov_v[k], self.size, float(self.occupancy[k]))

    def __iter__(self) -> Iterator[VoxelEstimate]:
        return (self[k] for k in range(len(self)))

    def rows(self) -> Iterator[list]:
        for k in range(len(self)):
            yield ([self.t] + self.centers[k].tolist() + self.velocities[k].tolist()
                   + self.cov_p[k].ravel().tolist() + self.cov_v[k].ravel().tolist()
                   + [self.size, float(self.occupancy[k])])


def estimate_voxels(pool: ParticlePool, params: MapParams, t: float = 0.0) -> VoxelEstimates:
    """Per-voxel occupancy (weight sum) and, for occupied voxels, weighted mean state and scatter."""
    n_v = params.extents.num_voxels
    if pool.count == 0:
        return VoxelEstimates.empty(params.voxel_size, t)
    ids = pool.voxel_ids[:pool.count]
    w = pool.w
    occupancy = np.bincount(ids, weights=w, minlength=n_v)
    occupied = np.flatnonzero(occupancy >= params.occupancy_threshold)
    if occupied.size == 0:
        return VoxelEstimates.empty(params.voxel_size, t)
    slot = np.full(n_v, -1, dtype=np.int64)
    slot[occupied] = np.arange(occupied.size)
    member = slot[ids] >= 0
    k = slot[ids[member]]
    wn = w[member] / occupancy[ids[member]]
    p, v = pool.p[member], pool.v[member]
    centers = np.stack([np.bincount(k, weights=wn * p[:, a], minlength=occupied.size) for a in range(3)], axis=1)
    velocities = np.stack([np.bincount(k, weights=wn * v[:, a], minlength=occupied.size) for a in range(3)], axis=1)
    dp = p - centers[k]
    dv = v - velocities[k]
    cov_p = np.zeros((occupied.size, 3, 3))
    cov_v = np.zeros((occupied.size, 3, 3))
    np.add.at(cov_p, k, wn[:, None, None] * dp[:, :, None] * dp[:, None, :])
    np.add.at(cov_v, k, wn[:, None, None] * dv[:, :, None] * dv[:, None, :])
    eye = REGULARIZATION * np.eye(3)
    cov_p = 0.5 * (cov_p + np.swapaxes(cov_p, 1, 2)) + eye
    cov_v = 0.5 * (cov_v + np.swapaxes(cov_v, 1, 2)) + eye
    return VoxelEstimates(occupied, centers, velocities, cov_p, cov_v, occupancy[occupied], params.voxel_size, t)


def resample(pool: ParticlePool, params: MapParams, rng: np.random.Generator) -> ParticlePool:
    """Per-voxel multinomial resampling down to the voxel cap, preserving each voxel's weight sum."""
    cap = params.resample_cap
    n = pool.count
    if n == 0:
        return pool
    ids = pool.voxel_ids[:n]
    n_v = params.extents.num_voxels
    counts = np.bincount(ids, minlength=n_v)
    totals = np.bincount(ids, weights=pool.w, minlength=n_v)
    crowded = (counts > cap) & (totals > 0)
    if not np.any(crowded):
        return pool
    in_crowded = crowded[ids]
    members = np.flatnonzero(in_crowded)
    members = members[np.argsort(ids[members], kind='stable')]
    voxels = np.flatnonzero(crowded)
    group = np.searchsorted(voxels, ids[members])
    w = pool.weights[members]
    cumulative = np.cumsum(w)
    group_first = np.searchsorted(group, np.arange(voxels.size), side='left')
    offset = np.concatenate([[0.0], cumulative])[group_first]
    within = (cumulative - offset[group]) / totals[voxels][group]
    group_last = np.append(group_first[1:], members.size) - 1
    within[group_last] = 1.0
    keys = group + within
    draws = rng.random((voxels.size, cap))
    queries = (np.arange(voxels.size)[:, None] + draws).ravel()
    picks = members[np.minimum(np.searchsorted(keys, queries, side='right'), members.size - 1)]
    new_weights = np.repeat(totals[voxels] / cap, cap)
    kept = np.flatnonzero(~in_crowded)
    positions = pool.positions[picks].copy()
    velocities = pool.velocities[picks].copy()
    voxel_ids = pool.voxel_ids[picks].copy()
    pyramid_ids = pool.pyramid_ids[picks].copy()
    pool.take(kept)
    pool.append(positions, velocities, new_weights, voxel_ids, pyramid_ids)
    logger.debug("resampled %d voxels into %d particles", voxels.size, picks.size)
    return pool


@dataclass
class ClusterTrack:
    """Frame-to-frame cluster association and the resulting per-point velocity field."""
    previous_centroids: np.ndarray
    centroids: np.ndarray
    pairs: np.ndarray
    velocities: np.ndarray
    labels: np.ndarray

    @property
    def num_clusters(self) -> int:
        return self.centroids.shape[0]

    @property
    def point_velocities(self) -> np.ndarray:
        if self.labels.size == 0:
            return np.zeros((0, 3))
        return self.velocities[self.labels]


def euclidean_clusters(points: np.ndarray, gate: float) -> Tuple[np.ndarray, np.ndarray]:
    """Single-linkage clustering at distance `gate`. Returns (labels, centroids)."""
    n = points.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.int64), np.zeros((0, 3))
    pairs = cKDTree(points).query_pairs(gate, output_type='ndarray')
    graph = coo_matrix((np.ones(pairs.shape[0]), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    num, labels = connected_components(graph, directed=False)
    counts = np.bincount(labels, minlength=num)
    centroids = np.stack([np.bincount(labels, weights=points[:, a], minlength=num) for a in range(3)], axis=1)
    return labels.astype(np.int64), centroids / counts[:, None]


def cluster_velocities(cloud_t: PointCloud, cloud_prev: PointCloud, dt: float, gate: float) -> ClusterTrack:
    """Cluster both clouds, match centroids with the Hungarian method and finite-difference matches
    within the gate. Unmatched clusters move with zero velocity."""
    labels, centroids = euclidean_clusters(cloud_t.points, gate)
    _, previous = euclidean_clusters(cloud_prev.points, gate)
    velocities = np.zeros_like(centroids)
    pairs = np.zeros((0, 2), dtype=np.int64)
    if centroids.shape[0] and previous.shape[0]:
        cost = cdist(centroids, previous)
        rows, cols = linear_sum_assignment(cost)
        within = cost[rows, cols] <= gate
        pairs = np.stack([rows[within], cols[within]], axis=1).astype(np.int64)
        velocities[pairs[:, 0]] = (centroids[pairs[:, 0]] - previous[pairs[:, 1]]) / dt
    return ClusterTrack(previous, centroids, pairs, velocities, labels)


def spawn_newborn(pool: ParticlePool, points: np.ndarray, velocities: np.ndarray, c: np.ndarray,
                  params: MapParams, cameras: Sequence[CameraModel] = ()) -> int:
    """Adds one particle per observation carrying an equal share of Σ_i ω_b / C_i.

    Births into a voxel stop once its live plus born count reaches the birth cap; if the pool
    overflows, the lowest-weight particles are evicted. Returns the number of births kept.
    """
    m = points.shape[0]
    if m == 0:
        return 0
    if c.shape[0] != m:
        raise ParameterError(f"normaliser has {c.shape[0]} entries for {m} observations")
    weight = float(np.sum(params.birth_weight / c)) / m
    ids = np.asarray(voxel_index(points, params.extents))
    inside = ids >= 0
    points, velocities, ids = points[inside], velocities[inside], ids[inside]
    live = np.bincount(pool.voxel_ids[:pool.count], minlength=params.extents.num_voxels)
    order = np.argsort(ids, kind='stable')
    sorted_ids = ids[order]
    rank = np.empty_like(order)
    rank[order] = np.arange(order.size) - np.searchsorted(sorted_ids, sorted_ids, side='left')
    accepted = live[ids] + rank < params.birth_cap
    points, velocities, ids = points[accepted], velocities[accepted], ids[accepted]
    births = points.shape[0]
    pyramid_ids = np.full((births, pool.pyramid_ids.shape[1]), -1, dtype=np.int64)
    for slot, cam in enumerate(cameras):
        if births:
            pyramid_ids[:, slot] = pyramid_index(points, cam)
    overflow = pool.count + births - pool.capacity
    if overflow > 0:
        all_w = np.concatenate([pool.w, np.full(births, weight)])
        keep = np.sort(np.argsort(-all_w, kind='stable')[:pool.capacity])
        old = keep[keep < pool.count]
        new = keep[keep >= pool.count] - pool.count
        logger.warning("particle pool full: evicting %d lowest-weight particles", overflow)
        pool.take(old)
        points, velocities, ids, pyramid_ids = points[new], velocities[new], ids[new], pyramid_ids[new]
    pool.append(points, velocities, np.full(points.shape[0], weight), ids, pyramid_ids)
    return points.shape[0]


@dataclass
class MapStepResult:
    estimates: VoxelEstimates
    cloud: PointCloud
    track: ClusterTrack
    births: int
    timing: Dict[str, float] = field(default_factory=dict)


class DynamicParticleMap:
    """Owns the particle pool and runs one filter step per synchronized set of camera frames."""

    def __init__(self, params: MapParams, cameras: Sequence[CameraModel], seed: int,
                 robot: Optional[RobotModel] = None):
        if not 1 <= len(cameras) <= 2:
            raise ParameterError("the map supports one or two cameras")
        self.params = params
        self.cameras = list(cameras)
        self.robot = robot
        self.rng = np.random.default_rng(seed)
        self.pool = ParticlePool.empty(params.max_particles, len(cameras))
        self.previous_cloud = PointCloud.empty()
        self.t = 0.0
        self._executor = ThreadPoolExecutor(max_workers=1, thread_name_prefix="cluster")

    def close(self) -> None:
        self._executor.shutdown(wait=True)

    def __enter__(self) -> "DynamicParticleMap":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def preprocess(self, raw_clouds: Sequence[PointCloud], cameras: Sequence[CameraModel],
                   q: Optional[np.ndarray] = None) -> PointCloud:
        """Camera-frame clouds to one filtered, robot-free world cloud."""
        size = self.params.filter_size
        origin = self.params.extents.origin
        parts = [voxel_filter(transform_points(cam.pose, cloud), size, origin).points
                 for cloud, cam in zip(raw_clouds, cameras)]
        merged = PointCloud(np.vstack(parts) if parts else np.zeros((0, 3)))
        if len(parts) > 1:
            merged = voxel_filter(merged, size, origin)
        if self.robot is not None and q is not None:
            merged = remove_robot_points(merged, self.robot, q, self.params.robot_margin)
        return merged

    def map_step(self, raw_clouds: Sequence[PointCloud], q: Optional[np.ndarray] = None,
                 cameras: Optional[Sequence[CameraModel]] = None) -> MapStepResult:
        params = self.params
        cams = list(cameras) if cameras is not None else self.cameras
        timing = {}
        start = tick = time.perf_counter()

        def lap(name):
            nonlocal tick
            now = time.perf_counter()
            timing[name] = 1e3 * (now - tick)
            tick = now

        cloud = self.preprocess(raw_clouds, cams, q)
        observations = _in_extent_points(cloud, params.extents)
        current = PointCloud(observations)
        pending = self._executor.submit(cluster_velocities, current, self.previous_cloud,
                                        params.dt, params.cluster_gate)
        lap("preprocess")
        predict_particles(self.pool, params, self.rng, cams)
        if self.robot is not None and q is not None:
            drop_robot_particles(self.pool, self.robot, q, params.robot_margin)
        lap("predict")
        if len(cams) > 1:
            c = update_dual_view(self.pool, cloud, cams, params)
        else:
            c = update_weights(self.pool, cloud, cams[0], params)
        lap("update")
        self.t += params.dt
        estimates = estimate_voxels(self.pool, params, self.t)
        lap("estimate")
        resample(self.pool, params, self.rng)
        lap("resample")
        track = pending.result()
        births = spawn_newborn(self.pool, observations, track.point_velocities, c, params, cams)
        lap("birth")
        timing["total"] = 1e3 * (time.perf_counter() - start)
        self.previous_cloud = current
        logger.debug("t=%.2f: %d points, %d particles, %d occupied voxels, %d births",
                     self.t, observations.shape[0], self.pool.count, len(estimates), births)
        return MapStepResult(estimates, cloud, track, births, timing)
