# oracle.py
"""
Slow reference implementations. Each one is a literal loop over particles, points,
horizon steps or permutations, guarded by a size limit so it never ends up on a
production path. `run_oracle_suite` pits them against the batched kernels.
"""
import math
import itertools
import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment

from dstorm import propagate_obstacle_covariance
from gdsp import MapParams, ParticlePool, apply_update
from utils import OracleSizeError, psd_sqrt

logger = logging.getLogger(__name__)

MAX_ORACLE_PARTICLES = 2000
MAX_ORACLE_POINTS = 500
MAX_ORACLE_ASSIGNMENT = 8


def sequential_phd_update(positions: np.ndarray, weights: np.ndarray, points: np.ndarray, params: MapParams,
                          observable: Optional[np.ndarray] = None,
                          birth_count: Optional[int] = None) -> np.ndarray:
    """PHD weight update by explicit nested loops. Returns the new weights."""
    n = positions.shape[0]
    m = points.shape[0]
    if n > MAX_ORACLE_PARTICLES or m > MAX_ORACLE_POINTS:
        raise OracleSizeError(f"oracle limited to {MAX_ORACLE_PARTICLES} particles x {MAX_ORACLE_POINTS} points, "
                              f"got {n} x {m}")
    observable = np.ones(n, dtype=bool) if observable is None else observable
    l_b = m if birth_count is None else birth_count
    p_d = params.detection_prob
    sigma = params.obs_std
    norm = 1.0 / (2.0 * math.pi * sigma * sigma) ** 1.5

    def g(z, x):
        d2 = sum((z[a] - x[a]) ** 2 for a in range(3))
        return norm * math.exp(-0.5 * d2 / (sigma * sigma))

    c = []
    for i in range(m):
        total = 0.0
        for j in range(n):
            if observable[j]:
                total += weights[j] * g(points[i], positions[j])
        c.append(p_d * total + l_b * params.birth_weight + params.clutter)
    updated = np.array(weights, dtype=float)
    for j in range(n):
        if not observable[j]:
            continue
        ratio = 0.0
        for i in range(m):
            ratio += g(points[i], positions[j]) / c[i]
        updated[j] = (1.0 - p_d + p_d * ratio) * weights[j]
    return updated


def sequential_predict(positions: np.ndarray, velocities: np.ndarray, weights: np.ndarray, params: MapParams,
                       rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Constant-velocity prediction one particle at a time (no extent check)."""
    cov = params.prediction_cov
    chol = psd_sqrt(cov, "prediction_noise") if np.any(cov != 0.0) else None
    out_p, out_v, out_w = [], [], []
    for p, v, w in zip(positions, velocities, weights):
        p = p + params.dt * v
        if chol is not None:
            noise = (rng.standard_normal(6)[None, :] * chol).sum(axis=-1)
            p = p + noise[:3]
            v = v + noise[3:]
        out_p.append(p)
        out_v.append(v)
        out_w.append(w * params.survival_prob)
    return np.array(out_p).reshape(-1, 3), np.array(out_v).reshape(-1, 3), np.array(out_w)


def recursive_ekf_covariance(cov0: np.ndarray, dt: np.ndarray, process_noise: Optional[np.ndarray] = None) -> np.ndarray:
    """Step-by-step A Σ Aᵀ + Q on the 6-D (position, velocity) state. Returns (H, 6, 6)."""
    q = np.zeros((6, 6)) if process_noise is None else np.asarray(process_noise, dtype=float)
    cov = np.asarray(cov0, dtype=float)
    steps = []
    for step in dt:
        a = np.eye(6)
        a[:3, 3:] = step * np.eye(3)
        cov = a @ cov @ a.T + q
        steps.append(cov)
    return np.array(steps)


def brute_force_assignment(costs: np.ndarray) -> Tuple[np.ndarray, np.ndarray, float]:
    """Minimum-cost matching by enumerating every permutation of the larger side."""
    costs = np.asarray(costs, dtype=float)
    rows, cols = costs.shape
    if max(rows, cols) > MAX_ORACLE_ASSIGNMENT:
        raise OracleSizeError(f"brute-force assignment limited to {MAX_ORACLE_ASSIGNMENT}, got {costs.shape}")
    transpose = rows > cols
    matrix = costs.T if transpose else costs
    best, best_perm = math.inf, ()
    for perm in itertools.permutations(range(matrix.shape[1]), matrix.shape[0]):
        total = sum(matrix[i, j] for i, j in enumerate(perm))
        if total < best:
            best, best_perm = total, perm
    r = np.arange(matrix.shape[0])
    c = np.array(best_perm, dtype=np.int64)
    if transpose:
        r, c = c, r
        order = np.argsort(r)
        r, c = r[order], c[order]
    return r, c, float(best) if rows and cols else 0.0


def brute_force_groups(ids: np.ndarray) -> dict:
    """Slot lists per non-negative group id."""
    groups = {}
    for slot, k in enumerate(np.asarray(ids).tolist()):
        if k >= 0:
            groups.setdefault(k, []).append(slot)
    return groups


@dataclass
class OracleCheck:
    name: str
    instances: int
    max_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance


def _relative_error(fast: np.ndarray, slow: np.ndarray) -> float:
    if fast.size == 0:
        return 0.0
    scale = np.maximum(np.abs(slow), 1e-300)
    return float(np.max(np.abs(fast - slow) / scale))


def check_phd_update(instances: int, rng: np.random.Generator) -> OracleCheck:
    params = MapParams(lengths=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0), voxel_size=0.1, max_particles=2000,
                       obs_std=0.05)
    worst = 0.0
    for _ in range(instances):
        n = int(rng.integers(1, 501))
        m = int(rng.integers(0, 201))
        positions = rng.random((n, 3))
        weights = rng.random(n)
        points = rng.random((m, 3))
        observable = rng.random(n) < 0.8
        pool = ParticlePool.from_arrays(positions, np.zeros((n, 3)), weights)
        apply_update(pool, points, observable, params)
        slow = sequential_phd_update(positions, weights, points, params, observable)
        worst = max(worst, _relative_error(pool.w, slow))
    return OracleCheck("phd_update", instances, worst, 1e-9)


def check_covariance(instances: int, rng: np.random.Generator, horizon: int = 30) -> OracleCheck:
    worst = 0.0
    for _ in range(instances):
        dt = rng.uniform(0.01, 0.1, size=horizon)
        a = rng.standard_normal((3, 3))
        b = rng.standard_normal((3, 3))
        cov_p0, cov_v = a @ a.T, b @ b.T
        cov0 = np.zeros((6, 6))
        cov0[:3, :3] = cov_p0
        cov0[3:, 3:] = cov_v
        slow = recursive_ekf_covariance(cov0, dt)[:, :3, :3]
        fast = propagate_obstacle_covariance(cov_p0[None], cov_v[None], dt)[0]
        worst = max(worst, float(np.max(np.abs(fast - slow)) / np.max(np.abs(slow))))
    return OracleCheck("covariance", instances, worst, 1e-10)


def check_assignment(instances: int, rng: np.random.Generator, size: int = 6) -> OracleCheck:
    worst = 0.0
    for _ in range(instances):
        costs = rng.random((size, size))
        rows, cols = linear_sum_assignment(costs)
        _, _, best = brute_force_assignment(costs)
        worst = max(worst, abs(float(costs[rows, cols].sum()) - best))
    return OracleCheck("assignment", instances, worst, 1e-12)


def run_oracle_suite(instances: int = 200, seed: int = 0) -> List[OracleCheck]:
    rng = np.random.default_rng(seed)
    checks = [check_phd_update(instances, rng),
              check_covariance(max(1, instances // 2), rng),
              check_assignment(max(1, instances // 2), rng)]
    for check in checks:
        logger.info("%s: %d instances, max error %.3e (tol %.0e) %s", check.name, check.instances,
                    check.max_error, check.tolerance, "ok" if check.passed else "MISMATCH")
    return checks
