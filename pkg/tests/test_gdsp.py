import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from geometry import CameraModel, PointCloud, RigidTransform, pyramid_index, voxel_index
from gdsp import (VOXEL_CSV_HEADER, DynamicParticleMap, MapParams, ParticlePool, apply_update,
                  assign_particles_to_pyramids, assign_points_to_pyramids, cluster_velocities, drop_robot_particles,
                  estimate_voxels, predict_particles, refresh_indices, resample, spawn_newborn, update_dual_view,
                  update_weights)
from oracle import brute_force_assignment, brute_force_groups, sequential_phd_update, sequential_predict
from robot import min_dist_to_robot


def _pool(params, positions, velocities=None, weights=None, cameras=(), capacity=None):
    positions = np.asarray(positions, dtype=float).reshape(-1, 3)
    n = positions.shape[0]
    velocities = np.zeros((n, 3)) if velocities is None else velocities
    weights = np.full(n, 0.1) if weights is None else weights
    pool = ParticlePool.from_arrays(positions, velocities, weights, capacity=capacity,
                                    num_cameras=max(1, len(cameras)))
    refresh_indices(pool, params.extents, cameras)
    return pool


@pytest.fixture
def quiet(unit_params):
    """Noise-free prediction with full survival."""
    return unit_params.model_copy(update={"pred_pos_var": 0.0, "pred_vel_var": 0.0, "survival_prob": 1.0})


@pytest.fixture
def cube_camera():
    """Camera below the unit cube looking up through its middle."""
    pose = RigidTransform.look_at((0.5, 0.5, -1.0), (0.5, 0.5, 0.5), up=(0.0, 1.0, 0.0))
    return CameraModel(pose, math.radians(60), math.radians(60), math.radians(5), rows=60, cols=60)


def test_params_reject_small_particle_budget():
    with pytest.raises(ValueError):
        MapParams(lengths=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0), voxel_size=0.1, max_particles=999)


def test_params_caps(unit_params):
    assert unit_params.extents.num_voxels == 1000
    assert unit_params.resample_cap == 10
    assert unit_params.birth_cap == 50


def test_predict_constant_velocity(quiet, rng):
    pool = _pool(quiet, [[0.55, 0.55, 0.55]], velocities=np.array([[1.0, 0.0, 0.0]]))
    predict_particles(pool, quiet, rng)
    assert_allclose(pool.p, [[0.65, 0.55, 0.55]])
    assert pool.voxel_ids[0] == 6 + 10 * 5 + 100 * 5


def test_predict_drops_particles_leaving_extents(quiet, rng):
    pool = _pool(quiet, [[0.95, 0.5, 0.5], [0.5, 0.5, 0.5]], velocities=np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 0.0]]))
    predict_particles(pool, quiet, rng)
    assert pool.count == 1
    assert_allclose(pool.p, [[0.5, 0.5, 0.5]])


def test_predict_matches_sequential(unit_params):
    rng = np.random.default_rng(5)
    n = 2000
    positions = rng.uniform(0.2, 0.8, size=(n, 3))
    velocities = rng.normal(scale=0.1, size=(n, 3))
    weights = rng.random(n)
    pool = _pool(unit_params, positions, velocities, weights)
    predict_particles(pool, unit_params, np.random.default_rng(11))
    slow_p, slow_v, slow_w = sequential_predict(positions, velocities, weights, unit_params, np.random.default_rng(11))
    inside = np.all((slow_p >= 0.0) & (slow_p < 1.0), axis=1)
    assert pool.count == np.count_nonzero(inside)
    assert_array_equal(pool.p, slow_p[inside])
    assert_array_equal(pool.v, slow_v[inside])
    assert_array_equal(pool.w, slow_w[inside])


def test_pyramid_table_empty_pool(unit_params, axis_camera):
    pool = ParticlePool.empty(10)
    table = assign_particles_to_pyramids(pool, axis_camera)
    assert table.num_in_view == 0
    assert np.all(table.counts == 0)


def test_pyramid_table_single_pyramid(unit_params, axis_camera):
    pool = _pool(unit_params, [[0.0, 0.0, 0.5], [0.01, 0.0, 0.6], [0.0, 0.01, 0.7]], cameras=[axis_camera])
    table = assign_particles_to_pyramids(pool, axis_camera)
    center = axis_camera.center_pyramid
    assert table.counts[center] == 3
    assert table.first[center] == 0 and table.last[center] == 2
    assert_array_equal(table.members(center), [0, 1, 2])


def test_pyramid_table_matches_grouping(unit_params, axis_camera, rng):
    pool = _pool(unit_params, rng.uniform(0.0, 1.0, size=(3000, 3)), cameras=[axis_camera])
    table = assign_particles_to_pyramids(pool, axis_camera)
    groups = brute_force_groups(pool.pyramid_ids[:pool.count, 0])
    assert table.num_in_view == sum(len(slots) for slots in groups.values())
    for k in range(axis_camera.num_pyramids):
        assert table.members(k).tolist() == groups.get(k, [])


def test_points_to_pyramids(axis_camera, rng):
    empty = assign_points_to_pyramids(PointCloud.empty(), axis_camera)
    assert np.all(empty.d_max == 0)
    single = assign_points_to_pyramids(PointCloud(np.array([[0.0, 0.0, 2.0]])), axis_camera)
    assert single.d_max[axis_camera.center_pyramid] == pytest.approx(2.0)

    points = rng.uniform([-1.0, -1.0, 0.5], [1.0, 1.0, 3.0], size=(1000, 3))
    binned = assign_points_to_pyramids(PointCloud(points), axis_camera, max_observations=10**6)
    ids = pyramid_index(points, axis_camera)
    dist = np.linalg.norm(points, axis=1)
    for k in range(axis_camera.num_pyramids):
        members = dist[ids == k]
        assert binned.d_max[k] == (members.max() if members.size else 0.0)


def test_points_to_pyramids_keeps_nearest(axis_camera):
    depths = np.array([3.0, 1.0, 2.0, 1.5])
    points = np.column_stack([np.zeros(4), np.zeros(4), depths])
    binned = assign_points_to_pyramids(PointCloud(points), axis_camera, max_observations=2 * axis_camera.num_pyramids)
    assert_allclose(binned.distances_in(axis_camera.center_pyramid), [1.0, 1.5])
    assert binned.d_max[axis_camera.center_pyramid] == pytest.approx(1.5)


def test_update_without_observations_scales_observable(unit_params):
    pool = _pool(unit_params, [[0.5, 0.5, 0.5], [0.2, 0.2, 0.2]], weights=np.array([0.4, 0.2]))
    apply_update(pool, np.zeros((0, 3)), np.array([True, False]), unit_params)
    assert_allclose(pool.w, [0.4 * (1 - unit_params.detection_prob), 0.2])


def test_update_leaves_unobservable_particles(unit_params, axis_camera):
    params = unit_params.model_copy(update={"occlusion_thickness": 5.0})
    cam = axis_camera.with_pose(RigidTransform.look_at((0.1, 0.1, 0.0), (0.1, 0.1, 1.0), up=(0.0, 1.0, 0.0)))
    pool = _pool(params, [[0.1, 0.1, 0.5], [0.9, 0.9, 0.9]], weights=np.array([0.3, 0.3]), cameras=[cam])
    update_weights(pool, PointCloud.empty(), cam, params)
    assert_allclose(pool.w, [0.3 * (1 - params.detection_prob), 0.3])


def test_single_coincident_particle_gets_unit_weight(unit_params):
    params = unit_params.model_copy(update={"detection_prob": 1.0, "clutter": 0.0})
    pool = _pool(params, [[0.5, 0.5, 0.5]], weights=np.array([0.7]))
    apply_update(pool, np.array([[0.5, 0.5, 0.5]]), np.array([True]), params, birth_count=0)
    assert_allclose(pool.w, [1.0], rtol=1e-12)


def test_update_matches_sequential(unit_params):
    rng = np.random.default_rng(3)
    for _ in range(20):
        n = int(rng.integers(1, 300))
        m = int(rng.integers(0, 80))
        positions = rng.random((n, 3))
        weights = rng.random(n)
        points = rng.random((m, 3))
        observable = rng.random(n) < 0.7
        pool = _pool(unit_params, positions, weights=weights)
        apply_update(pool, points, observable, unit_params)
        expected = sequential_phd_update(positions, weights, points, unit_params, observable)
        assert_allclose(pool.w, expected, rtol=1e-9)


def test_sparse_update_matches_dense(unit_params):
    rng = np.random.default_rng(4)
    positions = rng.random((1500, 3))
    weights = rng.random(1500)
    points = rng.random((400, 3))
    mask = np.ones(1500, dtype=bool)
    dense = _pool(unit_params, positions, weights=weights)
    sparse = dense.copy()
    apply_update(dense, points, mask, unit_params)
    sparse_params = unit_params.model_copy(update={"dense_update_limit": 1, "likelihood_cutoff": 0.5})
    apply_update(sparse, points, mask, sparse_params)
    assert_allclose(sparse.w, dense.w, rtol=1e-9)


def test_dual_view_with_blind_second_camera(unit_params, cube_camera):
    params = unit_params.model_copy(update={"occlusion_thickness": 0.3})
    blind = cube_camera.with_pose(RigidTransform.look_at((0.5, 0.5, 3.0), (0.5, 0.5, 5.0), up=(0.0, 1.0, 0.0)))
    rng = np.random.default_rng(8)
    positions = rng.uniform(0.3, 0.7, size=(400, 3))
    cloud = PointCloud(rng.uniform(0.3, 0.7, size=(50, 3)))
    single = _pool(params, positions, cameras=[cube_camera])
    dual = _pool(params, positions, cameras=[cube_camera, blind])
    update_weights(single, cloud, cube_camera, params)
    update_dual_view(dual, cloud, [cube_camera, blind], params)
    assert_array_equal(dual.w, single.w)


def test_dual_view_updates_particle_seen_by_second_camera(unit_params, cube_camera):
    blind = cube_camera.with_pose(RigidTransform.look_at((0.5, 0.5, 3.0), (0.5, 0.5, 5.0), up=(0.0, 1.0, 0.0)))
    side = cube_camera.with_pose(RigidTransform.look_at((-1.0, 0.5, 0.5), (0.0, 0.5, 0.5)))
    params = unit_params.model_copy(update={"occlusion_thickness": 2.0})
    pool = _pool(params, [[0.5, 0.5, 0.5]], weights=np.array([0.5]), cameras=[blind, side])
    update_dual_view(pool, PointCloud.empty(), [blind, side], params)
    assert_allclose(pool.w, [0.5 * (1 - params.detection_prob)])


def test_estimate_two_particles_one_voxel(unit_params):
    pool = _pool(unit_params, [[0.52, 0.52, 0.52], [0.58, 0.52, 0.52]],
                 velocities=np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]), weights=np.array([0.25, 0.25]))
    estimates = estimate_voxels(pool, unit_params, t=1.0)
    assert len(estimates) == 1
    assert estimates.occupancy[0] == pytest.approx(0.5)
    assert_allclose(estimates.velocities[0], [0.5, 0.5, 0.0])
    assert_allclose(estimates.centers[0], [0.55, 0.52, 0.52])
    assert estimates[0].p_occ == pytest.approx(0.5)
    assert len(list(estimates.rows())[0]) == len(VOXEL_CSV_HEADER)


def test_estimate_single_particle_regularized(unit_params):
    pool = _pool(unit_params, [[0.55, 0.55, 0.55]], weights=np.array([0.9]))
    estimates = estimate_voxels(pool, unit_params)
    assert_array_equal(estimates.cov_p[0], 1e-6 * np.eye(3))
    assert_array_equal(estimates.cov_v[0], 1e-6 * np.eye(3))


def test_estimate_below_threshold_is_empty(unit_params):
    pool = _pool(unit_params, [[0.55, 0.55, 0.55]], weights=np.array([0.1]))
    assert len(estimate_voxels(pool, unit_params)) == 0


def test_estimates_are_read_only(unit_params):
    pool = _pool(unit_params, [[0.55, 0.55, 0.55]], weights=np.array([0.9]))
    estimates = estimate_voxels(pool, unit_params)
    with pytest.raises(ValueError):
        estimates.centers[0, 0] = 1.0


def test_estimate_invariants_random(unit_params, rng):
    pool = _pool(unit_params, rng.uniform(0.0, 0.3, size=(3000, 3)), rng.normal(size=(3000, 3)), rng.random(3000))
    estimates = estimate_voxels(pool, unit_params)
    assert len(estimates) > 0
    assert np.all(np.linalg.eigvalsh(estimates.cov_p) >= 1e-6 - 1e-12)
    assert np.all(np.linalg.eigvalsh(estimates.cov_v) >= 1e-6 - 1e-12)
    ids = pool.voxel_ids[:pool.count]
    for k, index in enumerate(estimates.indices):
        members = pool.v[ids == index]
        assert np.all(estimates.velocities[k] >= members.min(axis=0) - 1e-12)
        assert np.all(estimates.velocities[k] <= members.max(axis=0) + 1e-12)


def test_resample_keeps_sparse_voxels(unit_params, rng):
    pool = _pool(unit_params, [[0.55, 0.55, 0.55]], weights=np.array([0.4]))
    before = pool.copy()
    resample(pool, unit_params, rng)
    assert pool.count == 1
    assert_array_equal(pool.p, before.p)
    assert_array_equal(pool.w, before.w)


def test_resample_frequency_matches_weights():
    params = MapParams(lengths=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0), voxel_size=0.1, max_particles=1000)
    assert params.resample_cap == 1
    rng = np.random.default_rng(21)
    first = 0
    trials = 4000
    for _ in range(trials):
        pool = _pool(params, [[0.55, 0.55, 0.55], [0.56, 0.55, 0.55]],
                     velocities=np.array([[1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]), weights=np.array([0.9, 0.1]))
        resample(pool, params, rng)
        assert pool.count == 1
        assert pool.w[0] == pytest.approx(1.0)
        first += pool.v[0, 0] == 1.0
    assert abs(first / trials - 0.9) < 0.025


def test_resample_conserves_voxel_weight(unit_params, rng):
    pool = _pool(unit_params, rng.uniform(0.0, 0.25, size=(4000, 3)), weights=rng.random(4000))
    n_v = unit_params.extents.num_voxels
    before = np.bincount(pool.voxel_ids[:pool.count], weights=pool.w, minlength=n_v)
    counts_before = np.bincount(pool.voxel_ids[:pool.count], minlength=n_v)
    resample(pool, unit_params, rng)
    after = np.bincount(pool.voxel_ids[:pool.count], weights=pool.w, minlength=n_v)
    counts_after = np.bincount(pool.voxel_ids[:pool.count], minlength=n_v)
    assert_allclose(after, before, rtol=1e-12, atol=1e-12)
    assert np.all(counts_after == np.minimum(counts_before, unit_params.resample_cap))


def test_cluster_velocity_single_shift():
    rng = np.random.default_rng(2)
    blob = 0.5 + rng.uniform(-0.02, 0.02, size=(30, 3))
    track = cluster_velocities(PointCloud(blob + [0.01, 0.0, 0.0]), PointCloud(blob), dt=0.1, gate=0.1)
    assert track.num_clusters == 1
    assert_allclose(track.point_velocities, np.tile([0.1, 0.0, 0.0], (30, 1)), atol=1e-12)


def test_cluster_velocity_new_cluster_is_static():
    blob = np.array([[0.5, 0.5, 0.5], [0.51, 0.5, 0.5]])
    track = cluster_velocities(PointCloud(blob), PointCloud(blob + [0.5, 0.0, 0.0]), dt=0.1, gate=0.1)
    assert_array_equal(track.point_velocities, np.zeros((2, 3)))
    assert track.pairs.shape == (0, 2)


def test_cluster_matching_agrees_with_brute_force():
    rng = np.random.default_rng(9)
    anchors = np.array([[0.1, 0.1, 0.1], [0.9, 0.1, 0.1], [0.1, 0.9, 0.1], [0.9, 0.9, 0.9]])
    shifts = rng.uniform(-0.02, 0.02, size=(4, 3))
    previous = np.vstack([a + rng.uniform(-0.01, 0.01, size=(5, 3)) for a in anchors])
    current = previous + np.repeat(shifts, 5, axis=0)
    track = cluster_velocities(PointCloud(current), PointCloud(previous), dt=0.1, gate=0.1)
    assert track.pairs.shape == (4, 2)
    costs = np.linalg.norm(track.centroids[:, None] - track.previous_centroids[None], axis=-1)
    rows, cols, best = brute_force_assignment(costs)
    assert costs[track.pairs[:, 0], track.pairs[:, 1]].sum() == pytest.approx(best)
    assert_allclose(track.point_velocities, np.repeat(shifts, 5, axis=0) / 0.1, atol=1e-9)


def test_spawn_without_observations(unit_params):
    pool = ParticlePool.empty(100)
    assert spawn_newborn(pool, np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0), unit_params) == 0
    assert pool.count == 0


def test_spawn_single_observation_unit_weight(unit_params):
    params = unit_params.model_copy(update={"clutter": 0.0})
    pool = ParticlePool.empty(100)
    z = np.array([[0.5, 0.5, 0.5]])
    c = apply_update(pool, z, np.zeros(0, dtype=bool), params)
    assert spawn_newborn(pool, z, np.zeros((1, 3)), c, params) == 1
    assert_allclose(pool.w, [1.0])
    assert pool.voxel_ids[0] == 555


def test_spawn_respects_birth_cap(unit_params):
    pool = ParticlePool.empty(1000)
    points = 0.55 + np.linspace(0.0, 0.04, 100)[:, None] * np.ones(3)
    births = spawn_newborn(pool, points, np.zeros((100, 3)), np.ones(100), unit_params)
    assert births == unit_params.birth_cap
    assert pool.count == unit_params.birth_cap


def test_spawn_evicts_lowest_weights_when_full(unit_params, rng):
    weights = np.linspace(0.01, 1.0, 20)
    pool = _pool(unit_params, rng.uniform(0.0, 1.0, size=(20, 3)), weights=weights, capacity=20)
    points = np.array([[0.5, 0.5, 0.5], [0.25, 0.25, 0.25]])
    births = spawn_newborn(pool, points, np.zeros((2, 3)), np.full(2, 0.2), unit_params)
    assert pool.count == 20
    assert births == 2
    assert_allclose(np.sort(pool.w), np.sort(np.concatenate([weights[2:], [0.5, 0.5]])))


def test_map_empty_scene_stays_empty(unit_params, axis_camera):
    with DynamicParticleMap(unit_params, [axis_camera], seed=0) as gmap:
        for _ in range(5):
            result = gmap.map_step([PointCloud.empty("camera:camera")])
            assert len(result.estimates) == 0
        assert gmap.pool.count == 0
        assert gmap.t == pytest.approx(0.5)
        assert set(result.timing) == {"preprocess", "predict", "update", "estimate", "resample", "birth", "total"}


def test_map_is_deterministic(unit_params, cube_camera):
    rng = np.random.default_rng(6)
    frames = [PointCloud(rng.uniform([-0.1, -0.1, 1.2], [0.1, 0.1, 1.6], size=(300, 3)), "camera:camera")
              for _ in range(4)]
    pools = []
    for _ in range(2):
        with DynamicParticleMap(unit_params, [cube_camera], seed=42) as gmap:
            for frame in frames:
                gmap.map_step([frame])
            pools.append(gmap.pool)
    assert pools[0].count == pools[1].count > 0
    assert_array_equal(pools[0].p, pools[1].p)
    assert_array_equal(pools[0].w, pools[1].w)


def test_map_static_cloud_builds_occupancy(unit_params, cube_camera):
    params = unit_params.model_copy(update={"filter_size": 0.02})
    surface = np.array([[x, y, 0.8] for x in np.arange(0.41, 0.6, 0.02) for y in np.arange(0.41, 0.6, 0.02)])
    camera_frame = cube_camera.pose.inverse().apply(surface)
    with DynamicParticleMap(params, [cube_camera], seed=1) as gmap:
        for _ in range(10):
            result = gmap.map_step([PointCloud(camera_frame, "camera:camera")])
    assert len(result.estimates) > 0
    best = int(np.argmax(result.estimates.occupancy))
    assert abs(result.estimates.centers[best, 2] - 0.8) < 0.1


def _plane(z, step=0.02):
    return np.array([[x, y, z] for x in np.arange(0.41, 0.6, step) for y in np.arange(0.41, 0.6, step)])


def test_map_static_plane_stays_in_its_voxels(unit_params, cube_camera):
    frame = PointCloud(cube_camera.pose.inverse().apply(_plane(0.85)), "camera:camera")
    with DynamicParticleMap(unit_params, [cube_camera], seed=3) as gmap:
        for _ in range(15):
            result = gmap.map_step([frame])
    estimates = result.estimates
    assert {844, 845, 854, 855} <= set(estimates.indices.tolist())
    assert set((estimates.indices // 100).tolist()) == {8}
    assert np.all(np.linalg.norm(estimates.velocities, axis=1) < 0.1)


def test_map_plane_moving_along_normal_gets_its_velocity(unit_params, cube_camera):
    with DynamicParticleMap(unit_params, [cube_camera], seed=4) as gmap:
        for k in range(12):
            surface = _plane(0.62 + 0.01 * k)
            result = gmap.map_step([PointCloud(cube_camera.pose.inverse().apply(surface), "camera:camera")])
    estimates = result.estimates
    assert len(estimates) > 0
    mean = np.average(estimates.velocities, axis=0, weights=estimates.occupancy)
    assert abs(mean[2] - 0.1) < 0.03


def test_map_step_keeps_indices_consistent(unit_params, cube_camera):
    rng = np.random.default_rng(12)
    with DynamicParticleMap(unit_params, [cube_camera], seed=5) as gmap:
        for _ in range(4):
            cloud = rng.uniform([0.3, 0.3, 0.6], [0.7, 0.7, 0.9], size=(200, 3))
            gmap.map_step([PointCloud(cube_camera.pose.inverse().apply(cloud), "camera:camera")])
        pool = gmap.pool
    assert pool.count > 0
    assert_array_equal(pool.voxel_ids[:pool.count], voxel_index(pool.p, unit_params.extents))
    assert_array_equal(pool.pyramid_ids[:pool.count, 0], pyramid_index(pool.p, cube_camera))


def test_drop_robot_particles(unit_params, planar):
    pool = _pool(unit_params, [[0.2, 0.01, 0.01], [0.5, 0.5, 0.5], [0.3, 0.05, 0.0]])
    dropped = drop_robot_particles(pool, planar, np.zeros(3), 0.06)
    assert dropped == 2
    assert_allclose(pool.p, [[0.5, 0.5, 0.5]])
    assert drop_robot_particles(ParticlePool.empty(4), planar, np.zeros(3), 0.06) == 0


def test_map_step_clears_particles_inside_robot(quiet, planar, axis_camera):
    with DynamicParticleMap(quiet, [axis_camera], seed=0, robot=planar) as gmap:
        gmap.pool = _pool(quiet, [[0.2, 0.01, 0.01], [0.5, 0.5, 0.5]], weights=np.array([0.5, 0.5]),
                          cameras=[axis_camera])
        gmap.map_step([PointCloud.empty("camera:camera")], q=np.zeros(3))
    assert gmap.pool.count == 1
    assert_allclose(gmap.pool.p, [[0.5, 0.5, 0.5]])


def test_preprocess_removes_points_near_robot_surface(unit_params, planar, axis_camera):
    points = np.array([[0.3, 0.075, 0.0], [0.3, 0.3, 0.0]])
    with DynamicParticleMap(unit_params, [axis_camera], seed=0, robot=planar) as gmap:
        cloud = gmap.preprocess([PointCloud(points, "camera:camera")], [axis_camera], q=np.zeros(3))
    assert 0.0 < min_dist_to_robot(planar, np.zeros(3), points[0]) < unit_params.robot_margin
    assert_allclose(cloud.points, [[0.3, 0.3, 0.0]])
