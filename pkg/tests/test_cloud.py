import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from oracles import linear_scan_nn, linear_scan_nn_batch, voxel_hash_centroids, voxel_hash_count
from scan2map.cloud import (
    NearestTracker,
    NoiseSpec,
    PointCloud,
    SpatialIndex,
    add_noise,
    estimate_normals,
    nearest_neighbor,
    radius_crop,
    voxel_downsample,
)
from scan2map.errors import EmptyIndexError, InsufficientPointsError, InvalidArgumentError
from scan2map.rng import Rng
from scan2map.se3 import Pose, se3_exp

coords = hnp.arrays(np.float64, st.tuples(st.integers(1, 40), st.just(3)), elements=st.floats(-5, 5, width=32))


# --- PointCloud ------------------------------------------------------------------


def test_cloud_validation():
    with pytest.raises(InvalidArgumentError):
        PointCloud(np.zeros((3, 2)))
    with pytest.raises(InvalidArgumentError):
        PointCloud([[0, 0, float("nan")]])
    with pytest.raises(InvalidArgumentError):
        PointCloud(np.zeros((2, 3)), normals=np.ones((2, 3)))
    with pytest.raises(InvalidArgumentError):
        PointCloud(np.zeros((2, 3)), normals=np.ones((1, 3)))
    assert len(PointCloud(np.zeros((0, 3)))) == 0
    assert len(PointCloud([])) == 0


def test_cloud_is_immutable():
    c = PointCloud(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        c.points[0, 0] = 1.0
    with pytest.raises(AttributeError):
        c.points = np.ones((2, 3))


def test_cloud_transform_rotates_normals():
    c = PointCloud([[1.0, 0, 0]], normals=[[1.0, 0, 0]])
    p = se3_exp([0, 0, 1, 0, 0, math.pi / 2])
    out = c.transformed(p)
    assert np.allclose(out.normals, [[0, 1, 0]], atol=1e-15)
    assert np.allclose(out.points, p.apply(c.points))


# --- SpatialIndex ------------------------------------------------------------------


def test_single_point_index():
    idx = SpatialIndex(PointCloud([[1.0, 2.0, 3.0]]))
    i, d = nearest_neighbor(idx, np.array([10.0, -4.0, 0.5]))
    assert i == 0 and d == pytest.approx(math.sqrt(81 + 36 + 6.25))


def test_grid_node_query_has_zero_distance():
    g = np.stack(np.meshgrid(*[np.arange(5.0)] * 3, indexing="ij"), -1).reshape(-1, 3)
    idx = SpatialIndex(g)
    for k in (0, 17, 63, 124):
        i, d = idx.nearest(g[k])
        assert i == k and d == 0.0


def test_grid_ties_go_to_lowest_index():
    g = np.stack(np.meshgrid(*[np.arange(4.0)] * 3, indexing="ij"), -1).reshape(-1, 3)
    idx = SpatialIndex(g)
    # equidistant from 8 grid nodes
    q = np.array([[1.5, 1.5, 1.5], [0.5, 2.0, 2.0], [2.5, 0.5, 0.5]])
    got_i, got_d = idx.query(q)
    for k in range(len(q)):
        assert (got_i[k], got_d[k]) == linear_scan_nn(g, q[k])


def test_duplicate_points_tie_to_lowest_index():
    pts = np.array([[1.0, 1, 1], [0, 0, 0], [1, 1, 1], [1, 1, 1]])
    i, d = SpatialIndex(pts).nearest(np.array([1.0, 1, 1.1]))
    assert i == 0


def test_index_matches_linear_scan_exhaustive():
    rng = np.random.default_rng(0)
    pts = rng.uniform(-10, 10, (1000, 3))
    q = rng.uniform(-12, 12, (1000, 3))
    got_i, got_d = SpatialIndex(pts).query(q)
    ref_i, ref_d = linear_scan_nn_batch(pts, q)
    assert np.array_equal(got_i, ref_i)
    assert np.array_equal(got_d, ref_d)


@given(coords, coords)
def test_index_matches_linear_scan_property(pts, q):
    # float32-representable coordinates make exact ties common
    pts = np.round(pts, 1)
    q = np.round(q, 1)
    got_i, got_d = SpatialIndex(pts).query(q)
    ref_i, ref_d = linear_scan_nn_batch(pts, q)
    assert np.array_equal(got_i, ref_i)
    assert np.array_equal(got_d, ref_d)


def test_bounded_query_marks_misses():
    pts = np.array([[0.0, 0, 0], [5.0, 0, 0]])
    i, d = SpatialIndex(pts).query(np.array([[0.5, 0, 0], [2.5, 0, 0], [0.7, 0, 0]]), max_distance=0.7)
    assert list(i) == [0, -1, 0]
    assert d[0] == 0.5 and math.isinf(d[1]) and d[2] == pytest.approx(0.7)


@given(
    hnp.arrays(np.float64, (60, 3), elements=st.floats(-3, 3, width=32)),
    hnp.arrays(np.float64, (25, 3), elements=st.floats(-3, 3, width=32)),
    st.lists(hnp.arrays(np.float64, (25, 3), elements=st.floats(-0.05, 0.05)), min_size=1, max_size=6),
    st.sampled_from([None, 0.4, 1.5]),
)
def test_tracker_matches_fresh_queries(pts, start, steps, bound):
    pts, q = np.round(pts, 1), np.round(start, 1)
    index = SpatialIndex(pts)
    tracker = NearestTracker(index, bound)
    for step in [np.zeros_like(q), *steps]:
        q = q + step
        got_i, got_d = tracker.query(q)
        want_i, want_d = index.query(q, bound)
        assert np.array_equal(got_i, want_i)
        assert np.array_equal(got_d, want_d)


def test_tracker_skips_search_for_small_moves_and_resets_on_size_change():
    rng = np.random.default_rng(3)
    index = SpatialIndex(rng.uniform(0, 10, (2000, 3)))
    q = rng.uniform(0, 10, (300, 3))
    tracker = NearestTracker(index, 0.7)
    tracker.query(q)
    assert tracker.searched == 300
    tracker.query(q + 1e-7)
    assert tracker.searched < 330
    tracker.query(q[:10])
    assert tracker.searched < 340 and np.array_equal(tracker.query(q[:10])[0], index.query(q[:10], 0.7)[0])


def test_tracker_handles_ties_and_misses():
    index = SpatialIndex(np.array([[0.0, 0, 0], [1.0, 0, 0], [9.0, 0, 0]]))
    tracker = NearestTracker(index, 1.0)
    q = np.array([[0.5, 0, 0], [5.0, 0, 0]])
    for _ in range(3):
        i, d = tracker.query(q)
        assert list(i) == [0, -1] and d[0] == 0.5 and math.isinf(d[1])
    assert tracker.searched == 6


def test_empty_index_raises():
    idx = SpatialIndex(PointCloud(np.zeros((0, 3))))
    with pytest.raises(EmptyIndexError):
        idx.nearest(np.zeros(3))


def test_within_matches_brute_force_and_includes_boundary():
    pts = np.array([[3.0, 0, 0], [0, 4.0, 0], [0, 0, 5.0], [0.1, 0.1, 0.1]])
    assert list(SpatialIndex(pts).within(np.zeros(3), 4.0)) == [0, 1, 3]
    rng = np.random.default_rng(1)
    pts = rng.uniform(-50, 50, (5000, 3))
    c = np.array([3.0, -2.0, 1.0])
    ref = np.flatnonzero(np.sum((pts - c) ** 2, axis=1) <= 35.0**2)
    assert np.array_equal(SpatialIndex(pts).within(c, 35.0), ref)


# --- voxel filter --------------------------------------------------------------------


def test_voxel_empty_and_bad_size():
    assert len(voxel_downsample(PointCloud(np.zeros((0, 3))), 0.1)) == 0
    with pytest.raises(InvalidArgumentError):
        voxel_downsample(PointCloud(np.zeros((1, 3))), 0.0)


def test_voxel_two_close_points_merge_to_midpoint():
    out = voxel_downsample(PointCloud([[0.02, 0.02, 0.02], [0.03, 0.02, 0.02]]), 0.1)
    assert len(out) == 1
    assert np.allclose(out.points[0], [0.025, 0.02, 0.02], atol=1e-15)


def test_voxel_count_matches_hash_oracle():
    pts = np.random.default_rng(2).uniform(0, 1, (10_000, 3))
    out = voxel_downsample(PointCloud(pts), 0.1)
    assert len(out) == voxel_hash_count(pts, 0.1)
    ref = voxel_hash_centroids(pts, 0.1)
    got = {tuple(np.floor(p / 0.1).astype(int)): p for p in out.points}
    assert got.keys() == ref.keys()
    assert max(np.max(np.abs(got[k] - ref[k])) for k in ref) < 1e-12


def test_voxel_boundary_goes_to_higher_cell():
    out = voxel_downsample(PointCloud([[0.5, 0.0, 0.0], [0.45, 0.0, 0.0], [0.55, 0.0, 0.0]]), 0.5)
    assert len(out) == 2
    assert np.allclose(sorted(out.points[:, 0]), [0.45, 0.525])


@given(coords, st.floats(0.05, 2.0))
def test_voxel_properties(pts, v):
    c = PointCloud(pts)
    once = voxel_downsample(c, v)
    assert len(once) <= len(c)
    assert len(voxel_downsample(once, v)) == len(once)
    d = np.sqrt(np.min(np.sum((once.points[:, None] - pts[None]) ** 2, axis=2), axis=1))
    assert np.all(d <= v * math.sqrt(3) / 2 + 1e-9)


# --- radius crop ----------------------------------------------------------------------


def test_radius_crop_trivial_cases():
    pts = np.random.default_rng(3).uniform(-1, 1, (100, 3))
    c = PointCloud(pts)
    assert np.array_equal(radius_crop(c, np.zeros(3), 10.0).points, pts)
    assert len(radius_crop(c, np.array([100.0, 0, 0]), 5.0)) == 0
    with pytest.raises(InvalidArgumentError):
        radius_crop(c, np.zeros(3), 0.0)


def test_radius_crop_matches_brute_force_with_and_without_index():
    pts = np.random.default_rng(4).uniform(-60, 60, (20_000, 3))
    c = PointCloud(pts)
    center = np.array([1.0, 2.0, 0.5])
    ref = pts[np.linalg.norm(pts - center, axis=1) <= 35.0]
    assert np.array_equal(radius_crop(c, center, 35.0).points, ref)
    assert np.array_equal(radius_crop(c, center, 35.0, SpatialIndex(c)).points, ref)


@given(coords, st.floats(0.1, 8.0))
def test_radius_crop_is_subset(pts, r):
    out = radius_crop(PointCloud(pts), np.zeros(3), r)
    rows = {tuple(p) for p in pts}
    assert all(tuple(p) in rows for p in out.points)


# --- noise ------------------------------------------------------------------------


def test_zero_noise_is_identity():
    pts = np.random.default_rng(5).normal(size=(50, 3))
    assert np.array_equal(add_noise(PointCloud(pts), NoiseSpec(0.0)).points, pts)


def test_noise_std_within_two_percent():
    pts = np.zeros((100_000, 3))
    noisy = add_noise(PointCloud(pts), NoiseSpec(0.1, seed=3)).points
    std = noisy.std(axis=0)
    assert np.all(np.abs(std / 0.1 - 1) < 0.02), std


def test_noise_deterministic_per_seed():
    c = PointCloud(np.ones((10, 3)))
    assert np.array_equal(add_noise(c, NoiseSpec(0.1, 4)).points, add_noise(c, NoiseSpec(0.1, 4)).points)
    assert np.array_equal(add_noise(c, NoiseSpec(0.1), Rng(4)).points, add_noise(c, NoiseSpec(0.1, 4)).points)
    assert not np.array_equal(add_noise(c, NoiseSpec(0.1, 4)).points, add_noise(c, NoiseSpec(0.1, 5)).points)


def test_noise_spec_rejects_negative():
    with pytest.raises(InvalidArgumentError):
        NoiseSpec(-0.1)


# --- normals ------------------------------------------------------------------------


def test_plane_normals_point_up():
    rng = np.random.default_rng(6)
    pts = np.column_stack([rng.uniform(-2, 2, 500), rng.uniform(-2, 2, 500), np.zeros(500)])
    n = estimate_normals(PointCloud(pts), viewpoint=(0, 0, 5)).normals
    assert np.max(np.abs(n - [0, 0, 1])) < 1e-3


def test_sphere_normals_point_inward():
    rng = np.random.default_rng(7)
    v = rng.normal(size=(3000, 3))
    pts = 2.0 * v / np.linalg.norm(v, axis=1, keepdims=True)
    n = estimate_normals(PointCloud(pts), viewpoint=(0, 0, 0)).normals
    inward = -pts / 2.0
    ang = np.degrees(np.arccos(np.clip(np.sum(n * inward, axis=1), -1, 1)))
    assert ang.max() < 5.0


def test_collinear_neighbourhood_normal_is_perpendicular_and_faces_viewpoint():
    pts = np.column_stack([np.linspace(0, 1, 20), np.zeros(20), np.zeros(20)])
    out = estimate_normals(PointCloud(pts), k=5, viewpoint=(0.5, 3.0, 0.0))
    assert np.max(np.abs(out.normals[:, 0])) < 1e-9
    view = np.array([0.5, 3.0, 0.0]) - pts
    assert np.all(np.sum(out.normals * view, axis=1) >= 0)


def test_normals_need_k_plus_one_points():
    with pytest.raises(InsufficientPointsError):
        estimate_normals(PointCloud(np.zeros((10, 3))), k=10)
    with pytest.raises(InvalidArgumentError):
        estimate_normals(PointCloud(np.zeros((10, 3))), k=2)


@given(hnp.arrays(np.float64, (30, 3), elements=st.floats(-3, 3)), hnp.arrays(np.float64, 3, elements=st.floats(-5, 5)))
def test_normals_unit_and_viewpoint_consistent(pts, view):
    out = estimate_normals(PointCloud(pts), k=5, viewpoint=view)
    assert np.allclose(np.linalg.norm(out.normals, axis=1), 1.0, atol=1e-9)
    assert np.all(np.sum(out.normals * (view - pts), axis=1) >= 0)


def test_pose_apply_moves_cloud():
    c = PointCloud([[1.0, 2.0, 3.0]])
    assert np.array_equal(c.transformed(Pose.from_translation([1, 1, 1])).points, [[2.0, 3.0, 4.0]])
