import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import arc_poses, make_track
from egopoint.errors import (
    DegenerateFit,
    InsufficientInliers,
    TooFewFrames,
    TriangulationFailed,
)
from egopoint.geometry import CameraIntrinsics, invert, project
from egopoint.triangulation import (
    PointTrack,
    TriangulationConfig,
    calibrate_depth_affine,
    filter_epipolar,
    huber,
    ransac_triangulate,
    refine_huber_depth,
    triangulate_object,
    triangulate_point,
)

X = np.array([0.1, -0.05, 0.0])
CFG0 = TriangulationConfig(depth_lambda=0.0)


def in_ref(track, x):
    return invert(track.poses[0]).apply(x)


def test_config_validation():
    with pytest.raises(ValueError):
        TriangulationConfig(epsilon=0)
    with pytest.raises(ValueError):
        TriangulationConfig(ransac_subset_k=1)
    with pytest.raises(ValueError):
        TriangulationConfig(bounds=((-1, 1), (-1, 1), (-1, 1)))
    with pytest.raises(ValueError):
        TriangulationConfig(depth_lambda=-1)


def test_track_validation(k):
    poses = arc_poses(3)
    with pytest.raises(ValueError):
        PointTrack(0, (0, 2, 1), np.zeros((3, 2)), tuple(poses))
    with pytest.raises(ValueError):
        PointTrack(0, (0, 1), np.zeros((3, 2)), tuple(poses))


def test_filter_noiseless_keeps_all(k):
    tr = make_track(X, arc_poses(30), k)
    assert filter_epipolar(tr, k, TriangulationConfig(epsilon=1.0, min_consistent_views=3)) == tr.frames


def test_filter_drops_planted_outliers(k):
    # 50 px displacements perpendicular-ish to the arc's epipolar lines
    tr = make_track(X, arc_poses(30), k, outliers={4: (0, 50), 15: (0, -50), 27: (35, 35)})
    kept = filter_epipolar(tr, k, TriangulationConfig(epsilon=2.0, min_consistent_views=3))
    assert set(tr.frames) - set(kept) == {4, 15, 27}


def test_filter_too_few_frames(k):
    tr = make_track(X, arc_poses(30)[:1], k)
    with pytest.raises(TooFewFrames):
        filter_epipolar(tr, k, CFG0)


def test_filter_skips_degenerate_pairs(k):
    # two identical poses: no pair has a baseline, nothing is consistent
    p = arc_poses(30)[0]
    tr = make_track(X, [p, p, p], k)
    assert filter_epipolar(tr, k, TriangulationConfig(min_consistent_views=1)) == ()


def test_ransac_noiseless_exact(k):
    tr = make_track(X, arc_poses(30), k)
    q = ransac_triangulate(tr, tr.frames, k, CFG0, seed=0)
    np.testing.assert_allclose(q, in_ref(tr, X), atol=1e-6)


def test_ransac_with_outliers_within_5mm(k):
    rng = np.random.default_rng(1)
    tr = make_track(X, arc_poses(30), k, sigma=1.0, seed=1)
    uv = tr.pixels.copy()
    bad = rng.choice(30, 9, replace=False)
    uv[bad] = rng.uniform(0, 1408, (9, 2))
    tr = PointTrack(0, tr.frames, uv, tr.poses)
    res = triangulate_point(tr, k, TriangulationConfig(), seed=3)
    assert np.linalg.norm(res.point - in_ref(tr, X)) < 0.005


def test_ransac_insufficient_inliers(k):
    tr = make_track(X, arc_poses(30), k)
    with pytest.raises(InsufficientInliers):
        ransac_triangulate(tr, tr.frames[:1], k, CFG0)


def test_ransac_deterministic(k):
    tr = make_track(X, arc_poses(30), k, sigma=2.0, seed=4)
    a = ransac_triangulate(tr, tr.frames, k, TriangulationConfig(), seed=9)
    b = ransac_triangulate(tr, tr.frames, k, TriangulationConfig(), seed=9)
    assert np.array_equal(a, b)


def test_huber_values():
    assert huber(1.0, 2.0) == pytest.approx(0.5)
    assert huber(4.0, 2.0) == pytest.approx(6.0)
    assert huber(-4.0, 2.0) == pytest.approx(6.0)


def test_refine_fixed_point(k):
    tr = make_track(X, arc_poses(30), k)
    q = in_ref(tr, X)
    res = refine_huber_depth(q, tr, tr.frames, k, CFG0)
    np.testing.assert_allclose(res.point, q, atol=1e-12)
    assert res.mean_inlier_reproj_error < 1e-9
    assert res.converged


def test_refine_rejects_start_outside_box(k):
    tr = make_track(X, arc_poses(30), k)
    with pytest.raises(ValueError):
        refine_huber_depth(np.array([0.0, 0.0, 5.0]), tr, tr.frames, k, CFG0)


def _laggy_degenerate_track(k, seed, alpha=0.2, sigma=1.0):
    poses = arc_poses(30, lateral=0.001)
    uv = np.array([[0.0, 0.0]] * 30)
    rng = np.random.default_rng(seed)
    x = X + rng.uniform(-0.05, 0.05, 3)
    prev = None
    for i, p in enumerate(poses):
        u = project(k, invert(p).apply(x))
        prev = u if prev is None else alpha * prev + (1 - alpha) * u
        uv[i] = prev + rng.normal(0, sigma, 2)
    return PointTrack(0, tuple(range(30)), uv, tuple(poses)), x


def test_depth_penalty_pulls_closer_on_degenerate_arc(k):
    tr, x = _laggy_degenerate_track(k, 0)
    q0 = in_ref(tr, x)
    z = []
    for lam in (0.0, 0.5):
        cfg = TriangulationConfig(depth_lambda=lam)
        z.append(refine_huber_depth(q0, tr, tr.frames, k, cfg).point[2])
    assert z[1] < z[0]


def test_refine_objective_monotone_and_box(k):
    tr = make_track(X, arc_poses(30), k, sigma=2.0, seed=5)
    cfg = TriangulationConfig()
    start = in_ref(tr, X) + np.array([0.02, -0.02, 0.05])
    from egopoint import kernels
    from egopoint.triangulation import _extrinsics

    rot, trans = _extrinsics(tr, None)
    intr = (k.fx, k.fy, k.cx, k.cy)

    def obj(q):
        return kernels.huber_system(q, rot, trans, tr.pixels, intr, cfg.huber_delta)[0] + cfg.depth_lambda * q[2]

    prev = obj(start)
    for n in range(1, 12):
        res = refine_huber_depth(start, tr, tr.frames, k, cfg.replace(max_refine_iters=n))
        assert res.objective <= prev + 1e-12
        prev = res.objective
        assert np.all(res.point >= cfg.lower) and np.all(res.point <= cfg.upper)
    assert obj(res.point) == pytest.approx(res.objective)


@settings(max_examples=25, deadline=None)
@given(st.floats(0.0, 0.5), st.floats(0.5, 2.0), st.integers(0, 1000))
def test_depth_ordering_in_lambda(l1, l2, seed):
    k = CameraIntrinsics.default()
    tr, x = _laggy_degenerate_track(k, seed)
    q0 = in_ref(tr, x)
    z1 = refine_huber_depth(q0, tr, tr.frames, k, TriangulationConfig(depth_lambda=l1)).point[2]
    z2 = refine_huber_depth(q0, tr, tr.frames, k, TriangulationConfig(depth_lambda=l2)).point[2]
    assert z2 <= z1 + 1e-9


def test_object_noiseless_five_points(k):
    poses = arc_poses(30)
    pts = np.array([X, [0.0, 0.0, 0.05], [-0.1, 0.05, 0.0], [0.05, 0.1, 0.02], [-0.05, -0.1, 0.03]])
    tracks = [make_track(p, poses, k, pid=i) for i, p in enumerate(pts)]
    obj = triangulate_object(tracks, k, CFG0, seed=0)
    np.testing.assert_allclose(obj.points, invert(poses[0]).apply(pts), atol=1e-6)
    assert obj.mean_reproj_error < 1e-6
    assert obj.point_ids == (0, 1, 2, 3, 4)


def test_object_orders_by_point_id(k):
    poses = arc_poses(30)
    tracks = [make_track(X, poses, k, pid=7), make_track(X + 0.05, poses, k, pid=2)]
    obj = triangulate_object(tracks, k, CFG0)
    assert obj.point_ids == (2, 7)
    np.testing.assert_allclose(obj.points[0], invert(poses[0]).apply(X + 0.05), atol=1e-6)


def test_object_errors(k):
    poses = arc_poses(30)
    with pytest.raises(ValueError):
        triangulate_object([], k, CFG0)
    with pytest.raises(ValueError):
        triangulate_object([make_track(X, poses, k, 1), make_track(X, poses, k, 1)], k, CFG0)
    with pytest.raises(ValueError):
        triangulate_object([make_track(X, poses, k, 1), make_track(X, poses[:20], k, 2)], k, CFG0)


def test_object_failure_names_point(k):
    poses = arc_poses(30)
    garbage = PointTrack(4, tuple(range(30)), np.random.default_rng(0).uniform(0, 1408, (30, 2)), tuple(poses))
    with pytest.raises(TriangulationFailed) as e:
        triangulate_object([make_track(X, poses, k, 0), garbage], k, CFG0)
    assert 4 in e.value.failures and "4" in str(e.value)


def test_inlier_coverage(k):
    tr = make_track(X, arc_poses(30), k, sigma=2.0, seed=6)
    res = triangulate_point(tr, k, TriangulationConfig(), seed=0)
    assert len(res.inlier_frames) >= 27


def test_calibrate_examples():
    fit = calibrate_depth_affine([1, 2, 3], [2.1, 4.1, 6.1])
    assert fit.scale == pytest.approx(2.0) and fit.shift == pytest.approx(0.1) and fit.rms < 1e-12
    fit = calibrate_depth_affine([0.5, 0.7, 0.9], [0.5, 0.7, 0.9])
    assert fit.scale == pytest.approx(1.0) and fit.shift == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(DegenerateFit):
        calibrate_depth_affine([1, 1, 1], [1, 2, 3])
