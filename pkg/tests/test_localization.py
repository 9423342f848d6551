import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from scenes import localization_fixture, random_pose
from surfelnav.errors import InvalidInputError, LocalizationFailure
from surfelnav.formats import GrayImage
from surfelnav.fusion import SurfelMap
from surfelnav.geometry import Intrinsics, RigidPose, compose, rotation_angle
from surfelnav.localization import (FeatureParams, LocalizationConfig, build_global_map, cluster_by_covisibility,
                                    compute_global_descriptor, detect_local_features, hamming_matrix, localize,
                                    localize_detailed, match_features, retrieve_nearest, solve_pnp_ransac)
from surfelnav.mapping import GlobalMap, Keyframe
from surfelnav.synth import SceneSpec, default_intrinsics, generate_scene, render_view


@pytest.fixture(scope="module")
def small_map():
    return localization_fixture(320, kinds=("zoom-in", "follow"), counts=(10, 10), queries=(1, 5))


def pose_error(est, true):
    d = compose(est.inverse(), true)
    return float(np.linalg.norm(d.translation)), math.degrees(rotation_angle(d.rotation))


# -------------------------------------------------- global descriptor and retrieval


@pytest.mark.example
def test_descriptor_determinism_and_norm():
    rng = np.random.default_rng(0)
    img = rng.uniform(size=(60, 80))
    a, b = compute_global_descriptor(img), compute_global_descriptor(img.copy())
    np.testing.assert_array_equal(a, b)
    assert a.shape == (128,)
    assert np.linalg.norm(a) == pytest.approx(1.0, abs=1e-6)
    assert np.linalg.norm(compute_global_descriptor(np.full((30, 30), 0.3))) == pytest.approx(1.0, abs=1e-6)


@pytest.mark.example
def test_descriptor_continuity_on_sweep():
    from surfelnav.synth import TrajectorySpec, generate_trajectory

    scene = generate_scene(SceneSpec(seed=1))
    K = default_intrinsics(160, 120)
    traj = generate_trajectory(TrajectorySpec("follow", 60, amplitude=30, seed=0), scene)
    d = [compute_global_descriptor(render_view(scene, traj.poses[k], K)[1]) for k in (0, 1, 55)]
    assert np.linalg.norm(d[0] - d[1]) < np.linalg.norm(d[0] - d[2])


def db(descs):
    return GlobalMap([Keyframe(i, RigidPose(), np.zeros((0, 2)), [], d) for i, d in enumerate(descs)], np.zeros((0, 3)))


@pytest.mark.example
def test_retrieval_examples():
    rng = np.random.default_rng(1)
    descs = [x / np.linalg.norm(x) for x in rng.normal(size=(8, 128))]
    m = db(descs)
    top = retrieve_nearest(descs[3], m, 3)
    assert top[0][0].id == 3 and top[0][1] == pytest.approx(0.0, abs=1e-6)
    assert len(retrieve_nearest(descs[0], m, 50)) == 8
    with pytest.raises(InvalidInputError):
        retrieve_nearest(descs[0], m, 0)


@settings(max_examples=50)
@given(st.integers(0, 2**31), st.integers(1, 12))
def test_retrieval_matches_brute_force(seed, k):
    rng = np.random.default_rng(seed)
    descs = [x / np.linalg.norm(x) for x in rng.normal(size=(10, 128)).astype(np.float32)]
    q = rng.normal(size=128)
    got = retrieve_nearest(q, db(descs), k)
    dist = [float(np.linalg.norm(np.float64(d) - q)) for d in descs]
    expect = sorted(range(10), key=lambda i: (dist[i], i))[:k]
    assert [kf.id for kf, _ in got] == expect


def kf(i, ids):
    return Keyframe(i, RigidPose(), np.zeros((len(ids), 2)), ids, np.ones(1))


@pytest.mark.example
def test_clusters_two_groups():
    a, b = np.arange(0, 20), np.arange(100, 120)
    kfs = [kf(0, a), kf(1, b), kf(2, a + 5), kf(3, b + 3), kf(4, a + 2)]
    clusters = cluster_by_covisibility(kfs, min_shared=10)
    assert [len(c) for c in clusters] == [3, 2]
    assert [k.id for k in clusters[0]] == [0, 2, 4]


@pytest.mark.example
def test_clusters_single_and_singletons():
    kfs = [kf(i, [7, 10 * i + 20]) for i in range(4)]
    assert [len(c) for c in cluster_by_covisibility(kfs, min_shared=1)] == [4]
    assert [len(c) for c in cluster_by_covisibility(kfs, min_shared=math.inf)] == [1, 1, 1, 1]


@settings(max_examples=50)
@given(st.integers(0, 2**31), st.integers(1, 8))
def test_clusters_partition(seed, min_shared):
    rng = np.random.default_rng(seed)
    kfs = [kf(i, rng.choice(40, rng.integers(0, 30), replace=False)) for i in range(int(rng.integers(1, 9)))]
    clusters = cluster_by_covisibility(kfs, min_shared=min_shared)
    ids = sorted(k.id for c in clusters for k in c)
    assert ids == list(range(len(kfs)))
    assert [len(c) for c in clusters] == sorted((len(c) for c in clusters), reverse=True)


# -------------------------------------------------- local features


def checkerboard(h=120, w=160, s=16):
    jj, ii = np.mgrid[0:h, 0:w]
    return ((ii // s + jj // s) % 2).astype(float)


@pytest.mark.example
def test_constant_image_has_no_features():
    assert len(detect_local_features(np.full((80, 80), 0.5))) == 0


@pytest.mark.example
def test_checkerboard_corners():
    s = 16
    feats = detect_local_features(checkerboard(s=s))
    assert len(feats) > 10
    # intersections lie between pixel s-1 and s, at coordinate k*s - 0.5
    grid = (feats.keypoints + 0.5) / s
    assert np.abs(grid - np.round(grid)).max() * s < 1.0


@pytest.mark.example
def test_features_deterministic():
    img = checkerboard() * 0.5 + 0.5 * np.random.default_rng(0).uniform(size=(120, 160))
    a, b = detect_local_features(img), detect_local_features(img)
    np.testing.assert_array_equal(a.keypoints, b.keypoints)
    np.testing.assert_array_equal(a.descriptors, b.descriptors)
    assert a.descriptors.shape[1] * 8 == 256


@pytest.mark.example
def test_matching_examples():
    rng = np.random.default_rng(2)
    img = np.clip(rng.uniform(size=(120, 160)), 0, 1)
    from scipy.ndimage import gaussian_filter

    feats = detect_local_features(gaussian_filter(img, 1.5))
    pairs = match_features(feats, feats)
    np.testing.assert_array_equal(pairs[:, 0], pairs[:, 1])
    assert len(pairs) == len(feats)
    assert len(match_features(feats, [])) == 0
    with pytest.raises(InvalidInputError):
        match_features(feats, feats, ratio=0.0)
    H = hamming_matrix(feats.descriptors[:3], feats.descriptors[:3])
    np.testing.assert_array_equal(np.diag(H), 0)


@pytest.mark.example
def test_rendered_pair_matches_are_correct():
    scene = generate_scene(SceneSpec(seed=1))
    K = default_intrinsics(320, 240)
    from surfelnav.synth import LOOK_DOWN

    P0 = RigidPose.from_rt(LOOK_DOWN, (0, 0, 70.0))
    P1 = compose(P0, RigidPose.from_axis_angle([0, 0, 1], math.radians(4), (3.0, -2.0, 2.0)))
    d0, i0 = render_view(scene, P0, K)
    _, i1 = render_view(scene, P1, K)
    f0, f1 = detect_local_features(i0), detect_local_features(i1)
    pairs = match_features(f0, f1)
    assert len(pairs) > 30
    uv = f0.keypoints[pairs[:, 0]]
    z = np.array([d0[int(round(v)), int(round(u))] for u, v in uv])
    Xc = np.c_[(uv[:, 0] - K.cx) / K.fx * z, (uv[:, 1] - K.cy) / K.fy * z, z]
    q = compose(P1.inverse(), P0).apply(Xc)
    proj = np.c_[K.fx * q[:, 0] / q[:, 2] + K.cx, K.fy * q[:, 1] / q[:, 2] + K.cy]
    err = np.linalg.norm(proj - f1.keypoints[pairs[:, 1]], axis=1)
    assert np.mean(err < 2.0) >= 0.7


# -------------------------------------------------- PnP


def pnp_fixture(seed, n=100, n_out=0, inlier_px=3.0):
    """Exact projections from a known camera; the last ``n_out`` pixels are
    replaced by uniform random pixels at least ``inlier_px`` from the true one."""
    K = default_intrinsics()
    rng = np.random.default_rng(seed)
    pose = RigidPose.exp(np.r_[rng.normal(0, 5, 3), rng.normal(0, 0.2, 3)])
    uv = np.c_[rng.uniform(0, K.width, n), rng.uniform(0, K.height, n)]
    z = rng.uniform(50, 100, n)
    X = pose.apply(np.c_[(uv[:, 0] - K.cx) / K.fx * z, (uv[:, 1] - K.cy) / K.fy * z, z])
    noisy = uv.copy()
    for k in range(n - n_out, n):
        while np.linalg.norm(noisy[k] - uv[k]) <= inlier_px:
            noisy[k] = rng.uniform(0, K.width), rng.uniform(0, K.height)
    return K, pose, X, noisy


def pnp_outlier_trials(n_trials=100):
    """(failures, worst translation error, inlier sets that differ from the 70)."""
    fails, worst, wrong = 0, 0.0, 0
    for s in range(n_trials):
        K, pose, X, uv = pnp_fixture(s, 100, 30)
        try:
            res = solve_pnp_ransac(X, uv, K, seed=s)
        except LocalizationFailure:
            fails += 1
            continue
        worst = max(worst, pose_error(res.pose, pose)[0])
        wrong += set(res.inliers.tolist()) != set(range(70))
    return fails, worst, wrong


@pytest.mark.example
def test_pnp_exact():
    K, pose, X, uv = pnp_fixture(0)
    res = solve_pnp_ransac(X, uv, K)
    t, r = pose_error(res.pose, pose)
    assert t < 1e-3 and r < 1e-3
    assert res.rmse < 1e-6
    assert len(res.inliers) == 100


@pytest.mark.example
def test_pnp_outliers_small():
    fails, worst, wrong = pnp_outlier_trials(10)
    assert fails == 0 and wrong == 0 and worst < 1e-2


@pytest.mark.example
def test_pnp_collinear_fails():
    K = default_intrinsics()
    X = np.c_[np.linspace(0, 10, 20), np.zeros(20), np.full(20, 80.0)]
    uv = np.c_[np.linspace(0, 100, 20), np.zeros(20)]
    with pytest.raises(LocalizationFailure):
        solve_pnp_ransac(X, uv, K)


def test_pnp_too_few():
    K = default_intrinsics()
    with pytest.raises(LocalizationFailure):
        solve_pnp_ransac(np.ones((3, 3)), np.ones((3, 2)), K)


# -------------------------------------------------- map building


@pytest.mark.example
def test_single_surfel_map():
    K = Intrinsics(100, 100, 20, 15, 41, 31)
    smap = SurfelMap(np.array([[0, 0, 50.0]]), np.array([[0, 0, -1.0]]), [2.0], [1.0], [0], [0.5], [[20, 15]])
    gm = build_global_map([np.full((31, 41), 0.5)], [RigidPose()], smap, K, stride=1)
    assert len(gm.keyframes) == 1
    k = gm.keyframes[0]
    assert len(k.keypoints) == 1
    np.testing.assert_allclose(k.keypoints[0], [K.cx, K.cy], atol=1e-9)
    # the same surfel behind the camera is not stored
    behind = build_global_map([np.full((31, 41), 0.5)], [RigidPose.translate(0, 0, 100)], smap, K, stride=1)
    assert len(behind.keyframes[0].keypoints) == 0


def test_empty_reconstruction():
    with pytest.raises(InvalidInputError):
        build_global_map([], [], SurfelMap(), default_intrinsics())


@pytest.mark.example
def test_map_structure_and_projection(small_map):
    scene, K, gm, kf_img, kf_pose, q_img, q_pose = small_map
    gm.validate()
    assert len(gm.keyframes) == len(kf_img)
    for k in gm.keyframes:
        assert abs(np.linalg.norm(k.global_descriptor) - 1) < 1e-6
        Xc = k.pose.inverse().apply(gm.points[k.point_ids])
        assert (Xc[:, 2] > 0).all()
        uv = np.c_[K.fx * Xc[:, 0] / Xc[:, 2] + K.cx, K.fy * Xc[:, 1] / Xc[:, 2] + K.cy]
        assert np.abs(uv - k.keypoints).max() < 0.5


def test_stride():
    K = Intrinsics(100, 100, 20, 15, 41, 31)
    smap = SurfelMap(np.array([[0, 0, 50.0]]), np.array([[0, 0, -1.0]]), [2.0], [1.0], [0], [0.5], [[20, 15]])
    gm = build_global_map([np.full((31, 41), 0.5)] * 11, [RigidPose()] * 11, smap, K, stride=5)
    assert [k.id for k in gm.keyframes] == [0, 5, 10]


# -------------------------------------------------- localize


@pytest.mark.example
def test_revisit(small_map):
    scene, K, gm, kf_img, kf_pose, q_img, q_pose = small_map
    est = localize(kf_img[3], gm, K)
    t, r = pose_error(est, kf_pose[3])
    assert t < 1e-3 and r < 1e-3


@pytest.mark.example
def test_novel_views(small_map):
    scene, K, gm, kf_img, kf_pose, q_img, q_pose = small_map
    for im, p in zip(q_img, q_pose):
        t, r = pose_error(localize(im, gm, K), p)
        assert t < 0.01 * scene.diameter and r < 2.0


@pytest.mark.example
def test_noise_image_fails(small_map):
    scene, K, gm, *_ = small_map
    noise = GrayImage(np.random.default_rng(0).uniform(size=(K.height, K.width)))
    with pytest.raises(LocalizationFailure):
        localize(noise, gm, K)


def test_localize_deterministic(small_map):
    scene, K, gm, kf_img, kf_pose, q_img, q_pose = small_map
    a = localize_detailed(q_img[0], gm, K, LocalizationConfig(seed=7))
    b = localize_detailed(q_img[0], gm, K, LocalizationConfig(seed=7))
    assert a.pose == b.pose and a.inliers == b.inliers
