import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from scenes import plane_depth, random_pose, sequence
from surfelnav.formats import DepthMap, GrayImage
from surfelnav.fusion import (Association, AssociationThresholds, SurfelMap, associate, compute_normal, compute_radius,
                              create_surfels, fuse, fuse_reference, init_confidence, integrate_frame, normal_map,
                              ray_distance, render_maps, render_model)
from surfelnav.geometry import Intrinsics, RigidPose, backproject_depth, compose

K = Intrinsics(100.0, 100.0, 39.5, 29.5, 80, 60)


def single(pos, normal=(0, 0, -1), conf=1.0, radius=1.0, t=0):
    return SurfelMap(np.array([pos], float), np.array([normal], float), [radius], [conf], [t], [0.5])


# -------------------------------------------------- normals / radius / confidence


@pytest.mark.example
def test_normal_by_hand():
    grid = np.zeros((2, 2, 3))
    grid[0, 0] = (0, 0, 1)
    grid[0, 1] = (1, 0, 1)
    grid[1, 0] = (0, 1, 1)
    grid[1, 1] = (1, 1, 1)
    np.testing.assert_allclose(compute_normal(grid, 0, 0), [0, 0, -1])


@pytest.mark.example
def test_planar_grid_has_one_normal():
    V = backproject_depth(plane_depth(K, 50.0, (0.2, -0.1)), K)
    N, ok = normal_map(V)
    n0 = N[ok][0]
    np.testing.assert_allclose(N[ok], np.broadcast_to(n0, N[ok].shape), atol=1e-9)
    assert compute_normal(V, 3, K.height - 1) is None
    assert compute_normal(V, K.width - 1, 3) is None
    np.testing.assert_allclose(compute_normal(V, 7, 9), n0, atol=1e-12)


@pytest.mark.example
def test_radius_examples():
    assert compute_radius(10, 100, -1) == pytest.approx(0.141421356, abs=1e-8)
    assert compute_radius(10, 100, 0.0, r_max=3.0) == 3.0
    assert compute_radius(10, 100, 1e-12, r_max=3.0) == 3.0
    assert compute_radius(20, 100, -0.5) == pytest.approx(2 * compute_radius(10, 100, -0.5))


@pytest.mark.example
def test_confidence_examples():
    Kc = Intrinsics(100, 100, 40.0, 30.0, 81, 61)
    assert init_confidence((40.0, 30.0), Kc) == 1.0
    assert init_confidence((0.0, 0.0), Kc) == pytest.approx(math.exp(-1 / 0.72), rel=1e-12)
    assert init_confidence((0.0, 0.0), Kc) == pytest.approx(0.2494, abs=1e-4)
    r = np.linspace(0, 60, 50)
    c = init_confidence(np.stack([40 + r, np.full_like(r, 30.0)], axis=1), Kc)
    assert np.all(np.diff(c) < 0)


# -------------------------------------------------- creation


@pytest.mark.example
def test_all_invalid_depth_gives_empty_map():
    assert len(create_surfels(DepthMap(np.zeros((K.height, K.width))), None, K, 0)) == 0


@pytest.mark.example
def test_plane_surfels():
    D = plane_depth(K, 50.0, (0.1, 0.2))
    S = create_surfels(DepthMap(D), None, K, 3)
    assert 0 < len(S) <= (D > 0).sum()
    # depth is stored at float32, which bounds how equal the normals can be
    np.testing.assert_allclose(S.normals, np.broadcast_to(S.normals[0], S.normals.shape), atol=1e-4)
    f = 0.5 * (K.fx + K.fy)
    expected = S.positions[:, 2] * math.sqrt(2) / (f * np.abs(S.normals[:, 2]))
    np.testing.assert_allclose(S.radii, expected, rtol=1e-12)
    assert np.all(S.timestamps == 3)


def test_create_surfels_matches_numpy_route():
    _, Kr, _, frames, _ = sequence("zoom-in", 1, res=160)
    L, _, D = frames[0]
    S = create_surfels(D, L, Kr, 0)
    V = backproject_depth(D.data.astype(float), Kr)
    N, ok = normal_map(V)
    jj, ii = np.nonzero(ok)
    np.testing.assert_array_equal(S.pixels, np.stack([ii, jj], axis=1))
    np.testing.assert_allclose(S.positions, V[jj, ii], rtol=1e-12)
    np.testing.assert_allclose(S.normals, N[jj, ii], atol=1e-12)
    np.testing.assert_allclose(S.confidence, init_confidence(np.stack([ii, jj], axis=1).astype(float), Kr), rtol=1e-12)
    np.testing.assert_allclose(S.intensity, L.data[jj, ii])


def test_radius_clamp_on_grazing_surfels():
    D = plane_depth(K, 50.0, (0.0, 0.0))
    D[:, 40:] = plane_depth(K, 50.0, (3.0, 0.0))[:, 40:]  # a steep facet
    S = create_surfels(DepthMap(np.where(D > 0, D, 0)), None, K, 0)
    assert np.all(np.isfinite(S.radii))
    flat = S.positions[:, 2] * math.sqrt(2) / (100.0 * np.abs(S.normals[:, 2]))
    assert np.all(S.radii <= flat + 1e-12)


# -------------------------------------------------- rendering


@pytest.mark.example
def test_render_single_surfel():
    S = single((0, 0, 10))
    d, idx = render_model(S, RigidPose(), K)
    assert d.data[int(math.floor(K.cy + 0.5)), int(math.floor(K.cx + 0.5))] == 10
    assert (d.data > 0).sum() == 1


@pytest.mark.example
def test_render_zbuffer():
    S = SurfelMap(np.array([[0, 0, 9.0], [0, 0, 5.0]]), np.array([[0, 0, -1.0]] * 2), [1, 1], [1, 1], [0, 0], [0, 0])
    d, idx = render_model(S, RigidPose(), K)
    p = int(math.floor(K.cy + 0.5)), int(math.floor(K.cx + 0.5))
    assert d.data[p] == 5.0
    assert idx[p] == 1


@pytest.mark.example
def test_render_reproduces_created_depth():
    _, Kr, _, frames, _ = sequence("zoom-in", 1, res=160)
    D = frames[0][2]
    S = create_surfels(D, None, Kr, 0)
    d, idx = render_model(S, RigidPose(), Kr)
    ii, jj = S.pixels[:, 0], S.pixels[:, 1]
    assert np.all(idx[jj, ii] == np.arange(len(S)))
    np.testing.assert_allclose(d.data[jj, ii], D.data[jj, ii], atol=1e-4)


# -------------------------------------------------- association


@pytest.mark.example
def test_self_association():
    _, Kr, _, frames, _ = sequence("zoom-in", 1, res=160)
    S = create_surfels(frames[0][2], None, Kr, 0)
    a = associate(S, S.copy(), RigidPose(), Kr)
    assert len(a.unmatched) == 0
    np.testing.assert_array_equal(a.new_idx, a.ref_idx)


@pytest.mark.example
def test_ray_distance_by_hand():
    assert ray_distance((1, 0, 10), (0, 0, 1)) == pytest.approx(1.0)
    assert ray_distance((0, 0, 10), (0, 0, 1)) == 0.0


def test_association_prefers_the_point_nearest_the_ray():
    Kc = Intrinsics(10.0, 10.0, 2.0, 2.0, 6, 5)
    new = SurfelMap(np.array([[0, 0, 10.0]]), np.array([[0, 0, -1.0]]), [1], [1], [0], [0], np.array([[2, 2]]))
    # same depth and normal, lateral offsets 1.5 and 1 mm, on two pixels of the 3x3 window
    ref = SurfelMap(np.array([[-1.5, 0, 10.0], [1, 0, 10.0]]), np.array([[0, 0, -1.0]] * 2), [1, 1], [1, 1], [0, 0], [0, 0])
    a = associate(new, ref, RigidPose(), Kc)
    assert a.pairs == [(0, 1)]
    assert ray_distance(ref.positions[1], new.positions[0]) == pytest.approx(1.0)


@pytest.mark.example
def test_far_reference_is_unmatched():
    th = AssociationThresholds()
    new = SurfelMap(np.array([[0, 0, 10.0]]), np.array([[0, 0, -1.0]]), [1], [1], [0], [0],
                    np.array([[int(math.floor(K.cx + 0.5)), int(math.floor(K.cy + 0.5))]]))
    ref = single((0, 0, 10.0 + 2 * th.gamma_depth))
    a = associate(new, ref, RigidPose(), K, th)
    assert len(a.new_idx) == 0 and a.unmatched.tolist() == [0]


def test_normal_gate():
    new = SurfelMap(np.array([[0, 0, 10.0]]), np.array([[0, 0, -1.0]]), [1], [1], [0], [0],
                    np.array([[int(math.floor(K.cx + 0.5)), int(math.floor(K.cy + 0.5))]]))
    tilted = np.array([0, math.sin(math.radians(40)), -math.cos(math.radians(40))])
    assert len(associate(new, single((0, 0, 10.0), tilted), RigidPose(), K).new_idx) == 0
    tilted = np.array([0, math.sin(math.radians(20)), -math.cos(math.radians(20))])
    assert len(associate(new, single((0, 0, 10.0), tilted), RigidPose(), K).new_idx) == 1


@settings(max_examples=20)
@given(st.integers(0, 10**6))
def test_association_commutes_with_rigid_motion(seed):
    rng = np.random.default_rng(seed)
    _, Kr, traj, frames, _ = _seq()
    S0 = create_surfels(frames[0][2], None, Kr, 0)
    S1 = create_surfels(frames[1][2], None, Kr, 1)
    T1 = compose(traj.poses[1].inverse(), traj.poses[0])
    G = random_pose(rng, 20.0)
    a = associate(S1, S0, T1, Kr)
    b = associate(S1, S0.transformed(G), compose(T1, G.inverse()), Kr)
    assert a.pairs == b.pairs


_SEQ = {}


def _seq():
    if not _SEQ:
        _SEQ["v"] = sequence("follow", 2, res=160)
    return _SEQ["v"]


# -------------------------------------------------- fusion


def _pair_fuse(c_ref, c_t, v_ref, v_t, r_ref=1.0, r_t=1.0):
    ref = single(v_ref, conf=c_ref, radius=r_ref)
    new = SurfelMap(np.array([v_t], float), np.array([[0, 0, -1.0]]), [r_t], [c_t], [1], [0.5], np.array([[0, 0]]))
    return fuse(Association(np.array([0]), np.array([0]), np.zeros(0, np.int64)), new, ref, RigidPose(), 1)


@pytest.mark.example
def test_fuse_midpoint_and_confidence():
    out = _pair_fuse(1, 1, (0, 0, 10), (0, 0, 12))
    np.testing.assert_allclose(out.positions[0], [0, 0, 11])
    assert out.confidence[0] == 2
    assert out.timestamps[0] == 1


@pytest.mark.example
def test_fuse_radius_by_hand():
    out = _pair_fuse(3, 1, (0, 0, 10), (0, 0, 10), r_ref=1, r_t=2)
    assert out.radii[0] == pytest.approx(1.25)


def test_fuse_inserts_unmatched():
    ref = single((0, 0, 10))
    new = SurfelMap(np.array([[1, 2, 3.0]]), np.array([[0, 0, -1.0]]), [1], [0.7], [4], [0.1], np.array([[0, 0]]))
    T = RigidPose.translate(0, 0, 5)
    out = fuse(Association(np.zeros(0, np.int64), np.zeros(0, np.int64), np.array([0])), new, ref, T, 4)
    assert len(out) == 2
    np.testing.assert_allclose(out.positions[1], [1, 2, -2])
    assert out.confidence[1] == 0.7 and out.timestamps[1] == 4


def _random_step(rng, m=60, n=80, many_to_one=True):
    ref = SurfelMap(rng.normal(size=(m, 3)) * 10, _unit(rng.normal(size=(m, 3))), rng.uniform(0.1, 2, m),
                    rng.uniform(0.1, 5, m), np.zeros(m, np.int64), rng.uniform(size=m))
    new = SurfelMap(rng.normal(size=(n, 3)) * 10, _unit(rng.normal(size=(n, 3))), rng.uniform(0.1, 2, n),
                    rng.uniform(0.05, 1, n), np.ones(n, np.int64), rng.uniform(size=n),
                    np.zeros((n, 2), np.int64))
    k = rng.integers(0, n + 1)
    new_idx = rng.choice(n, k, replace=False)
    ref_idx = rng.integers(0, m, k) if many_to_one else rng.choice(m, min(k, m), replace=False)
    new_idx = new_idx[: len(ref_idx)]
    rest = np.setdiff1d(np.arange(n), new_idx)
    return ref, new, Association(np.sort(new_idx), ref_idx[np.argsort(new_idx)], rest)


def _unit(v):
    return v / np.linalg.norm(v, axis=1, keepdims=True)


@settings(max_examples=50)
@given(st.integers(0, 2**31))
def test_fuse_matches_numpy_reference(seed):
    rng = np.random.default_rng(seed)
    ref, new, assoc = _random_step(rng)
    T = random_pose(rng, 5.0)
    expect = fuse_reference(assoc, new, ref, T, 1)
    got = fuse(assoc, new, ref.copy(), T, 1)
    for name in ("positions", "normals", "radii", "confidence", "intensity"):
        np.testing.assert_allclose(getattr(got, name), getattr(expect, name), rtol=1e-10, atol=1e-12)
    np.testing.assert_array_equal(got.timestamps, expect.timestamps)


def check_fusion_step(seed):
    """One randomized fuse step: confidences never drop, fused positions lie on
    the segment between the old and the new point, normals stay unit length."""
    rng = np.random.default_rng(seed)
    ref, new, assoc = _random_step(rng, many_to_one=False)
    T = random_pose(rng, 5.0)
    before = ref.copy()
    out = fuse(assoc, new, ref, T, 1)
    m = len(before)
    assert np.all(out.confidence[:m] >= before.confidence)
    np.testing.assert_allclose(np.linalg.norm(out.normals, axis=1), 1.0, atol=1e-12)
    vt = T.inverse().apply(new.positions[assoc.new_idx])
    v0 = before.positions[assoc.ref_idx]
    v1 = out.positions[assoc.ref_idx]
    # fused point on the segment [v_ref, v_t]
    seg = vt - v0
    lam = np.einsum("ij,ij->i", v1 - v0, seg) / np.maximum(np.einsum("ij,ij->i", seg, seg), 1e-300)
    assert np.all((lam >= -1e-12) & (lam <= 1 + 1e-12))
    np.testing.assert_allclose(v0 + lam[:, None] * seg, v1, atol=1e-9)


@settings(max_examples=100)
@given(st.integers(0, 2**31))
def test_fusion_invariants(seed):
    check_fusion_step(seed)


@pytest.mark.example
def test_integrate_same_frame_twice():
    D = DepthMap(plane_depth(K, 50.0, (0.1, 0.0)))
    S = integrate_frame(SurfelMap(), D, None, K, RigidPose(), 0)
    n0 = len(S)
    assert n0 == len(create_surfels(D, None, K, 0))
    c0 = S.confidence.copy()
    S = integrate_frame(S, D, None, K, RigidPose(), 1)
    assert len(S) == n0
    np.testing.assert_allclose(S.confidence, 2 * c0)


@pytest.mark.example
def test_two_views_of_a_plane():
    # plane z = 60 in the reference frame, viewed from two poses
    Kp = Intrinsics(200, 200, 79.5, 59.5, 160, 120)
    T2 = compose(RigidPose.translate(2.0, -1.0, 0.5), RigidPose.from_axis_angle([0.3, 1, 0], math.radians(3)))
    S = SurfelMap()
    for t, T in enumerate((RigidPose(), T2)):
        # depth of z_ref = 60 seen by camera T (world-to-camera)
        C = T.inverse()
        jj, ii = np.mgrid[0:Kp.height, 0:Kp.width]
        rays = np.stack([(ii - Kp.cx) / Kp.fx, (jj - Kp.cy) / Kp.fy, np.ones_like(ii, float)], -1) @ C.rotation.T
        lam = (60.0 - C.translation[2]) / rays[..., 2]
        S = integrate_frame(S, DepthMap(lam), None, Kp, T, t)
    err = S.positions[:, 2] - 60.0
    assert np.sqrt(np.mean(err**2)) < 0.1
    assert np.any(S.confidence > S.confidence.min() * 1.5)


def test_render_maps_agree_with_render_model():
    _, Kr, traj, frames, _ = _seq()
    S = create_surfels(frames[0][2], None, Kr, 0)
    T = compose(traj.poses[1].inverse(), traj.poses[0])
    d, idx = render_model(S, T, Kr)
    V, N, idx2 = render_maps(S, T, Kr)
    np.testing.assert_array_equal(idx, idx2)
    np.testing.assert_allclose(V[..., 2], d.data, rtol=1e-6)
    ok = idx >= 0
    np.testing.assert_allclose(N[ok], T.rotate(S.normals[idx[ok]]), atol=1e-12)
