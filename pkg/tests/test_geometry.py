import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from surfelnav.errors import BehindCameraError, InvalidInputError
from surfelnav.geometry import (Intrinsics, RigidPose, backproject, compose, matrix_to_quat, project, quat_to_matrix,
                                rotation_angle, so3_exp, so3_log, transform_point)
from surfelnav.tracking import update_global_pose

K100 = Intrinsics(100.0, 100.0, 50.0, 50.0, 101, 101)

finite = st.floats(-100, 100, allow_nan=False)
seeds = st.integers(0, 2**32 - 1)


def rand_pose(seed):
    rng = np.random.default_rng(seed)
    return RigidPose.from_axis_angle(rng.normal(size=3) + 1e-3, rng.uniform(-math.pi, math.pi), rng.normal(size=3) * 20)


# -------------------------------------------------- compose / transform


@pytest.mark.example
def test_identity_compose():
    T = rand_pose(1)
    assert compose(RigidPose(), T).almost_equal(T)


@pytest.mark.example
def test_compose_with_inverse_is_identity():
    T = rand_pose(2)
    assert compose(T, T.inverse()).almost_equal(RigidPose(), 1e-9)


@pytest.mark.example
def test_chained_translation_by_hand():
    T = update_global_pose(RigidPose.translate(0, 1, 0), RigidPose.translate(1, 0, 0))
    np.testing.assert_allclose(T.translation, [1, 1, 0])
    np.testing.assert_allclose(T.rotation, np.eye(3))


@pytest.mark.example
def test_transform_point_examples():
    np.testing.assert_allclose(transform_point(RigidPose(), [1, 2, 3]), [1, 2, 3])
    np.testing.assert_allclose(transform_point(RigidPose.translate(0, 0, 1), [0, 0, 0]), [0, 0, 1])
    Rz = RigidPose.from_axis_angle([0, 0, 1], math.pi / 2)
    np.testing.assert_allclose(transform_point(Rz, [1, 0, 0]), [0, 1, 0], atol=1e-15)


def test_rotation_is_orthonormal():
    for s in range(20):
        R = rand_pose(s).rotation
        assert np.linalg.norm(R.T @ R - np.eye(3)) < 1e-9
        assert abs(np.linalg.det(R) - 1) < 1e-9


def test_pose_rejects_garbage():
    with pytest.raises(InvalidInputError):
        RigidPose([0, 0, 0, 0])
    with pytest.raises(InvalidInputError):
        RigidPose(translation=[np.nan, 0, 0])


def test_pose_is_immutable():
    T = RigidPose.translate(1, 2, 3)
    with pytest.raises(ValueError):
        T.translation[0] = 5


# -------------------------------------------------- camera model


@pytest.mark.example
def test_backproject_examples():
    K = Intrinsics(100.0, 100.0, 50.0, 50.0, 101, 101)
    np.testing.assert_allclose(backproject((K.cx, K.cy), 2, K), [0, 0, 2])
    np.testing.assert_allclose(backproject((150, 50), 2, K100), [2, 0, 2])
    v = np.array([3.0, -1.0, 7.0])
    np.testing.assert_allclose(backproject(project(v, K100), 7.0, K100), v)


@pytest.mark.example
def test_project_examples():
    np.testing.assert_allclose(project((0, 0, 5), K100), [K100.cx, K100.cy])
    np.testing.assert_allclose(project((2, 0, 2), K100), [150, 50])
    with pytest.raises(BehindCameraError):
        project((0, 0, -1), K100)


def test_intrinsics_validation():
    with pytest.raises(InvalidInputError):
        Intrinsics(0, 1, 0, 0, 10, 10)
    with pytest.raises(InvalidInputError):
        Intrinsics(1, 1, 10, 0, 10, 10)


def test_scaled_intrinsics_keep_pixel_centres():
    K = Intrinsics(520, 520, 319.5, 239.5, 640, 480)
    Kh = K.scaled(0.5)
    assert (Kh.width, Kh.height) == (320, 240)
    assert Kh.cx == pytest.approx(159.5)
    assert Kh.fx == 260


# -------------------------------------------------- chains


@pytest.mark.example
def test_telescoping_translations():
    T = RigidPose()
    for _ in range(25):
        T = update_global_pose(T, RigidPose.translate(1, 0, 0))
    np.testing.assert_allclose(T.translation, [25, 0, 0], atol=1e-12)


@pytest.mark.example
def test_closed_rotation_loop():
    T = RigidPose()
    step = RigidPose.from_axis_angle([0, 0, 1], math.radians(1.0))
    for _ in range(360):
        T = update_global_pose(T, step)
    assert np.abs(T.rotation - np.eye(3)).max() < 1e-6


def test_so3_log_exp_round_trip_near_pi():
    w = np.array([0.0, 0.0, math.pi - 1e-7])
    np.testing.assert_allclose(so3_log(so3_exp(w)), w, atol=1e-6)
    assert rotation_angle(so3_exp(w)) == pytest.approx(math.pi - 1e-7, abs=1e-9)


def test_quaternion_matrix_round_trip():
    for s in range(20):
        R = rand_pose(s).rotation
        np.testing.assert_allclose(quat_to_matrix(matrix_to_quat(R)), R, atol=1e-12)


# -------------------------------------------------- properties


@given(finite, finite, st.floats(0.01, 1000))
def test_project_backproject_round_trip(x, y, z):
    v = np.array([x, y, z])
    np.testing.assert_allclose(backproject(project(v, K100), z, K100), v, atol=1e-6)


@given(seeds, seeds, seeds)
def test_compose_associative(a, b, c):
    A, B, C = rand_pose(a), rand_pose(b), rand_pose(c)
    assert compose(compose(A, B), C).almost_equal(compose(A, compose(B, C)), 1e-9)


@given(seeds, st.lists(st.tuples(finite, finite, finite), min_size=2, max_size=10))
def test_transform_preserves_distances(seed, pts):
    P = np.array(pts)
    Q = transform_point(rand_pose(seed), P)
    d0 = np.linalg.norm(P[:, None] - P[None], axis=-1)
    d1 = np.linalg.norm(Q[:, None] - Q[None], axis=-1)
    np.testing.assert_allclose(d1, d0, atol=1e-9)


@given(seeds)
def test_compose_inverse_identity_property(seed):
    T = rand_pose(seed)
    assert compose(T, T.inverse()).almost_equal(RigidPose(), 1e-9)
    assert compose(T.inverse(), T).almost_equal(RigidPose(), 1e-9)
