"""Rigid transforms, pinhole intrinsics and projection primitives.

Units are millimetres for lengths and pixels for image coordinates. Pixel
``(i, j)`` is ``(column, row)`` with the origin at the centre of the top-left
pixel.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import BehindCameraError, InvalidInputError


def _quat_mul(a, b):
    # Hamilton product, (x, y, z, w) layout
    ax, ay, az, aw = a
    bx, by, bz, bw = b
    return np.array([
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
        aw * bw - ax * bx - ay * by - az * bz,
    ])


def quat_to_matrix(q):
    x, y, z, w = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(R):
    """Shepperd's method; returns a unit quaternion (x, y, z, w) with w >= 0."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(1.0 + tr)
        q = [(R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s, 0.25 * s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s, (R[2, 1] - R[1, 2]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s, (R[0, 2] - R[2, 0]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s, (R[1, 0] - R[0, 1]) / s]
    q = np.array(q)
    q /= np.linalg.norm(q)
    return q if q[3] >= 0 else -q


def skew(v):
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def so3_exp(omega):
    omega = np.asarray(omega, dtype=float)
    theta = np.linalg.norm(omega)
    W = skew(omega)
    if theta < 1e-8:
        return np.eye(3) + W + 0.5 * W @ W
    return np.eye(3) + np.sin(theta) / theta * W + (1 - np.cos(theta)) / theta**2 * W @ W


def so3_log(R):
    """Rotation vector of ``R`` (radians)."""
    q = matrix_to_quat(R)
    s = np.linalg.norm(q[:3])
    if s < 1e-12:
        return 2.0 * q[:3]
    angle = 2.0 * np.arctan2(s, q[3])
    return q[:3] / s * angle


def rotation_angle(R):
    """Angle of rotation in radians, in [0, pi]."""
    q = matrix_to_quat(R)
    return 2.0 * np.arctan2(np.linalg.norm(q[:3]), abs(q[3]))


@dataclass(frozen=True)
class RigidPose:
    """Element of SE(3): ``x -> R x + t``.

    The rotation is held as a unit quaternion ``(x, y, z, w)`` and renormalised
    on every composition so long pose chains do not drift off the manifold.
    """

    quat: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.0, 1.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.asarray(self.quat, dtype=float).reshape(4)
        n = math.sqrt(q.dot(q))
        if not math.isfinite(n) or n < 1e-12:
            raise InvalidInputError("quaternion must be finite and non-zero")
        q = q / (n if q[3] >= 0 else -n)
        t = np.array(self.translation, dtype=float).reshape(3)
        if not math.isfinite(t.sum()):
            raise InvalidInputError("translation must be finite")
        q.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "quat", q)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_rt(cls, R, t=(0.0, 0.0, 0.0)):
        return cls(matrix_to_quat(R), t)

    @classmethod
    def from_matrix(cls, M):
        M = np.asarray(M, dtype=float)
        return cls.from_rt(M[:3, :3], M[:3, 3])

    @classmethod
    def translate(cls, x, y, z):
        return cls(translation=(x, y, z))

    @classmethod
    def from_axis_angle(cls, axis, angle, t=(0.0, 0.0, 0.0)):
        axis = np.asarray(axis, dtype=float)
        axis = axis / np.linalg.norm(axis)
        return cls(np.append(axis * np.sin(angle / 2), np.cos(angle / 2)), t)

    @classmethod
    def exp(cls, xi):
        """Pose from a twist ``(rho, omega)`` using the first-order coupling used by
        the trackers (rotation ``exp(omega)``, translation ``rho``)."""
        xi = np.asarray(xi, dtype=float)
        return cls.from_rt(so3_exp(xi[3:]), xi[:3])

    @property
    def rotation(self):
        return quat_to_matrix(self.quat)

    @property
    def matrix(self):
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def inverse(self):
        q = self.quat * np.array([-1.0, -1.0, -1.0, 1.0])
        t = -quat_to_matrix(q) @ self.translation
        return RigidPose(q, t)

    def __matmul__(self, other):
        if isinstance(other, RigidPose):
            return compose(self, other)
        return self.apply(other)

    def apply(self, points):
        """Transform a point or an (N, 3) array of points."""
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation

    def rotate(self, vectors):
        return np.asarray(vectors, dtype=float) @ self.rotation.T

    def almost_equal(self, other, tol=1e-9):
        return bool(np.allclose(self.matrix, other.matrix, atol=tol, rtol=0))

    def __eq__(self, other):
        if not isinstance(other, RigidPose):
            return NotImplemented
        return bool(np.array_equal(self.quat, other.quat) and np.array_equal(self.translation, other.translation))

    def __hash__(self):
        return hash((self.quat.tobytes(), self.translation.tobytes()))

    def __repr__(self):
        return f"RigidPose(quat={self.quat.tolist()}, translation={self.translation.tolist()})"


def compose(a: RigidPose, b: RigidPose) -> RigidPose:
    """``a * b``: apply ``b`` first, then ``a``."""
    q = _quat_mul(a.quat, b.quat)
    t = quat_to_matrix(a.quat) @ b.translation + a.translation
    return RigidPose(q, t)


def transform_point(T: RigidPose, v):
    return T.apply(v)


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    baseline: float | None = None

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidInputError("focal lengths must be positive")
        if not (self.width > 0 and self.height > 0):
            raise InvalidInputError("image size must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InvalidInputError("principal point must lie inside the image")
        if self.baseline is not None and not self.baseline > 0:
            raise InvalidInputError("baseline must be positive")

    @property
    def K(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def shape(self):
        return (self.height, self.width)

    def scaled(self, factor):
        """Intrinsics of an image resampled by ``factor`` (0.5 halves the size).

        Keeps the pixel-centre convention: ``c' = (c + 0.5) * factor - 0.5``.
        """
        w = max(1, int(round(self.width * factor)))
        h = max(1, int(round(self.height * factor)))
        cx = min(max((self.cx + 0.5) * factor - 0.5, 0.0), w - 1e-9)
        cy = min(max((self.cy + 0.5) * factor - 0.5, 0.0), h - 1e-9)
        return Intrinsics(self.fx * factor, self.fy * factor, cx, cy, w, h, self.baseline)


def project(v, K: Intrinsics):
    """Project a single camera-frame point to a pixel ``(i, j)``."""
    x, y, z = (float(c) for c in v)
    if not z > 0:
        raise BehindCameraError(f"point has z={z}, must be in front of the camera")
    return np.array([K.fx * x / z + K.cx, K.fy * y / z + K.cy])


def backproject(p, depth, K: Intrinsics):
    depth = float(depth)
    if not (depth > 0 and np.isfinite(depth)):
        raise InvalidInputError(f"depth must be positive, got {depth}")
    i, j = (float(c) for c in p)
    return np.array([(i - K.cx) / K.fx * depth, (j - K.cy) / K.fy * depth, depth])


def project_points(V, K: Intrinsics):
    """Vectorised projection of (N, 3) points; no z check."""
    V = np.asarray(V, dtype=float)
    z = V[:, 2]
    return np.stack([K.fx * V[:, 0] / z + K.cx, K.fy * V[:, 1] / z + K.cy], axis=1)


def backproject_depth(depth, K: Intrinsics):
    """Vertex map (H, W, 3) from a depth raster; invalid pixels give z = 0."""
    depth = np.asarray(depth, dtype=float)
    h, w = depth.shape
    jj, ii = np.mgrid[0:h, 0:w]
    x = (ii - K.cx) / K.fx * depth
    y = (jj - K.cy) / K.fy * depth
    return np.stack([x, y, depth], axis=-1)


def pixel_rays(K: Intrinsics, pixels=None):
    """Unit-depth rays ``K^-1 (i, j, 1)`` for given pixels or the whole image."""
    if pixels is None:
        jj, ii = np.mgrid[0:K.height, 0:K.width]
        pixels = np.stack([ii.ravel(), jj.ravel()], axis=1)
    pixels = np.asarray(pixels, dtype=float)
    return np.stack([(pixels[:, 0] - K.cx) / K.fx, (pixels[:, 1] - K.cy) / K.fy, np.ones(len(pixels))], axis=1)
