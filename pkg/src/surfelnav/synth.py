"""Procedural ground-truth scenes: textured heightfields, stereo rendering and
camera trajectories.

World frame: the base plane is ``z = 0`` and the surface is ``z = h(x, y)``;
cameras sit above it (positive z) looking down. Poses handed to
:func:`render_frame` and returned by :func:`generate_trajectory` are camera
poses (camera-to-world).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .errors import InvalidInputError
from .formats import DepthMap, GrayImage, Trajectory
from .geometry import Intrinsics, RigidPose

# camera looking down -z with image rows running along -y
LOOK_DOWN = np.diag([1.0, -1.0, -1.0])

_TABLE = 256


@dataclass(frozen=True)
class SceneSpec:
    extent: float = 100.0
    n_bumps: int = 12
    bump_amplitude: float = 4.0
    bump_sigma: tuple = (6.0, 16.0)
    texture_contrast: float = 1.0
    texture_cell: float = 0.5
    octaves: int = 4
    light: tuple = (0.3, -0.25, 1.0)
    ambient: float = 0.35
    seed: int = 0


@dataclass
class Scene:
    spec: SceneSpec
    bumps: np.ndarray  # (n, 4): cx, cy, amplitude, sigma
    tables: np.ndarray  # (octaves, T, T) lattice values in [-1, 1]
    light: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))

    @property
    def diameter(self):
        return self.spec.extent

    def height(self, x, y):
        x = np.asarray(x, float)
        y = np.asarray(y, float)
        z = np.zeros(np.broadcast(x, y).shape)
        for bx, by, a, s in self.bumps:
            z = z + a * np.exp(-((x - bx) ** 2 + (y - by) ** 2) / (2 * s * s))
        return z

    def gradient(self, x, y):
        x = np.asarray(x, float)
        y = np.asarray(y, float)
        gx = np.zeros(np.broadcast(x, y).shape)
        gy = np.zeros_like(gx)
        for bx, by, a, s in self.bumps:
            e = a * np.exp(-((x - bx) ** 2 + (y - by) ** 2) / (2 * s * s))
            gx = gx - e * (x - bx) / (s * s)
            gy = gy - e * (y - by) / (s * s)
        return gx, gy

    def normals(self, x, y):
        """Unit normals pointing up (towards the cameras)."""
        gx, gy = self.gradient(x, y)
        n = np.stack([-gx, -gy, np.ones_like(gx)], axis=-1)
        return n / np.linalg.norm(n, axis=-1, keepdims=True)

    def albedo(self, x, y):
        x = np.asarray(x, float).ravel()
        y = np.asarray(y, float).ravel()
        return _albedo_many(x, y, self.tables, self.spec.texture_cell, self.spec.texture_contrast)

    def sample_cloud(self, spacing=0.25, bounds=None):
        """Grid samples of the surface; ``bounds = (xmin, xmax, ymin, ymax)``."""
        half = self.spec.extent / 2
        xmin, xmax, ymin, ymax = bounds if bounds is not None else (-half, half, -half, half)
        xs = np.arange(xmin, xmax + 1e-9, spacing)
        ys = np.arange(ymin, ymax + 1e-9, spacing)
        X, Y = np.meshgrid(xs, ys)
        X = X.ravel()
        Y = Y.ravel()
        return np.stack([X, Y, self.height(X, Y)], axis=1)


def generate_scene(spec: SceneSpec = SceneSpec()) -> Scene:
    rng = np.random.default_rng(spec.seed)
    half = spec.extent / 2
    n = spec.n_bumps
    bumps = np.zeros((n, 4))
    if n:
        bumps[:, 0] = rng.uniform(-0.8 * half, 0.8 * half, n)
        bumps[:, 1] = rng.uniform(-0.8 * half, 0.8 * half, n)
        bumps[:, 2] = rng.uniform(-1.0, 1.0, n) * spec.bump_amplitude
        bumps[:, 3] = rng.uniform(spec.bump_sigma[0], spec.bump_sigma[1], n)
    tables = rng.uniform(-1.0, 1.0, size=(spec.octaves, _TABLE, _TABLE))
    light = np.asarray(spec.light, float)
    return Scene(spec, bumps, tables, light / np.linalg.norm(light))


@njit(cache=True)
def _fade(t):
    return t * t * t * (t * (t * 6.0 - 15.0) + 10.0)


@njit(cache=True)
def _noise(table, x, y):
    T = table.shape[0]
    fx = math.floor(x)
    fy = math.floor(y)
    tx = _fade(x - fx)
    ty = _fade(y - fy)
    ix = int(fx) % T
    iy = int(fy) % T
    jx = (ix + 1) % T
    jy = (iy + 1) % T
    a = table[iy, ix] + tx * (table[iy, jx] - table[iy, ix])
    b = table[jy, ix] + tx * (table[jy, jx] - table[jy, ix])
    return a + ty * (b - a)


@njit(cache=True)
def _albedo(x, y, tables, cell, contrast):
    v = 0.0
    norm = 0.0
    amp = 1.0
    scale = cell
    for o in range(tables.shape[0]):
        v += amp * _noise(tables[o], x / scale + 0.37 * o, y / scale + 0.71 * o)
        norm += amp
        amp *= 0.6
        scale *= 2.0
    return 0.5 + 0.4 * contrast * v / norm


@njit(cache=True)
def _albedo_many(x, y, tables, cell, contrast):
    out = np.empty(x.shape[0])
    for k in range(x.shape[0]):
        out[k] = _albedo(x[k], y[k], tables, cell, contrast)
    return out


@njit(cache=True)
def _height_grad(x, y, bumps):
    h = 0.0
    gx = 0.0
    gy = 0.0
    for b in range(bumps.shape[0]):
        dx = x - bumps[b, 0]
        dy = y - bumps[b, 1]
        s2 = bumps[b, 3] * bumps[b, 3]
        e = bumps[b, 2] * math.exp(-(dx * dx + dy * dy) / (2.0 * s2))
        h += e
        gx -= e * dx / s2
        gy -= e * dy / s2
    return h, gx, gy


@njit(cache=True)
def _raycast(o, R, fx, fy, cx, cy, W, H, bumps, tables, cell, contrast, light, ambient):
    depth = np.zeros((H, W))
    image = np.zeros((H, W))
    for j in range(H):
        prev = -1.0
        for i in range(W):
            ax = (i - cx) / fx
            ay = (j - cy) / fy
            dx = R[0, 0] * ax + R[0, 1] * ay + R[0, 2]
            dy = R[1, 0] * ax + R[1, 1] * ay + R[1, 2]
            dz = R[2, 0] * ax + R[2, 1] * ay + R[2, 2]
            if dz >= 0.0:
                continue
            # warm start from the neighbouring hit; the base plane otherwise
            s = prev if prev > 0.0 else -o[2] / dz
            ok = False
            for _ in range(60):
                px = o[0] + s * dx
                py = o[1] + s * dy
                h, gx, gy = _height_grad(px, py, bumps)
                g = o[2] + s * dz - h
                dg = dz - gx * dx - gy * dy
                step = g / dg
                s -= step
                if abs(step) < 1e-13 * (1.0 + abs(s)):
                    ok = True
                    break
            if not ok or s <= 0.0:
                prev = -1.0
                continue
            prev = s
            px = o[0] + s * dx
            py = o[1] + s * dy
            h, gx, gy = _height_grad(px, py, bumps)
            nn = math.sqrt(gx * gx + gy * gy + 1.0)
            lam = (-gx * light[0] - gy * light[1] + light[2]) / nn
            if lam < 0.0:
                lam = 0.0
            alb = _albedo(px, py, tables, cell, contrast)
            depth[j, i] = s
            image[j, i] = alb * (ambient + (1.0 - ambient) * lam)
    return depth, image


def render_view(scene: Scene, pose: RigidPose, K: Intrinsics):
    """Ray-cast one pinhole view: (depth (H, W), intensity (H, W))."""
    sp = scene.spec
    depth, image = _raycast(
        np.asarray(pose.translation, float), np.ascontiguousarray(pose.rotation), K.fx, K.fy, K.cx, K.cy,
        K.width, K.height, np.ascontiguousarray(scene.bumps), scene.tables, sp.texture_cell,
        sp.texture_contrast, scene.light, sp.ambient,
    )
    if not np.all(depth > 0):
        raise InvalidInputError("surface not in view: some rays miss the scene")
    return depth, image


def right_camera_pose(pose: RigidPose, baseline):
    """Right camera of a rectified rig, displaced by ``baseline`` along camera +x."""
    return RigidPose(pose.quat, pose.apply(np.array([baseline, 0.0, 0.0])))


def render_frame(scene: Scene, pose: RigidPose, K: Intrinsics):
    """Left image, right image and left ground-truth depth for a camera pose."""
    if K.baseline is None:
        raise InvalidInputError("stereo rendering needs a baseline")
    depth, left = render_view(scene, pose, K)
    _, right = render_view(scene, right_camera_pose(pose, K.baseline), K)
    return GrayImage(np.clip(left, 0, 1)), GrayImage(np.clip(right, 0, 1)), DepthMap(depth)


# ---------------------------------------------------------------- trajectories


@dataclass(frozen=True)
class TrajectorySpec:
    kind: str = "zoom-in"
    n_frames: int = 30
    amplitude: float = 10.0  # mm
    angle: float = 5.0  # degrees
    standoff: float = 70.0  # camera height above the base plane, mm
    center: tuple = (0.0, 0.0)
    seed: int = 0
    fps: float = 30.0
    clearance: float = 5.0  # min camera height above the highest surface point


KINDS = ("zoom-in", "zoom-out", "follow", "random")


def _look_down(x, y, z, yaw=0.0, tilt_x=0.0, tilt_y=0.0):
    from .geometry import so3_exp

    R = so3_exp([tilt_x, tilt_y, 0.0]) @ LOOK_DOWN @ so3_exp([0.0, 0.0, yaw])
    return RigidPose.from_rt(R, (x, y, z))


def generate_trajectory(spec: TrajectorySpec, scene: Scene | None = None) -> Trajectory:
    """Camera poses for one of the motion types ``zoom-in``, ``zoom-out``,
    ``follow`` or ``random``."""
    if spec.kind not in KINDS:
        raise InvalidInputError(f"unknown trajectory kind {spec.kind!r}")
    if spec.n_frames < 1:
        raise InvalidInputError("n_frames must be positive")
    n = spec.n_frames
    u = np.linspace(0.0, 1.0, n) if n > 1 else np.zeros(1)
    cx, cy = spec.center
    poses = []
    if spec.kind in ("zoom-in", "zoom-out"):
        sign = -1.0 if spec.kind == "zoom-in" else 1.0
        for k in range(n):
            poses.append(_look_down(cx, cy, spec.standoff + sign * spec.amplitude * u[k]))
    elif spec.kind == "follow":
        # circular arc in the plane z = standoff, heading turning with the arc
        sweep = math.radians(spec.angle) if spec.angle else 0.0
        radius = spec.amplitude / max(sweep, 1e-9) if sweep else 0.0
        for k in range(n):
            phi = sweep * (u[k] - 0.5)
            if sweep:
                x = cx + radius * math.sin(phi)
                y = cy + radius * (1.0 - math.cos(phi))
            else:
                x = cx + spec.amplitude * (u[k] - 0.5)
                y = cy
            poses.append(_look_down(x, y, spec.standoff, yaw=phi))
    else:
        rng = np.random.default_rng(spec.seed)
        freq = rng.uniform(0.5, 1.5, size=(6, 2))
        phase = rng.uniform(0, 2 * np.pi, size=(6, 2))
        ang = math.radians(spec.angle)
        for k in range(n):
            w = np.sin(2 * np.pi * freq[:, 0] * u[k] + phase[:, 0]) * 0.6 + np.sin(2 * np.pi * freq[:, 1] * u[k] + phase[:, 1]) * 0.4
            dx, dy, dz = spec.amplitude * w[:3] * np.array([1.0, 1.0, 0.5])
            poses.append(_look_down(cx + dx, cy + dy, spec.standoff + dz, yaw=ang * w[3], tilt_x=ang * w[4], tilt_y=ang * w[5]))
    if scene is not None:
        top = float(np.max(np.abs(scene.bumps[:, 2]).sum())) if len(scene.bumps) else 0.0
    else:
        top = 0.0
    for p in poses:
        if p.translation[2] < top + spec.clearance:
            raise InvalidInputError("trajectory drives the camera into the surface")
    stamps = np.arange(n) / spec.fps
    return Trajectory(stamps, poses)


def default_intrinsics(width=640, height=480, baseline=5.0):
    """Synthetic laparoscope: ~63 degree horizontal field of view."""
    f = 520.0 * width / 640.0
    return Intrinsics(f, f, (width - 1) / 2.0, (height - 1) / 2.0, width, height, baseline)
