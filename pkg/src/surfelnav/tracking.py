"""Frame-to-model camera tracking.

The increment ``delta`` maps previous-camera coordinates to current-camera
coordinates, so ``T_t = delta * T_{t-1}``. The optimiser works on
``M = delta^-1`` (current camera -> previous camera) with left perturbations
``M <- exp(xi) M``, ``xi = (rho, omega)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy.ndimage import gaussian_filter

from .errors import TrackingFailure
from .formats import GrayImage
from .fusion import AssociationThresholds, SurfelMap, render_maps
from .geometry import Intrinsics, RigidPose, compose


@dataclass(frozen=True)
class TrackingConfig:
    w_photo: float = 1.0
    max_iterations: int = 10  # per pyramid level
    convergence_tol: float = 1e-6
    pyramid_levels: int = 3
    gate_distance: float = AssociationThresholds().gamma_depth
    gate_angle: float = AssociationThresholds().gamma_theta
    huber_mads: float = 3.0
    min_correspondences: int = 6
    point_stride: int = 4  # pixel sampling of the tracked surfels
    rank_tol: float = 1e-9

    def __post_init__(self):
        if not 0.0 <= self.w_photo <= 10.0:
            raise ValueError("w_photo must lie in [0, 10]")
        if self.pyramid_levels < 1 or self.max_iterations < 1:
            raise ValueError("pyramid_levels and max_iterations must be >= 1")


@dataclass
class CorrespondenceSet:
    """Model points/normals (previous camera) paired with new surfels (current camera)."""

    model_points: np.ndarray
    model_normals: np.ndarray
    new_points: np.ndarray
    new_index: np.ndarray
    weights: np.ndarray = None

    def __post_init__(self):
        self.model_points = np.asarray(self.model_points, float).reshape(-1, 3)
        self.model_normals = np.asarray(self.model_normals, float).reshape(-1, 3)
        self.new_points = np.asarray(self.new_points, float).reshape(-1, 3)
        self.new_index = np.asarray(self.new_index, np.int64).reshape(-1)
        if self.weights is None:
            self.weights = np.ones(len(self.new_points))

    def __len__(self):
        return len(self.new_points)


@dataclass
class ModelView:
    """The model rendered into the previous camera: vertex and normal maps."""

    vertices: np.ndarray  # (H, W, 3)
    normals: np.ndarray  # (H, W, 3)
    valid: np.ndarray  # (H, W)
    K: Intrinsics


def model_view(smap: SurfelMap, T: RigidPose, K: Intrinsics) -> ModelView:
    """Render ``smap`` (reference frame) into the camera with world-to-camera ``T``."""
    V, N, idx = render_maps(smap, T, K)
    return ModelView(V, N, idx >= 0, K)


def _lookup(view: ModelView, q):
    """Projective lookup of points ``q`` (previous camera) in the model view."""
    K = view.K
    z = q[:, 2]
    front = z > 1e-9
    zs = np.where(front, z, 1.0)
    u = np.floor(K.fx * q[:, 0] / zs + K.cx + 0.5).astype(np.int64)
    v = np.floor(K.fy * q[:, 1] / zs + K.cy + 0.5).astype(np.int64)
    inside = front & (u >= 0) & (v >= 0) & (u < K.width) & (v < K.height)
    u = np.where(inside, u, 0)
    v = np.where(inside, v, 0)
    ok = inside & view.valid[v, u]
    return ok, view.vertices[v, u], view.normals[v, u]


def _gate(q, nq, vm, nm, ok, max_dist, max_angle):
    dist = np.linalg.norm(q - vm, axis=1)
    cosang = np.einsum("ij,ij->i", nq, nm)
    return ok & (dist < max_dist) & (cosang > math.cos(max_angle))


def build_correspondences(prev: ModelView | SurfelMap, S_t: SurfelMap, gate_distance=10.0, gate_angle=math.radians(30.0),
                          M: RigidPose = RigidPose(), K: Intrinsics | None = None) -> CorrespondenceSet:
    """Projective association between the model seen from the previous camera and
    the new surfels, gated on point distance and normal angle.

    ``prev`` is either a rendered :class:`ModelView` or a surfel map already in
    previous-camera coordinates (then ``K`` is required).
    """
    if isinstance(prev, SurfelMap):
        if K is None:
            raise ValueError("K is required to render a surfel map")
        prev = model_view(prev, RigidPose(), K)
    if len(S_t) == 0:
        return CorrespondenceSet(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0, np.int64))
    q = M.apply(S_t.positions)
    nq = M.rotate(S_t.normals)
    ok, vm, nm = _lookup(prev, q)
    ok = _gate(q, nq, vm, nm, ok, gate_distance, gate_angle)
    idx = np.nonzero(ok)[0]
    return CorrespondenceSet(vm[idx], nm[idx], S_t.positions[idx], idx)


# ---------------------------------------------------------------- residuals


def geometric_residuals(P: CorrespondenceSet, M: RigidPose):
    """Point-to-plane residuals ``(M v - v') . n'`` and their (N, 6) Jacobian."""
    q = M.apply(P.new_points)
    r = np.einsum("ij,ij->i", q - P.model_points, P.model_normals)
    J = np.concatenate([P.model_normals, np.cross(q, P.model_normals)], axis=1)
    return r, J


def geometric_error(P: CorrespondenceSet, delta: RigidPose) -> float:
    """Sum of squared point-to-plane distances of ``delta^-1 v_t`` to the model."""
    r, _ = geometric_residuals(P, delta.inverse())
    return float(r @ r)


def bilinear(img, u, v, with_grad=False):
    """Bilinear sample of ``img`` at (u, v) = (column, row); points outside are
    clamped to the border. Gradients are the exact derivatives of the interpolant."""
    h, w = img.shape
    u = np.clip(u, 0.0, w - 1.0)
    v = np.clip(v, 0.0, h - 1.0)
    i0 = np.minimum(np.floor(u).astype(np.int64), w - 2) if w > 1 else np.zeros(len(u), np.int64)
    j0 = np.minimum(np.floor(v).astype(np.int64), h - 2) if h > 1 else np.zeros(len(v), np.int64)
    a = u - i0
    b = v - j0
    I00 = img[j0, i0]
    I01 = img[j0, i0 + 1]
    I10 = img[j0 + 1, i0]
    I11 = img[j0 + 1, i0 + 1]
    top = I00 + a * (I01 - I00)
    bot = I10 + a * (I11 - I10)
    val = top + b * (bot - top)
    if not with_grad:
        return val
    gu = (1 - b) * (I01 - I00) + b * (I11 - I10)
    gv = bot - top
    return val, gu, gv


def _inside(u, v, shape):
    h, w = shape
    return (u >= 0) & (v >= 0) & (u <= w - 1) & (v <= h - 1)


def photometric_residuals(cur_intensity, prev_img, points, K: Intrinsics, M: RigidPose, mask=None):
    """Residuals ``L_t(p) - L_{t-1}(pi(M v))`` with their (N, 6) Jacobian.

    ``cur_intensity`` holds ``L_t`` sampled at each point's own pixel. Returns
    ``(r, J, valid)``; ``valid`` marks in-bounds warps (or is ``mask`` if given).
    """
    q = M.apply(points)
    z = q[:, 2]
    front = z > 1e-9
    zs = np.where(front, z, 1.0)
    u = K.fx * q[:, 0] / zs + K.cx
    v = K.fy * q[:, 1] / zs + K.cy
    valid = (front & _inside(u, v, prev_img.shape)) if mask is None else mask
    val, gu, gv = bilinear(prev_img, u, v, with_grad=True)
    r = cur_intensity - val
    # d pi / d q
    du = np.stack([K.fx / zs, np.zeros_like(zs), -K.fx * q[:, 0] / zs**2], axis=1)
    dv = np.stack([np.zeros_like(zs), K.fy / zs, -K.fy * q[:, 1] / zs**2], axis=1)
    g = gu[:, None] * du + gv[:, None] * dv  # d L / d q
    # d q / d xi = [I, -[q]x]  ->  g^T [I, -[q]x] = [g, q x g]
    J = -np.concatenate([g, np.cross(q, g)], axis=1)
    return r, J, valid


def photometric_error(L_t, L_prev, S_t: SurfelMap, K: Intrinsics, delta: RigidPose) -> float:
    """Sum of squared intensity differences over surfels whose warp stays in bounds."""
    Lt = L_t.data if isinstance(L_t, GrayImage) else np.asarray(L_t, float)
    Lp = L_prev.data if isinstance(L_prev, GrayImage) else np.asarray(L_prev, float)
    if Lt.shape != Lp.shape:
        raise ValueError("images differ in size")
    if len(S_t) == 0:
        return 0.0
    cur = Lt[S_t.pixels[:, 1], S_t.pixels[:, 0]]
    r, _, valid = photometric_residuals(cur, Lp, S_t.positions, K, delta.inverse())
    return float(np.sum(r[valid] ** 2))


# ---------------------------------------------------------------- optimiser


def _huber_weights(r, mads, scale_sample=4096):
    """Huber weights with threshold ``mads`` robust standard deviations
    (1.4826 MAD); the MAD of large sets is taken over a strided subsample."""
    if len(r) == 0:
        return np.ones(0)
    rs = r[:: max(1, len(r) // scale_sample)]
    med = np.median(rs)
    mad = 1.4826 * np.median(np.abs(rs - med))
    delta = mads * mad
    if not delta > 0:
        return np.ones(len(r))
    a = np.abs(r)
    return np.where(a <= delta, 1.0, delta / np.maximum(a, 1e-300))


def image_pyramid(img, levels):
    """Gaussian pyramid (sigma 1, decimation 2). A list is taken as a ready-made
    pyramid, so callers can reuse the previous frame's."""
    if isinstance(img, list):
        if len(img) < levels:
            raise ValueError("pyramid has too few levels")
        return img
    out = [np.asarray(img.data if isinstance(img, GrayImage) else img, float)]
    for _ in range(1, levels):
        b = gaussian_filter(out[-1], 1.0, mode="nearest")
        out.append(np.ascontiguousarray(b[::2, ::2]))
    return out


@dataclass
class TrackingResult:
    delta: RigidPose
    iterations: int
    correspondences: int
    cost: float
    history: list = field(default_factory=list)


def _level_points(S_t: SurfelMap, stride):
    if stride == 1:
        return np.arange(len(S_t))
    px = S_t.pixels
    return np.nonzero((px[:, 0] % stride == 0) & (px[:, 1] % stride == 0))[0]


@njit(cache=True, inline="always")
def _warp(R, t, P, k):
    qx = R[0, 0] * P[k, 0] + R[0, 1] * P[k, 1] + R[0, 2] * P[k, 2] + t[0]
    qy = R[1, 0] * P[k, 0] + R[1, 1] * P[k, 1] + R[1, 2] * P[k, 2] + t[1]
    qz = R[2, 0] * P[k, 0] + R[2, 1] * P[k, 1] + R[2, 2] * P[k, 2] + t[2]
    return qx, qy, qz


@njit(cache=True, inline="always")
def _sample(Lp, u, v):
    """Bilinear value and exact derivatives, clamped to the image."""
    h, w = Lp.shape
    u = min(max(u, 0.0), w - 1.0)
    v = min(max(v, 0.0), h - 1.0)
    i0 = min(int(math.floor(u)), w - 2)
    j0 = min(int(math.floor(v)), h - 2)
    a = u - i0
    b = v - j0
    I00 = Lp[j0, i0]
    I01 = Lp[j0, i0 + 1]
    I10 = Lp[j0 + 1, i0]
    I11 = Lp[j0 + 1, i0 + 1]
    top = I00 + a * (I01 - I00)
    bot = I10 + a * (I11 - I10)
    return top + b * (bot - top), (1 - b) * (I01 - I00) + b * (I11 - I10), bot - top


@njit(cache=True, error_model="numpy")
def _residuals(pts, nrm, R, t, V, N, valid, fx, fy, cx, cy, gate_d, cos_gate, photo, cur, Lp, pfx, pfy, pcx, pcy):
    """Residuals of both terms at ``M = (R, t)``.

    Geometric: projective lookup into the model view, distance and normal gates;
    ``link`` is the flat model pixel or -1. Photometric: needs an in-bounds warp.
    """
    n = pts.shape[0]
    H, W = valid.shape
    h, w = Lp.shape
    rg = np.zeros(n)
    link = np.full(n, -1, np.int64)
    rp = np.zeros(n)
    okp = np.zeros(n, np.bool_)
    for k in range(n):
        qx, qy, qz = _warp(R, t, pts, k)
        if qz <= 1e-9:
            continue
        iz = 1.0 / qz
        i = int(math.floor(fx * qx * iz + cx + 0.5))
        j = int(math.floor(fy * qy * iz + cy + 0.5))
        if i >= 0 and j >= 0 and i < W and j < H and valid[j, i]:
            dx = qx - V[j, i, 0]
            dy = qy - V[j, i, 1]
            dz = qz - V[j, i, 2]
            nx = R[0, 0] * nrm[k, 0] + R[0, 1] * nrm[k, 1] + R[0, 2] * nrm[k, 2]
            ny = R[1, 0] * nrm[k, 0] + R[1, 1] * nrm[k, 1] + R[1, 2] * nrm[k, 2]
            nz = R[2, 0] * nrm[k, 0] + R[2, 1] * nrm[k, 1] + R[2, 2] * nrm[k, 2]
            mx, my, mz = N[j, i, 0], N[j, i, 1], N[j, i, 2]
            if math.sqrt(dx * dx + dy * dy + dz * dz) < gate_d and nx * mx + ny * my + nz * mz > cos_gate:
                link[k] = j * W + i
                rg[k] = dx * mx + dy * my + dz * mz
        if photo:
            u = pfx * qx * iz + pcx
            v = pfy * qy * iz + pcy
            if u < 0.0 or v < 0.0 or u > w - 1.0 or v > h - 1.0:
                continue
            val, gu, gv = _sample(Lp, u, v)
            okp[k] = True
            rp[k] = cur[k] - val
    return rg, link, rp, okp


@njit(cache=True, inline="always")
def _add(Hl, gl, j0, j1, j2, j3, j4, j5, w, r):
    J = (j0, j1, j2, j3, j4, j5)
    for a in range(6):
        ja = w * J[a]
        gl[a] += ja * r
        for b in range(a, 6):
            Hl[a, b] += ja * J[b]


@njit(cache=True, error_model="numpy")
def _accumulate(pts, R, t, V, N, link, wg, photo, cur, Lp, wp, pfx, pfy, pcx, pcy, H, g):
    """Weighted normal equations ``H = sum w J^T J``, ``g = sum w J^T r`` with
    Jacobians rebuilt per point (geometric ``[n, q x n]``, photometric
    ``-[dL/dq, q x dL/dq]``); only the upper triangle of ``H`` is filled."""
    W = V.shape[1]
    Hl = np.zeros((6, 6))
    gl = np.zeros(6)
    for k in range(pts.shape[0]):
        if wg[k] != 0.0:
            qx, qy, qz = _warp(R, t, pts, k)
            j = link[k] // W
            i = link[k] - j * W
            mx, my, mz = N[j, i, 0], N[j, i, 1], N[j, i, 2]
            r = (qx - V[j, i, 0]) * mx + (qy - V[j, i, 1]) * my + (qz - V[j, i, 2]) * mz
            _add(Hl, gl, mx, my, mz, qy * mz - qz * my, qz * mx - qx * mz, qx * my - qy * mx, wg[k], r)
        if photo and wp[k] != 0.0:
            qx, qy, qz = _warp(R, t, pts, k)
            iz = 1.0 / qz
            val, gu, gv = _sample(Lp, pfx * qx * iz + pcx, pfy * qy * iz + pcy)
            gx = gu * pfx * iz
            gy = gv * pfy * iz
            gz = -(gu * pfx * qx + gv * pfy * qy) * iz * iz
            _add(Hl, gl, -gx, -gy, -gz, -(qy * gz - qz * gy), -(qz * gx - qx * gz), -(qx * gy - qy * gx),
                 wp[k], cur[k] - val)
    H += Hl
    g += gl


@njit(cache=True, error_model="numpy")
def _objective(pts, R, t, V, N, link, wg, photo, cur, Lp, wp, pfx, pfy, pcx, pcy):
    """Weighted cost at ``M = (R, t)`` with correspondences, masks and weights
    held fixed (zero weight = excluded)."""
    W = V.shape[1]
    f = 0.0
    for k in range(pts.shape[0]):
        if wg[k] == 0.0 and (not photo or wp[k] == 0.0):
            continue
        qx, qy, qz = _warp(R, t, pts, k)
        if wg[k] != 0.0:
            j = link[k] // W
            i = link[k] - j * W
            r = (qx - V[j, i, 0]) * N[j, i, 0] + (qy - V[j, i, 1]) * N[j, i, 1] + (qz - V[j, i, 2]) * N[j, i, 2]
            f += wg[k] * r * r
        if photo and wp[k] != 0.0:
            zs = qz if qz > 1e-9 else 1.0
            val, gu, gv = _sample(Lp, pfx * qx / zs + pcx, pfy * qy / zs + pcy)
            r = cur[k] - val
            f += wp[k] * r * r
    return f


def _masked_huber(r, ok, mads):
    w = np.zeros(len(r))
    if ok.any():
        w[ok] = _huber_weights(r[ok], mads)
    return w


def normal_equations(P: CorrespondenceSet, M: RigidPose, photo=None, weights=(None, None)):
    """Reference (numpy) assembly of ``H`` and ``g`` from the residual functions;
    ``photo = (cur_intensity, prev_img, points, K)`` adds the photometric term."""
    r, J = geometric_residuals(P, M)
    w = np.ones(len(r)) if weights[0] is None else weights[0]
    H = (J * w[:, None]).T @ J
    g = (J * w[:, None]).T @ r
    if photo is not None:
        rp, Jp, ok = photometric_residuals(*photo, M)
        wp = (np.ones(len(rp)) if weights[1] is None else weights[1]) * ok
        H = H + (Jp * wp[:, None]).T @ Jp
        g = g + (Jp * wp[:, None]).T @ rp
    return H, g


def estimate_relative_pose(prev: ModelView, prev_image, S_t: SurfelMap, cur_image, config: TrackingConfig = TrackingConfig(),
                           init: RigidPose = RigidPose()) -> TrackingResult:
    """Minimise ``E_geo + w_photo * E_photo`` over the increment ``delta``.

    Gauss-Newton with Huber weights and step halving, re-associating every
    iteration, coarse to fine over the image pyramid. Raises
    :class:`TrackingFailure` when the normal equations lose rank or too few
    correspondences survive.
    """
    K = prev.K
    levels = config.pyramid_levels
    use_photo = config.w_photo > 0 and prev_image is not None and cur_image is not None
    if use_photo:
        Lp_pyr = image_pyramid(prev_image, levels)
        Lc_pyr = image_pyramid(cur_image, levels)
    dummy = np.zeros((2, 2))
    cos_gate = math.cos(config.gate_angle)
    M = init.inverse()
    history = []
    total_iters = 0
    n_corr = 0
    cost = float("nan")
    picked = {}
    for level in reversed(range(levels)):
        stride = 2**level
        step = max(stride, config.point_stride)
        if step not in picked:
            sel = _level_points(S_t, step)
            if len(sel) < config.min_correspondences:
                sel = np.arange(len(S_t))
            picked[step] = sel, np.ascontiguousarray(S_t.positions[sel]), np.ascontiguousarray(S_t.normals[sel])
        sel, pts, nrm = picked[step]
        if use_photo:
            Kl = K.scaled(1.0 / stride)
            pl = (S_t.pixels[sel] + 0.5) / stride - 0.5
            cur_int = bilinear(Lc_pyr[level], pl[:, 0], pl[:, 1])
            Lp = np.ascontiguousarray(Lp_pyr[level])
            pk = (Kl.fx, Kl.fy, Kl.cx, Kl.cy)
        else:
            cur_int, Lp, pk = np.zeros(len(sel)), dummy, (1.0, 1.0, 0.0, 0.0)
        for _ in range(config.max_iterations):
            total_iters += 1
            R = np.ascontiguousarray(M.rotation)
            rg, link, rp, okp = _residuals(pts, nrm, R, M.translation, prev.vertices, prev.normals, prev.valid,
                                           K.fx, K.fy, K.cx, K.cy, config.gate_distance, cos_gate, use_photo,
                                           cur_int, Lp, *pk)
            okg = link >= 0
            n_corr = int(okg.sum())
            if n_corr < config.min_correspondences:
                raise TrackingFailure(f"only {n_corr} correspondences")
            wg = _masked_huber(rg, okg, config.huber_mads)
            wp = _masked_huber(rp, okp, config.huber_mads) * config.w_photo if use_photo else wg
            H = np.zeros((6, 6))
            g = np.zeros(6)
            _accumulate(pts, R, M.translation, prev.vertices, prev.normals, link, wg, use_photo, cur_int, Lp, wp,
                        *pk, H, g)
            H = np.triu(H) + np.triu(H, 1).T
            f0 = float(wg @ rg**2) + (float(wp @ rp**2) if use_photo else 0.0)

            def objective(Mx):
                return _objective(pts, np.ascontiguousarray(Mx.rotation), Mx.translation, prev.vertices, prev.normals,
                                  link, wg, use_photo, cur_int, Lp, wp, *pk)

            d = np.sqrt(np.maximum(np.diag(H), 1e-300))
            Hn = H / np.outer(d, d)
            ev = np.linalg.eigvalsh(Hn)
            if ev[0] < config.rank_tol * ev[-1]:
                raise TrackingFailure("degenerate normal equations (rank < 6)")
            xi = -np.linalg.solve(H, g)
            cost = f0
            step = 1.0
            accepted = False
            for _ in range(12):
                Mn = compose(RigidPose.exp(step * xi), M)
                f1 = objective(Mn)
                if f1 <= f0:
                    accepted = True
                    break
                step *= 0.5
            if not accepted:
                break
            M = Mn
            cost = f1
            history.append((level, f0, f1))
            if np.linalg.norm(step * xi) < config.convergence_tol or f0 - f1 <= config.convergence_tol * f0:
                break
    return TrackingResult(M.inverse(), total_iters, n_corr, cost, history)


def update_global_pose(T_prev: RigidPose, delta: RigidPose) -> RigidPose:
    """``T_t = delta * T_{t-1}``."""
    return compose(delta, T_prev)
