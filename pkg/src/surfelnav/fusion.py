"""Surfel creation, projective association and confidence-weighted fusion.

The model ``S_ref`` lives in the coordinate frame of the first camera. Camera
poses passed here (``T``) map reference coordinates into the current camera
(world-to-camera), so ``T_t = delta_T * T_{t-1}``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .formats import DepthMap, GrayImage
from .geometry import Intrinsics, RigidPose, backproject_depth

SIGMA = 0.6  # confidence fall-off over the normalised radial distance
R_MAX_FACTOR = 10.0


@dataclass(frozen=True)
class AssociationThresholds:
    gamma_depth: float = 10.0  # mm
    gamma_theta: float = math.radians(30.0)
    neighborhood: int = 1  # half-width; 1 gives the 3x3 window

    def __post_init__(self):
        if not (self.gamma_depth > 0 and self.gamma_theta > 0 and self.neighborhood > 0):
            raise ValueError("association thresholds must be positive")


@dataclass
class SurfelMap:
    """Unordered surfel list stored as parallel arrays.

    ``pixels`` is only set for freshly created (camera-frame) maps and holds the
    (i, j) pixel each surfel came from.
    """

    positions: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    normals: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    radii: np.ndarray = field(default_factory=lambda: np.zeros(0))
    confidence: np.ndarray = field(default_factory=lambda: np.zeros(0))
    timestamps: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    intensity: np.ndarray = field(default_factory=lambda: np.zeros(0))
    pixels: np.ndarray | None = None

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        self.normals = np.ascontiguousarray(self.normals, dtype=np.float64).reshape(-1, 3)
        self.radii = np.asarray(self.radii, dtype=np.float64).reshape(-1)
        self.confidence = np.asarray(self.confidence, dtype=np.float64).reshape(-1)
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64).reshape(-1)
        self.intensity = np.asarray(self.intensity, dtype=np.float64).reshape(-1)
        if len(self.intensity) == 0 and n:
            self.intensity = np.zeros(n)
        if not all(len(a) == n for a in (self.normals, self.radii, self.confidence, self.timestamps, self.intensity)):
            raise ValueError("surfel attribute arrays differ in length")

    def __len__(self):
        return len(self.positions)

    def copy(self):
        return SurfelMap(self.positions.copy(), self.normals.copy(), self.radii.copy(), self.confidence.copy(),
                         self.timestamps.copy(), self.intensity.copy(), None if self.pixels is None else self.pixels.copy())

    def subset(self, idx):
        return SurfelMap(self.positions[idx], self.normals[idx], self.radii[idx], self.confidence[idx],
                         self.timestamps[idx], self.intensity[idx], None if self.pixels is None else self.pixels[idx])

    def transformed(self, T: RigidPose):
        out = self.copy()
        out.positions = np.ascontiguousarray(T.apply(self.positions))
        out.normals = np.ascontiguousarray(T.rotate(self.normals))
        return out

    def confident(self, floor=0.0):
        """Mask of surfels at or above a confidence floor, for export filtering."""
        return self.confidence >= floor

    def colors(self):
        g = np.clip(np.round(self.intensity * 255), 0, 255).astype(np.uint8)
        return np.stack([g, g, g], axis=1)


# ---------------------------------------------------------------- creation


def compute_normal(points, i, j):
    """Camera-facing unit normal at column ``i``, row ``j`` of a vertex grid
    (H, W, 3); ``None`` where a forward neighbour is missing or degenerate."""
    points = np.asarray(points, dtype=float)
    h, w = points.shape[:2]
    if not (0 <= i < w - 1 and 0 <= j < h - 1):
        return None
    v = points[j, i]
    vi = points[j, i + 1]
    vj = points[j + 1, i]
    if not (v[2] > 0 and vi[2] > 0 and vj[2] > 0):
        return None
    n = np.cross(vi - v, vj - v)
    norm = np.linalg.norm(n)
    scale = np.linalg.norm(vi - v) * np.linalg.norm(vj - v)
    if scale == 0 or norm <= 1e-12 * scale:
        return None
    n = n / norm
    return -n if n @ v > 0 else n


def normal_map(V):
    """Vectorised :func:`compute_normal` over a vertex grid: (normals, valid)."""
    h, w = V.shape[:2]
    N = np.zeros((h, w, 3))
    valid = np.zeros((h, w), bool)
    if h < 2 or w < 2:
        return N, valid
    v = V[:-1, :-1]
    di = V[:-1, 1:] - v
    dj = V[1:, :-1] - v
    n = np.cross(di, dj)
    norm = np.linalg.norm(n, axis=-1)
    scale = np.linalg.norm(di, axis=-1) * np.linalg.norm(dj, axis=-1)
    ok = (V[:-1, :-1, 2] > 0) & (V[:-1, 1:, 2] > 0) & (V[1:, :-1, 2] > 0) & (norm > 1e-12 * scale) & (scale > 0)
    n = n / np.where(ok, norm, 1.0)[..., None]
    flip = np.einsum("...k,...k->...", n, v) > 0
    n[flip] = -n[flip]
    N[:-1, :-1] = np.where(ok[..., None], n, 0.0)
    valid[:-1, :-1] = ok
    return N, valid


def compute_radius(depth, f, n_z, r_max=np.inf):
    """Surfel radius ``depth * sqrt(2) / (f |n_z|)``, clamped to ``r_max``."""
    depth = np.asarray(depth, dtype=float)
    nz = np.abs(np.asarray(n_z, dtype=float))
    with np.errstate(divide="ignore"):
        r = np.where(nz > 0, depth * math.sqrt(2.0) / (f * np.where(nz > 0, nz, 1.0)), np.inf)
    r = np.minimum(r, r_max)
    return float(r) if r.ndim == 0 else r


def init_confidence(p, K: Intrinsics, sigma=SIGMA):
    """``exp(-g^2 / (2 sigma^2))`` with ``g`` the pixel distance to the principal
    point normalised by the principal point's distance to the origin."""
    p = np.asarray(p, dtype=float)
    c = np.array([K.cx, K.cy])
    gamma = np.linalg.norm(p - c, axis=-1) / np.linalg.norm(c)
    out = np.exp(-(gamma**2) / (2 * sigma**2))
    return float(out) if out.ndim == 0 else out


@njit(cache=True, error_model="numpy")
def _surfel_kernel(D, fx, fy, cx, cy, sigma):
    """Compiled twin of backproject_depth + normal_map + compute_radius (unclamped)
    + init_confidence, keeping valid pixels only."""
    h, w = D.shape
    pos = np.empty((h * w, 3))
    nor = np.empty((h * w, 3))
    pix = np.empty((h * w, 2), np.int64)
    rad = np.empty(h * w)
    conf = np.empty(h * w)
    f = 0.5 * (fx + fy)
    cn2 = cx * cx + cy * cy
    n = 0
    for j in range(h - 1):
        for i in range(w - 1):
            z = D[j, i]
            zi = D[j, i + 1]
            zj = D[j + 1, i]
            if not (z > 0 and zi > 0 and zj > 0):
                continue
            x = (i - cx) / fx * z
            y = (j - cy) / fy * z
            ax = (i + 1 - cx) / fx * zi - x
            ay = (j - cy) / fy * zi - y
            az = zi - z
            bx = (i - cx) / fx * zj - x
            by = (j + 1 - cy) / fy * zj - y
            bz = zj - z
            nx = ay * bz - az * by
            ny = az * bx - ax * bz
            nz = ax * by - ay * bx
            norm = math.sqrt(nx * nx + ny * ny + nz * nz)
            scale = math.sqrt(ax * ax + ay * ay + az * az) * math.sqrt(bx * bx + by * by + bz * bz)
            if not (scale > 0 and norm > 1e-12 * scale):
                continue
            nx /= norm
            ny /= norm
            nz /= norm
            if nx * x + ny * y + nz * z > 0:
                nx, ny, nz = -nx, -ny, -nz
            pos[n, 0], pos[n, 1], pos[n, 2] = x, y, z
            nor[n, 0], nor[n, 1], nor[n, 2] = nx, ny, nz
            pix[n, 0], pix[n, 1] = i, j
            rad[n] = z * math.sqrt(2.0) / (f * abs(nz)) if nz != 0 else np.inf
            g2 = ((i - cx) ** 2 + (j - cy) ** 2) / cn2
            conf[n] = math.exp(-g2 / (2 * sigma * sigma))
            n += 1
    return pos[:n], nor[:n], pix[:n], rad[:n], conf[:n]


def create_surfels(depth: DepthMap, image: GrayImage | None, K: Intrinsics, t: int) -> SurfelMap:
    """One camera-frame surfel per valid depth pixel with a valid normal."""
    D = np.ascontiguousarray(depth.data, dtype=np.float64)
    if image is not None and image.data.shape != D.shape:
        raise ValueError("depth and image differ in size")
    pos, nor, pix, r_raw, conf = _surfel_kernel(D, K.fx, K.fy, K.cx, K.cy, SIGMA)
    if len(pos) == 0:
        return SurfelMap(pixels=np.zeros((0, 2), np.int64))
    ii, jj = pix[:, 0], pix[:, 1]
    finite = np.isfinite(r_raw)
    r_max = R_MAX_FACTOR * np.median(r_raw[finite]) if finite.any() else np.inf
    radii = np.minimum(r_raw, r_max)
    inten = image.data[jj, ii] if image is not None else np.zeros(len(jj))
    return SurfelMap(pos, nor, radii, conf, np.full(len(jj), t, np.int64), inten, pix)


# ---------------------------------------------------------------- rendering


@njit(cache=True, error_model="numpy")
def _zbuffer(P, R, t, fx, fy, cx, cy, W, H):
    depth = np.zeros((H, W))
    index = np.full((H, W), -1, dtype=np.int64)
    for k in range(P.shape[0]):
        x = R[0, 0] * P[k, 0] + R[0, 1] * P[k, 1] + R[0, 2] * P[k, 2] + t[0]
        y = R[1, 0] * P[k, 0] + R[1, 1] * P[k, 1] + R[1, 2] * P[k, 2] + t[1]
        z = R[2, 0] * P[k, 0] + R[2, 1] * P[k, 1] + R[2, 2] * P[k, 2] + t[2]
        if z <= 0.0:
            continue
        u = fx * x / z + cx
        v = fy * y / z + cy
        i = int(math.floor(u + 0.5))
        j = int(math.floor(v + 0.5))
        if i < 0 or j < 0 or i >= W or j >= H:
            continue
        if index[j, i] < 0 or z < depth[j, i]:
            depth[j, i] = z
            index[j, i] = k
    return depth, index


def render_model(smap: SurfelMap, T: RigidPose, K: Intrinsics):
    """Z-buffered point rendering of the model into camera ``T``.

    Returns the depth raster and an index map (-1 where no surfel lands).
    """
    d, idx = _zbuffer(smap.positions, np.ascontiguousarray(T.rotation), T.translation, K.fx, K.fy, K.cx, K.cy, K.width, K.height)
    return DepthMap(d), idx


@njit(cache=True, error_model="numpy")
def _render_maps(P, Nrm, R, t, fx, fy, cx, cy, W, H):
    depth, index = _zbuffer(P, R, t, fx, fy, cx, cy, W, H)
    V = np.zeros((H, W, 3))
    N = np.zeros((H, W, 3))
    for j in range(H):
        for i in range(W):
            k = index[j, i]
            if k < 0:
                continue
            for d in range(3):
                V[j, i, d] = R[d, 0] * P[k, 0] + R[d, 1] * P[k, 1] + R[d, 2] * P[k, 2] + t[d]
                N[j, i, d] = R[d, 0] * Nrm[k, 0] + R[d, 1] * Nrm[k, 1] + R[d, 2] * Nrm[k, 2]
    return V, N, index


def render_maps(smap: SurfelMap, T: RigidPose, K: Intrinsics):
    """Vertex map, normal map (camera coordinates of ``T``) and index map."""
    return _render_maps(smap.positions, smap.normals, np.ascontiguousarray(T.rotation), np.asarray(T.translation, float),
                        K.fx, K.fy, K.cx, K.cy, K.width, K.height)


# ---------------------------------------------------------------- association


@dataclass
class Association:
    new_idx: np.ndarray  # indices into S_t
    ref_idx: np.ndarray  # matched indices into S_ref
    unmatched: np.ndarray  # indices into S_t with no partner

    @property
    def pairs(self):
        return list(zip(self.new_idx.tolist(), self.ref_idx.tolist()))


def ray_distance(v, a):
    """Distance of point(s) ``v`` from the camera ray along ``a``: ``|v x a| / |a|``."""
    v = np.asarray(v, dtype=float)
    a = np.asarray(a, dtype=float)
    return np.linalg.norm(np.cross(v, a), axis=-1) / np.linalg.norm(a, axis=-1)


@njit(cache=True, error_model="numpy")
def _associate(pix, Pt, Nt, V, Nm, index, half, gamma_depth, gamma_theta):
    """``V``/``Nm`` are the rendered model's camera-frame vertex and normal maps."""
    H, W = index.shape
    n = Pt.shape[0]
    match = np.full(n, -1, dtype=np.int64)
    cos_gate = math.cos(gamma_theta)
    for k in range(n):
        i = pix[k, 0]
        j = pix[k, 1]
        z = Pt[k, 2]
        ax = Pt[k, 0] / z
        ay = Pt[k, 1] / z
        an = math.sqrt(ax * ax + ay * ay + 1.0)
        nx = Nt[k, 0]
        ny = Nt[k, 1]
        nz = Nt[k, 2]
        best = np.inf
        bu = -1
        for jj in range(max(j - half, 0), min(j + half + 1, H)):
            for ii in range(max(i - half, 0), min(i + half + 1, W)):
                u = index[jj, ii]
                if u < 0:
                    continue
                px = V[jj, ii, 0]
                py = V[jj, ii, 1]
                pz = V[jj, ii, 2]
                if not abs(z - pz) * an < gamma_depth:
                    continue
                # theta < gamma_theta  <=>  cos(theta) > cos(gamma_theta)
                if not nx * Nm[jj, ii, 0] + ny * Nm[jj, ii, 1] + nz * Nm[jj, ii, 2] > cos_gate:
                    continue
                # distance of the candidate point from the new surfel's viewing ray
                cx = py - pz * ay
                cy = pz * ax - px
                cz = px * ay - py * ax
                # |v x a|^2 orders candidates like the distance itself (|a| is fixed per surfel)
                da = cx * cx + cy * cy + cz * cz
                if da < best:
                    best = da
                    bu = u
        match[k] = bu
    return match


def associate(S_t: SurfelMap, S_ref: SurfelMap, T_t: RigidPose, K: Intrinsics,
              thresholds: AssociationThresholds = AssociationThresholds(), rendered=None) -> Association:
    """Pair each new surfel with the reference surfel in its pixel neighbourhood
    that passes the depth and normal gates and lies closest to its viewing ray.

    ``rendered`` may pass a precomputed :func:`render_maps` result for ``T_t``.
    """
    n = len(S_t)
    if n == 0 or len(S_ref) == 0:
        return Association(np.zeros(0, np.int64), np.zeros(0, np.int64), np.arange(n, dtype=np.int64))
    if S_t.pixels is None:
        raise ValueError("new surfels must carry their source pixels")
    V, Nm, index = rendered if rendered is not None else render_maps(S_ref, T_t, K)
    match = _associate(np.ascontiguousarray(S_t.pixels), S_t.positions, S_t.normals, V, Nm, index,
                       thresholds.neighborhood, thresholds.gamma_depth, thresholds.gamma_theta)
    ok = match >= 0
    new_idx = np.nonzero(ok)[0]
    return Association(new_idx, match[ok], np.nonzero(~ok)[0])


# ---------------------------------------------------------------- fusion


@njit(cache=True, error_model="numpy")
def _fuse_matched(a, b, ct, P, N, rad, inten, Rr, tr, pos, nor, radii, conf, its, stamps, t):
    """Confidence-weighted blend of matched new surfels into the reference arrays.

    Several new surfels may hit one reference surfel; the result equals the
    weighted mean over the reference and all of them.
    """
    m = pos.shape[0]
    slot = np.full(m, -1, np.int64)
    uniq = np.empty(a.shape[0], np.int64)
    acc = np.zeros((a.shape[0], 9))  # weight sum, position, normal, radius, intensity
    cnt = 0
    for k in range(a.shape[0]):
        s = a[k]
        u = b[k]
        if slot[u] < 0:
            slot[u] = cnt
            uniq[cnt] = u
            cnt += 1
        q = slot[u]
        w = ct[s]
        acc[q, 0] += w
        for d in range(3):
            acc[q, 1 + d] += w * (Rr[d, 0] * P[s, 0] + Rr[d, 1] * P[s, 1] + Rr[d, 2] * P[s, 2] + tr[d])
            acc[q, 4 + d] += w * (Rr[d, 0] * N[s, 0] + Rr[d, 1] * N[s, 1] + Rr[d, 2] * N[s, 2])
        acc[q, 7] += w * rad[s]
        acc[q, 8] += w * inten[s]
    for q in range(cnt):
        u = uniq[q]
        if acc[q, 0] <= 0.0:
            continue
        c = conf[u]
        den = c + acc[q, 0]
        for d in range(3):
            pos[u, d] = (c * pos[u, d] + acc[q, 1 + d]) / den
        nx = (c * nor[u, 0] + acc[q, 4]) / den
        ny = (c * nor[u, 1] + acc[q, 5]) / den
        nz = (c * nor[u, 2] + acc[q, 6]) / den
        nn = math.sqrt(nx * nx + ny * ny + nz * nz)
        # opposite normals could cancel; keep the old one then
        if nn >= 1e-9:
            nor[u, 0], nor[u, 1], nor[u, 2] = nx / nn, ny / nn, nz / nn
        radii[u] = (c * radii[u] + acc[q, 7]) / den
        its[u] = (c * its[u] + acc[q, 8]) / den
        conf[u] = den
        stamps[u] = t


def fuse(assoc: Association, S_t: SurfelMap, S_ref: SurfelMap, T_t: RigidPose, t: int) -> SurfelMap:
    """Confidence-weighted update of matched reference surfels, insertion of the
    unmatched ones. ``S_t`` is in camera coordinates; ``S_ref`` is updated in place
    and returned."""
    to_ref = T_t.inverse()
    ref = S_ref
    Rr = np.ascontiguousarray(to_ref.rotation)
    tr = np.asarray(to_ref.translation, float)
    if len(assoc.new_idx):
        _fuse_matched(np.asarray(assoc.new_idx, np.int64), np.asarray(assoc.ref_idx, np.int64), S_t.confidence,
                      S_t.positions, S_t.normals, S_t.radii, S_t.intensity, Rr, tr, ref.positions, ref.normals,
                      ref.radii, ref.confidence, ref.intensity, ref.timestamps, t)
    u = assoc.unmatched
    if len(u):
        ref.positions = np.concatenate([ref.positions, to_ref.apply(S_t.positions[u])])
        ref.normals = np.concatenate([ref.normals, to_ref.rotate(S_t.normals[u])])
        ref.radii = np.concatenate([ref.radii, S_t.radii[u]])
        ref.confidence = np.concatenate([ref.confidence, S_t.confidence[u]])
        ref.timestamps = np.concatenate([ref.timestamps, np.full(len(u), t, np.int64)])
        ref.intensity = np.concatenate([ref.intensity, S_t.intensity[u]])
    ref.pixels = None
    return ref


def fuse_reference(assoc: Association, S_t: SurfelMap, S_ref: SurfelMap, T_t: RigidPose, t: int) -> SurfelMap:
    """Plain numpy version of :func:`fuse` (kept as a cross-check); returns a new map."""
    to_ref = T_t.inverse()
    P = to_ref.apply(S_t.positions)
    N = to_ref.rotate(S_t.normals)
    ref = S_ref.copy()
    if len(assoc.new_idx):
        a, b = assoc.new_idx, assoc.ref_idx
        m = len(ref)
        ct = S_t.confidence[a]
        wsum = np.bincount(b, ct, minlength=m)
        touched = wsum > 0
        cref = ref.confidence
        denom = cref + wsum

        def blend(old, new):
            acc = np.bincount(b, ct * new, minlength=m)
            return np.where(touched, (cref * old + acc) / denom, old)

        pos = np.stack([blend(ref.positions[:, k], P[a, k]) for k in range(3)], axis=1)
        nor = np.stack([blend(ref.normals[:, k], N[a, k]) for k in range(3)], axis=1)
        nn = np.linalg.norm(nor, axis=1)
        bad = touched & (nn < 1e-9)
        nor = np.where(bad[:, None], ref.normals, nor / np.where(nn < 1e-9, 1.0, nn)[:, None])
        ref.radii = blend(ref.radii, S_t.radii[a])
        ref.intensity = blend(ref.intensity, S_t.intensity[a])
        ref.positions = pos
        ref.normals = nor
        ref.confidence = denom
        ref.timestamps = np.where(touched, t, ref.timestamps)
    u = assoc.unmatched
    ref = SurfelMap(np.concatenate([ref.positions, P[u]]), np.concatenate([ref.normals, N[u]]),
                    np.concatenate([ref.radii, S_t.radii[u]]), np.concatenate([ref.confidence, S_t.confidence[u]]),
                    np.concatenate([ref.timestamps, np.full(len(u), t, np.int64)]),
                    np.concatenate([ref.intensity, S_t.intensity[u]]))
    return ref


def integrate_frame(smap: SurfelMap, depth: DepthMap, image: GrayImage | None, K: Intrinsics, T_t: RigidPose, t: int,
                    thresholds: AssociationThresholds = AssociationThresholds(), surfels: SurfelMap | None = None) -> SurfelMap:
    """create_surfels -> associate -> fuse for one frame."""
    S_t = surfels if surfels is not None else create_surfels(depth, image, K, t)
    assoc = associate(S_t, smap, T_t, K, thresholds)
    return fuse(assoc, S_t, smap, T_t, t)
