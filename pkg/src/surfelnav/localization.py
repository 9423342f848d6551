"""Global localization against a keyframe map built from the reconstruction.

Query pipeline: global descriptor -> k nearest keyframes -> covisibility
clusters (largest first) -> binary feature matching -> P3P RANSAC + refinement.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import InvalidInputError, LocalizationFailure
from .evaluation import rigid_fit
from .formats import GrayImage
from .fusion import SurfelMap, render_model
from .geometry import Intrinsics, RigidPose
from .mapping import DESCRIPTOR_BYTES, FeatureSet, GlobalMap, Keyframe, LocalFeature

GRID = 4
BINS = 8
PATCH_RADIUS = 15
BORDER = 24  # steered comparison offsets stay within PATCH_RADIUS * sqrt(2)


def _as_array(image):
    a = image.data if isinstance(image, GrayImage) else np.asarray(image, float)
    if a.ndim != 2 or a.size == 0:
        raise InvalidInputError("expected a nonempty 2-D image")
    return np.asarray(a, float)


# ---------------------------------------------------------------- global descriptor


def compute_global_descriptor(image, blur=3.0) -> np.ndarray:
    """4x4 grid of 8-bin gradient-orientation histograms, L2-normalised (128-d).

    The image is blurred first so that shading structure, not the fine texture,
    dominates. A constant image gets the uniform unit vector.
    """
    a = _as_array(image)
    if blur > 0:
        a = ndimage.gaussian_filter(a, blur, mode="nearest")
    gy, gx = np.gradient(a)
    mag = np.hypot(gx, gy)
    ang = np.mod(np.arctan2(gy, gx), 2 * np.pi)
    b = np.minimum((ang * (BINS / (2 * np.pi))).astype(np.int64), BINS - 1)
    H, W = a.shape
    ci = np.minimum(np.arange(W) * GRID // W, GRID - 1)
    cj = np.minimum(np.arange(H) * GRID // H, GRID - 1)
    cell = cj[:, None] * GRID + ci[None, :]
    hist = np.bincount((cell * BINS + b).ravel(), weights=mag.ravel(), minlength=GRID * GRID * BINS)
    n = np.linalg.norm(hist)
    if n < 1e-12:
        return np.full(GRID * GRID * BINS, 1.0 / math.sqrt(GRID * GRID * BINS), np.float32)
    return (hist / n).astype(np.float32)


def retrieve_nearest(query, gmap: GlobalMap, k=5):
    """The ``k`` keyframes closest to ``query`` in descriptor space (exhaustive).

    Returns a list of ``(keyframe, distance)`` in ascending distance; ties keep
    keyframe order.
    """
    if k < 1:
        raise InvalidInputError("k must be >= 1")
    if not gmap.keyframes:
        raise InvalidInputError("empty map")
    q = np.asarray(query, np.float64).reshape(-1)
    D = np.linalg.norm(gmap.descriptor_index.astype(np.float64) - q[None, :], axis=1)
    order = np.argsort(D, kind="stable")[:k]
    return [(gmap.keyframes[i], float(D[i])) for i in order]


def cluster_by_covisibility(retrieved, gmap: GlobalMap | None = None, min_shared=10):
    """Connected components of the co-observation graph of ``retrieved``.

    Two keyframes are linked when they share at least ``min_shared`` point ids.
    Clusters are lists of keyframes, largest first; ties go to the cluster that
    holds the better-ranked keyframe.
    """
    kfs = [r[0] if isinstance(r, tuple) else r for r in retrieved]
    if gmap is not None:
        kfs = [gmap.keyframe_by_id(k) if isinstance(k, (int, np.integer)) else k for k in kfs]
    n = len(kfs)
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    ids = [np.unique(kf.point_ids) for kf in kfs]
    if min_shared != math.inf:
        for a in range(n):
            for b in range(a + 1, n):
                if len(np.intersect1d(ids[a], ids[b], assume_unique=True)) >= min_shared:
                    parent[find(b)] = find(a)
    groups = {}
    for a in range(n):
        groups.setdefault(find(a), []).append(a)
    ordered = sorted(groups.values(), key=lambda g: (-len(g), g[0]))
    return [[kfs[a] for a in g] for g in ordered]


# ---------------------------------------------------------------- local features


def _pattern(n_bits=8 * DESCRIPTOR_BYTES, seed=20240229):
    rng = np.random.default_rng(seed)
    p = rng.normal(0.0, (2 * PATCH_RADIUS + 1) / 5.0, size=(n_bits, 4))
    return np.clip(np.round(p), -PATCH_RADIUS, PATCH_RADIUS)


PATTERN = _pattern()

_yy, _xx = np.mgrid[-PATCH_RADIUS:PATCH_RADIUS + 1, -PATCH_RADIUS:PATCH_RADIUS + 1]
_disk = _xx**2 + _yy**2 <= PATCH_RADIUS**2
DISK_X = _xx[_disk]
DISK_Y = _yy[_disk]


@dataclass(frozen=True)
class FeatureParams:
    max_features: int = 1000
    harris_k: float = 0.04
    deriv_sigma: float = 1.0
    window_sigma: float = 1.5
    nms_radius: int = 4
    rel_threshold: float = 0.01
    smooth_sigma: float = 2.0  # for the comparison descriptor


def harris_response(a, params=FeatureParams()):
    s = ndimage.gaussian_filter(a, params.deriv_sigma, mode="nearest") if params.deriv_sigma > 0 else a
    gx = ndimage.sobel(s, axis=1, mode="nearest") / 8.0
    gy = ndimage.sobel(s, axis=0, mode="nearest") / 8.0
    w = params.window_sigma
    xx = ndimage.gaussian_filter(gx * gx, w, mode="nearest")
    yy = ndimage.gaussian_filter(gy * gy, w, mode="nearest")
    xy = ndimage.gaussian_filter(gx * gy, w, mode="nearest")
    return xx * yy - xy * xy - params.harris_k * (xx + yy) ** 2


def _subpixel(R, j, i):
    def off(a, b, c):
        den = a - 2 * b + c
        return np.where(den < 0, np.clip(0.5 * (a - c) / np.where(den < 0, den, -1.0), -0.5, 0.5), 0.0)

    di = off(R[j, i - 1], R[j, i], R[j, i + 1])
    dj = off(R[j - 1, i], R[j, i], R[j + 1, i])
    return i + di, j + dj


def detect_local_features(image, params: FeatureParams = FeatureParams()) -> FeatureSet:
    """Harris corners with non-maximum suppression, intensity-centroid
    orientation and a steered 256-bit comparison descriptor."""
    a = _as_array(image)
    H, W = a.shape
    if H <= 2 * BORDER or W <= 2 * BORDER:
        return FeatureSet()
    R = harris_response(a, params)
    peak = R.max()
    if not peak > 1e-12:
        return FeatureSet()
    size = 2 * params.nms_radius + 1
    local = (R == ndimage.maximum_filter(R, size=size, mode="constant", cval=-np.inf)) & (R > params.rel_threshold * peak)
    local[:BORDER] = False
    local[-BORDER:] = False
    local[:, :BORDER] = False
    local[:, -BORDER:] = False
    j, i = np.nonzero(local)
    if len(j) == 0:
        return FeatureSet()
    resp = R[j, i]
    order = np.lexsort((i, j, -resp))[: params.max_features]
    j, i, resp = j[order], i[order], resp[order]
    u, v = _subpixel(R, j, i)

    # orientation from the intensity centroid of a disk around the corner
    lightly = ndimage.gaussian_filter(a, 1.0, mode="nearest")
    patch = lightly[j[:, None] + DISK_Y[None, :], i[:, None] + DISK_X[None, :]]
    theta = np.arctan2(patch @ DISK_Y, patch @ DISK_X)

    smooth = ndimage.gaussian_filter(a, params.smooth_sigma, mode="nearest")
    c, s = np.cos(theta)[:, None], np.sin(theta)[:, None]
    px = PATTERN[None, :, :]

    def sample(x, y):
        xr = np.rint(c * x - s * y).astype(np.int64)
        yr = np.rint(s * x + c * y).astype(np.int64)
        return smooth[j[:, None] + yr, i[:, None] + xr]

    bits = sample(px[..., 0], px[..., 1]) < sample(px[..., 2], px[..., 3])
    desc = np.packbits(bits, axis=1)
    return FeatureSet(np.stack([u, v], axis=1), np.ones(len(u)), theta, desc, resp)


def hamming_matrix(A, B):
    """(N, M) Hamming distances between packed binary descriptors."""
    a = np.unpackbits(np.asarray(A, np.uint8), axis=1).astype(np.float32)
    b = np.unpackbits(np.asarray(B, np.uint8), axis=1).astype(np.float32)
    return a.sum(1)[:, None] + b.sum(1)[None, :] - 2.0 * (a @ b.T)


def _descriptors(feats):
    if isinstance(feats, FeatureSet):
        return feats.descriptors
    feats = list(feats)
    if not feats:
        return np.zeros((0, DESCRIPTOR_BYTES), np.uint8)
    return np.stack([f.descriptor if isinstance(f, LocalFeature) else f for f in feats])


def _match(qd, rd, ratio):
    if not 0 < ratio <= 1:
        raise InvalidInputError("ratio must lie in (0, 1]")
    if len(qd) == 0 or len(rd) == 0:
        return np.zeros((0, 2), np.int64), np.zeros(0)
    D = hamming_matrix(qd, rd)
    best = np.argmin(D, axis=1)
    d1 = D[np.arange(len(qd)), best]
    if D.shape[1] > 1:
        d2 = np.partition(D, 1, axis=1)[:, 1]
    else:
        d2 = np.full(len(qd), np.inf)
    back = np.argmin(D, axis=0)
    keep = (d1 < ratio * d2) & (back[best] == np.arange(len(qd)))
    q = np.nonzero(keep)[0]
    return np.stack([q, best[q]], axis=1).astype(np.int64), d1[q]


def match_features(query, reference, ratio=0.8):
    """Mutual nearest neighbours under Hamming distance that pass the ratio test.

    Returns an (N, 2) array of ``(query index, reference index)``.
    """
    return _match(_descriptors(query), _descriptors(reference), ratio)[0]


# ---------------------------------------------------------------- PnP


@dataclass
class PnPResult:
    pose: RigidPose  # camera-to-world
    inliers: np.ndarray
    rmse: float
    iterations: int

    def __iter__(self):
        return iter((self.pose, self.inliers))


def _bearings(uv, K: Intrinsics):
    r = np.stack([(uv[:, 0] - K.cx) / K.fx, (uv[:, 1] - K.cy) / K.fy, np.ones(len(uv))], axis=1)
    return r / np.linalg.norm(r, axis=1, keepdims=True)


def p3p(X, f):
    """Camera-from-world hypotheses ``(R, t)`` for three points ``X`` (3, 3) and
    unit bearings ``f`` (3, 3), via Grunert's quartic."""
    a = np.linalg.norm(X[1] - X[2])
    b = np.linalg.norm(X[0] - X[2])
    c = np.linalg.norm(X[0] - X[1])
    if min(a, b, c) < 1e-12:
        return []
    ca = f[1] @ f[2]
    cb = f[0] @ f[2]
    cg = f[0] @ f[1]
    a2, b2, c2 = a * a, b * b, c * c
    q = (a2 - c2) / b2
    p = (a2 + c2) / b2
    A4 = (q - 1) ** 2 - 4 * c2 / b2 * ca**2
    A3 = 4 * (q * (1 - q) * cb - (1 - p) * ca * cg + 2 * c2 / b2 * ca**2 * cb)
    A2 = 2 * (q**2 - 1 + 2 * q**2 * cb**2 + 2 * (b2 - c2) / b2 * ca**2 - 4 * p * ca * cb * cg + 2 * (b2 - a2) / b2 * cg**2)
    A1 = 4 * (-q * (1 + q) * cb + 2 * a2 / b2 * cg**2 * cb - (1 - p) * ca * cg)
    A0 = (1 + q) ** 2 - 4 * a2 / b2 * cg**2
    coeffs = np.array([A4, A3, A2, A1, A0])
    if not np.all(np.isfinite(coeffs)) or np.abs(coeffs).max() < 1e-300:
        return []
    roots = np.roots(coeffs)
    out = []
    for v in roots:
        if abs(v.imag) > 1e-6 * max(1.0, abs(v.real)):
            continue
        v = v.real
        if v <= 0:
            continue
        den = 2 * (cg - v * ca)
        if abs(den) < 1e-12:
            continue
        u = ((q - 1) * v * v - 2 * q * cb * v + 1 + q) / den
        if u <= 0:
            continue
        s1sq = b2 / (1 + v * v - 2 * v * cb)
        if s1sq <= 0:
            continue
        s1 = math.sqrt(s1sq)
        Xc = np.stack([s1 * f[0], u * s1 * f[1], v * s1 * f[2]])
        R, t = rigid_fit(X, Xc)
        out.append((R, t))
    return out


def _reproj_err(R, t, X, uv, K: Intrinsics):
    Xc = X @ R.T + t
    z = Xc[:, 2]
    bad = z <= 1e-9
    z = np.where(bad, 1.0, z)
    e = np.hypot(K.fx * Xc[:, 0] / z + K.cx - uv[:, 0], K.fy * Xc[:, 1] / z + K.cy - uv[:, 1])
    e[bad] = np.inf
    return e


def refine_pose(R, t, X, uv, K: Intrinsics, iterations=30):
    """Levenberg-Marquardt on the reprojection error (world-to-camera R, t)."""
    from .geometry import so3_exp

    def cost(R, t):
        return float(np.sum(_reproj_err(R, t, X, uv, K) ** 2))

    lam = 1e-3
    c0 = cost(R, t)
    for _ in range(iterations):
        Xc = X @ R.T + t
        x, y, z = Xc[:, 0], Xc[:, 1], Xc[:, 2]
        iz = 1.0 / z
        r = np.concatenate([K.fx * x * iz + K.cx - uv[:, 0], K.fy * y * iz + K.cy - uv[:, 1]])
        n = len(X)
        J = np.zeros((2 * n, 6))
        # d(proj)/d(Xc) times d(Xc)/d(xi) = [I, -[Xc]x]
        J[:n, 0] = K.fx * iz
        J[:n, 2] = -K.fx * x * iz**2
        J[n:, 1] = K.fy * iz
        J[n:, 2] = -K.fy * y * iz**2
        J[:n, 3] = -K.fx * x * y * iz**2
        J[:n, 4] = K.fx * (1 + x * x * iz**2)
        J[:n, 5] = -K.fx * y * iz
        J[n:, 3] = -K.fy * (1 + y * y * iz**2)
        J[n:, 4] = K.fy * x * y * iz**2
        J[n:, 5] = K.fy * x * iz
        H = J.T @ J
        g = J.T @ r
        improved = False
        for _ in range(10):
            try:
                dx = -np.linalg.solve(H + lam * np.diag(np.diag(H) + 1e-12), g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            dR = so3_exp(dx[3:])
            Rn = dR @ R
            tn = dR @ t + dx[:3]
            cn = cost(Rn, tn)
            if cn <= c0:
                R, t, improved = Rn, tn, True
                lam = max(lam / 10, 1e-12)
                rel = (c0 - cn) / max(c0, 1e-300)
                c0 = cn
                break
            lam *= 10
        if not improved or rel < 1e-14 or c0 < 1e-20:
            break
    return R, t


def _collinear(X, tol=1e-9):
    d1 = X[1] - X[0]
    d2 = X[2] - X[0]
    scale = max(np.linalg.norm(d1), np.linalg.norm(d2), 1e-300)
    return np.linalg.norm(np.cross(d1, d2)) <= tol * scale * scale


def solve_pnp_ransac(points, pixels, K: Intrinsics, iterations=1000, inlier_px=3.0, seed=0, min_inliers=12,
                     confidence=0.999) -> PnPResult:
    """Robust camera pose from 3D-2D matches.

    Minimal hypotheses come from P3P on three matches, disambiguated by a
    fourth; the best consensus set is refined by Levenberg-Marquardt. The
    returned pose is camera-to-world. ``seed=None`` draws fresh randomness.
    """
    X = np.asarray(points, float).reshape(-1, 3)
    uv = np.asarray(pixels, float).reshape(-1, 2)
    n = len(X)
    if n != len(uv):
        raise InvalidInputError("points and pixels differ in length")
    if n < 4:
        raise LocalizationFailure("PnP needs at least 4 matches")
    f = _bearings(uv, K)
    rng = np.random.default_rng(seed)
    best_count, best = -1, None
    needed = iterations
    it = 0
    while it < min(iterations, needed):
        it += 1
        s = rng.choice(n, 4, replace=False)
        if _collinear(X[s[:3]]):
            continue
        hyps = p3p(X[s[:3]], f[s[:3]])
        if not hyps:
            continue
        e4 = [_reproj_err(R, t, X[s[3:]], uv[s[3:]], K)[0] for R, t in hyps]
        R, t = hyps[int(np.argmin(e4))]
        inl = _reproj_err(R, t, X, uv, K) < inlier_px
        cnt = int(inl.sum())
        if cnt > best_count:
            best_count, best = cnt, (R, t)
            w = cnt / n
            if w >= 1.0:
                needed = it
            elif w > 0:
                needed = min(iterations, int(math.ceil(math.log(1 - confidence) / math.log(1 - w**4))))
    if best is None:
        raise LocalizationFailure("all PnP hypotheses degenerate")
    R, t = best
    inl = np.nonzero(_reproj_err(R, t, X, uv, K) < inlier_px)[0]
    for _ in range(3):
        if len(inl) < 4:
            break
        R, t = refine_pose(R, t, X[inl], uv[inl], K)
        new = np.nonzero(_reproj_err(R, t, X, uv, K) < inlier_px)[0]
        if np.array_equal(new, inl):
            break
        inl = new
    if len(inl) < min_inliers:
        raise LocalizationFailure(f"only {len(inl)} PnP inliers")
    e = _reproj_err(R, t, X[inl], uv[inl], K)
    rmse = float(np.sqrt(np.mean(e**2)))
    return PnPResult(RigidPose.from_rt(R, t).inverse(), inl, rmse, it)


# ---------------------------------------------------------------- map building


def _nearest_index(idx, u, v, radius=1):
    """Surfel index at the rounded pixel, else the first hit in the neighbourhood."""
    H, W = idx.shape
    i0 = np.floor(u + 0.5).astype(np.int64)
    j0 = np.floor(v + 0.5).astype(np.int64)
    out = np.full(len(u), -1, np.int64)
    offs = sorted(((di, dj) for di in range(-radius, radius + 1) for dj in range(-radius, radius + 1)),
                  key=lambda o: (o[0] ** 2 + o[1] ** 2, o[1], o[0]))
    for di, dj in offs:
        i, j = i0 + di, j0 + dj
        ok = (out < 0) & (i >= 0) & (j >= 0) & (i < W) & (j < H)
        cand = np.full(len(u), -1, np.int64)
        cand[ok] = idx[j[ok], i[ok]]
        out = np.where(out < 0, cand, out)
    return out


def _fill_depth(depth):
    """Fill single-pixel holes of a rendered depth raster from the nearest neighbour."""
    d = depth.copy()
    hole = d <= 0
    if hole.any() and (~hole).any():
        _, (jj, ii) = ndimage.distance_transform_edt(hole, return_indices=True)
        dist = ndimage.distance_transform_edt(hole)
        near = dist <= 1.5
        d[hole & near] = depth[jj, ii][hole & near]
    return d


@dataclass(frozen=True)
class MapParams:
    stride: int = 5
    gamma_depth: float = 10.0  # depth-consistency gate against the rendered model, mm
    max_surfel_points: int = 20000
    features: FeatureParams = FeatureParams()


def build_global_map(images, poses, smap: SurfelMap, K: Intrinsics, stride=5, params: MapParams | None = None,
                     names=None) -> GlobalMap:
    """Keyframe map from every ``stride``-th frame of a reconstruction.

    ``poses`` are camera-to-world poses in the frame of ``smap``. The point
    table holds a decimated set of surfel positions plus, for each keyframe
    corner, the intersection of its pixel ray with the tangent plane of the
    surfel rendered there. A keyframe observes every table point that projects
    into it in front of the camera and agrees with the rendered model depth.
    """
    params = params or MapParams(stride=stride)
    stride = stride if stride is not None else params.stride
    images = list(images)
    poses = list(poses.poses) if hasattr(poses, "poses") else list(poses)
    if len(smap) == 0 or not images:
        raise InvalidInputError("cannot build a map from an empty reconstruction")
    if len(images) != len(poses):
        raise InvalidInputError("images and poses differ in length")
    if stride < 1:
        raise InvalidInputError("stride must be >= 1")
    sel = list(range(0, len(images), stride))
    step = max(1, int(math.ceil(len(smap) / params.max_surfel_points)))
    table = [smap.positions[::step]]
    tnorm = [smap.normals[::step]]
    n_table = len(table[0])

    pending = []
    renders = []
    for k in sel:
        T = poses[k].inverse()
        depth, idx = render_model(smap, T, K)
        renders.append(_fill_depth(depth.data))
        feats = detect_local_features(images[k], params.features)
        desc = compute_global_descriptor(images[k])
        if len(feats):
            u, v = feats.keypoints[:, 0], feats.keypoints[:, 1]
            s = _nearest_index(idx, u, v)
            ok = s >= 0
            ray = np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones(len(u))], axis=1)
            sc = np.where(ok, s, 0)
            p = T.apply(smap.positions[sc])
            nrm = T.rotate(smap.normals[sc])
            nr = np.einsum("ij,ij->i", nrm, ray)
            lam = np.einsum("ij,ij->i", nrm, p) / np.where(np.abs(nr) > 1e-12, nr, 1.0)
            ok &= np.abs(nr) > 0.1 * np.linalg.norm(ray, axis=1)
            ok &= (lam > 0) & (np.abs(lam - p[:, 2]) < params.gamma_depth)
            keep = np.nonzero(ok)[0]
            feats = feats[keep]
            Xc = lam[keep, None] * ray[keep]
            ids = np.arange(n_table, n_table + len(keep))
            n_table += len(keep)
            table.append(poses[k].apply(Xc))
            tnorm.append(poses[k].rotate(nrm[keep]))
        else:
            ids = np.zeros(0, np.int64)
        pending.append((k, T, feats, ids, desc))

    points = np.concatenate(table).reshape(-1, 3)
    normals = np.concatenate(tnorm).reshape(-1, 3)
    gmap = GlobalMap([], points, normals)
    P = gmap.points  # float32-rounded, as stored
    keyframes = []
    for (k, T, feats, ids, desc), rd in zip(pending, renders):
        Xc = T.apply(P)
        z = Xc[:, 2]
        front = z > 1e-9
        zs = np.where(front, z, 1.0)
        u = K.fx * Xc[:, 0] / zs + K.cx
        v = K.fy * Xc[:, 1] / zs + K.cy
        i = np.floor(u + 0.5).astype(np.int64)
        j = np.floor(v + 0.5).astype(np.int64)
        vis = front & (i >= 0) & (j >= 0) & (i < K.width) & (j < K.height)
        ref = np.zeros(len(P))
        ref[vis] = rd[j[vis], i[vis]]
        vis &= (ref > 0) & (np.abs(z - ref) < params.gamma_depth)
        own = np.zeros(len(P), bool)
        own[ids] = True
        others = np.nonzero(vis & ~own)[0]
        kp = np.concatenate([feats.keypoints if len(feats) else np.zeros((0, 2)), np.stack([u[others], v[others]], axis=1)])
        pid = np.concatenate([ids, others])
        name = names[k] if names is not None else None
        keyframes.append(Keyframe(k, poses[k], kp, pid, desc, feats, np.arange(len(ids)), name))
    gmap.keyframes = keyframes
    return gmap


# ---------------------------------------------------------------- localization


@dataclass(frozen=True)
class LocalizationConfig:
    k: int = 5
    min_shared: int = 10
    ratio: float = 0.8
    iterations: int = 1000
    inlier_px: float = 3.0
    min_inliers: int = 12
    max_rmse: float = 2.0
    seed: int | None = 0
    features: FeatureParams = FeatureParams()


@dataclass
class LocalizationResult:
    pose: RigidPose
    cluster: list
    inliers: int
    rmse: float
    matches: int


def gather_matches(feats: FeatureSet, cluster, gmap: GlobalMap, ratio=0.8):
    """2D-3D pairs from matching the query against a cluster of keyframes.

    When several keyframes match the same query corner, the lowest Hamming
    distance wins (earlier keyframe on ties).
    """
    best = {}
    for kf in cluster:
        if len(kf.features) == 0:
            continue
        pairs, dist = _match(feats.descriptors, kf.features.descriptors, ratio)
        pid = kf.feature_points()
        for (qi, ri), d in zip(pairs, dist):
            if qi not in best or d < best[qi][0]:
                best[qi] = (d, pid[ri])
    q = np.array(sorted(best), np.int64)
    ids = np.array([best[x][1] for x in q], np.int64)
    return feats.keypoints[q] if len(q) else np.zeros((0, 2)), gmap.points[ids] if len(q) else np.zeros((0, 3))


def localize_detailed(image, gmap: GlobalMap, K: Intrinsics, config: LocalizationConfig = LocalizationConfig()) -> LocalizationResult:
    if not gmap.keyframes:
        raise InvalidInputError("empty map")
    desc = compute_global_descriptor(image)
    feats = detect_local_features(image, config.features)
    retrieved = retrieve_nearest(desc, gmap, config.k)
    clusters = cluster_by_covisibility(retrieved, gmap, config.min_shared)
    reasons = []
    for cluster in clusters:
        uv, X = gather_matches(feats, cluster, gmap, config.ratio)
        try:
            res = solve_pnp_ransac(X, uv, K, config.iterations, config.inlier_px, config.seed, config.min_inliers)
        except LocalizationFailure as e:
            reasons.append(str(e))
            continue
        if res.rmse < config.max_rmse:
            return LocalizationResult(res.pose, [kf.id for kf in cluster], len(res.inliers), res.rmse, len(uv))
        reasons.append(f"inlier rmse {res.rmse:.2f} px")
    raise LocalizationFailure("no cluster yielded a valid pose: " + "; ".join(reasons))


def localize(image, gmap: GlobalMap, K: Intrinsics, config: LocalizationConfig = LocalizationConfig()) -> RigidPose:
    """Camera pose (camera-to-world) of ``image`` in the map frame."""
    return localize_detailed(image, gmap, K, config).pose
