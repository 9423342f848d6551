"""Trajectory accuracy (ATE / RTE / RRE) and point-cloud registration metrics.

Trajectories hold camera poses (camera-to-world). Errors are RMSEs: root of
the mean of squared norms.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateConfiguration, InvalidInputError
from .formats import Trajectory
from .geometry import RigidPose, compose, rotation_angle


@dataclass
class RegistrationResult:
    transform: RigidPose
    rmse: float
    iterations: int
    converged: bool
    pairs: int = 0
    history: tuple = ()


def associate(Q: Trajectory, P: Trajectory, tol=0.02):
    """Match poses by nearest timestamp within ``tol`` seconds (one-to-one).

    Returns two equally long pose lists.
    """
    tq = Q.timestamps
    tp = P.timestamps
    if len(tq) == 0 or len(tp) == 0:
        return [], []
    cand = []
    for a, t in enumerate(tq):
        b = int(np.searchsorted(tp, t))
        for k in (b - 1, b):
            if 0 <= k < len(tp) and abs(tp[k] - t) <= tol:
                cand.append((abs(tp[k] - t), a, k))
    cand.sort()
    used_q, used_p, pairs = set(), set(), []
    for _, a, k in cand:
        if a not in used_q and k not in used_p:
            used_q.add(a)
            used_p.add(k)
            pairs.append((a, k))
    pairs.sort()
    return [Q.poses[a] for a, _ in pairs], [P.poses[k] for _, k in pairs]


def _pairs(Q, P, tol):
    if isinstance(Q, Trajectory) and isinstance(P, Trajectory):
        q, p = associate(Q, P, tol)
    else:
        q, p = list(Q), list(P)
        if len(q) != len(p):
            raise InvalidInputError("pose lists differ in length")
    if len(q) < 2:
        raise InvalidInputError("need at least two associated poses")
    return q, p


def rigid_fit(src, dst, weights=None):
    """Least-squares rotation and translation with ``dst ~ R src + t`` (no scale).

    When the points are collinear the rotation about their common axis is
    unobservable; the minimal rotation aligning the two directions is returned.
    """
    src = np.asarray(src, float).reshape(-1, 3)
    dst = np.asarray(dst, float).reshape(-1, 3)
    w = np.ones(len(src)) if weights is None else np.asarray(weights, float)
    w = w / w.sum()
    ms = w @ src
    md = w @ dst
    A = src - ms
    B = dst - md
    H = (A * w[:, None]).T @ B
    U, S, Vt = np.linalg.svd(H)
    if S[0] <= 1e-15:
        R = np.eye(3)
    elif S[1] <= 1e-12 * S[0]:
        a = U[:, 0]
        b = Vt[0]
        R = _min_rotation(a, b)
    else:
        d = np.sign(np.linalg.det(Vt.T @ U.T))
        R = Vt.T @ np.diag([1.0, 1.0, d if d != 0 else 1.0]) @ U.T
    return R, md - R @ ms


def _min_rotation(a, b):
    a = a / np.linalg.norm(a)
    b = b / np.linalg.norm(b)
    v = np.cross(a, b)
    c = float(a @ b)
    s = np.linalg.norm(v)
    if s < 1e-15:
        if c > 0:
            return np.eye(3)
        axis = np.cross(a, [1.0, 0.0, 0.0])
        if np.linalg.norm(axis) < 1e-6:
            axis = np.cross(a, [0.0, 1.0, 0.0])
        axis /= np.linalg.norm(axis)
        return 2 * np.outer(axis, axis) - np.eye(3)
    from .geometry import so3_exp

    return so3_exp(v / s * math.atan2(s, c))


def align_trajectories(Q, P, tol=0.02) -> RigidPose:
    """Rigid transform ``delta_S`` minimising ``sum |trans(Q_t) - delta_S trans(P_t)|^2``."""
    q, p = _pairs(Q, P, tol)
    tq = np.array([x.translation for x in q])
    tp = np.array([x.translation for x in p])
    if np.allclose(tp, tp[0], atol=0, rtol=0) and np.allclose(tq, tq[0], atol=0, rtol=0):
        return RigidPose.translate(*(tq[0] - tp[0]))
    R, t = rigid_fit(tp, tq)
    return RigidPose.from_rt(R, t)


def ate(Q, P, tol=0.02) -> float:
    """Absolute trajectory error (mm) after rigid alignment of the estimate."""
    q, p = _pairs(Q, P, tol)
    S = align_trajectories(q, p)
    err = [np.linalg.norm(compose(qq.inverse(), compose(S, pp)).translation) for qq, pp in zip(q, p)]
    return float(np.sqrt(np.mean(np.square(err))))


def relative_errors(Q, P, tol=0.02):
    """Per-step error transforms ``E_t = (Q_t^-1 Q_t+1)^-1 (P_t^-1 P_t+1)``."""
    q, p = _pairs(Q, P, tol)
    out = []
    for k in range(len(q) - 1):
        dq = compose(q[k].inverse(), q[k + 1])
        dp = compose(p[k].inverse(), p[k + 1])
        out.append(compose(dq.inverse(), dp))
    return out


def rte(Q, P, tol=0.02) -> float:
    """Relative translation error: RMSE of the per-step translation error (mm)."""
    E = relative_errors(Q, P, tol)
    return float(np.sqrt(np.mean([e.translation @ e.translation for e in E])))


def rre(Q, P, tol=0.02) -> float:
    """Relative rotation error: mean per-step rotation angle error (degrees)."""
    E = relative_errors(Q, P, tol)
    return float(np.degrees(np.mean([rotation_angle(e.rotation) for e in E])))


# ---------------------------------------------------------------- clouds


def register_landmarks(src, dst, correspondences=None) -> RigidPose:
    """Closed-form rigid transform taking landmark points ``src`` onto ``dst``.

    ``correspondences`` is an optional (N, 2) index array into ``src``/``dst``;
    without it the rows are taken as paired.
    """
    src = np.asarray(src, float).reshape(-1, 3)
    dst = np.asarray(dst, float).reshape(-1, 3)
    if correspondences is not None:
        c = np.asarray(correspondences, int).reshape(-1, 2)
        src, dst = src[c[:, 0]], dst[c[:, 1]]
    if len(src) != len(dst):
        raise InvalidInputError("landmark lists differ in length")
    if len(src) < 3:
        raise DegenerateConfiguration("need at least three landmark pairs")
    for pts in (src, dst):
        c = pts - pts.mean(axis=0)
        s = np.linalg.svd(c, compute_uv=False)
        if s[1] <= 1e-9 * max(s[0], 1e-300):
            raise DegenerateConfiguration("landmarks are collinear")
    R, t = rigid_fit(src, dst)
    return RigidPose.from_rt(R, t)


def median_spacing(points, tree=None):
    points = np.asarray(points, float)
    if len(points) < 2:
        return 0.0
    tree = tree if tree is not None else cKDTree(points)
    sample = points if len(points) <= 20000 else points[np.random.default_rng(0).choice(len(points), 20000, replace=False)]
    d, _ = tree.query(sample, k=2)
    return float(np.median(d[:, 1]))


@dataclass(frozen=True)
class ICPConfig:
    max_iterations: int = 50
    rel_tol: float = 1e-6
    cutoff: float | None = None  # default: 10x the median point spacing of dst
    cutoff_factor: float = 10.0


def icp_refine(src, dst, init: RigidPose = RigidPose(), config: ICPConfig = ICPConfig(), tree=None) -> RegistrationResult:
    """Point-to-point ICP from ``init``; matches beyond the cutoff are ignored.

    A step is kept only if it does not increase the matched RMSE.
    """
    src = np.asarray(src, float).reshape(-1, 3)
    dst = np.asarray(dst, float).reshape(-1, 3)
    if len(src) == 0 or len(dst) == 0:
        raise InvalidInputError("clouds must be nonempty")
    tree = tree if tree is not None else cKDTree(dst)
    cutoff = config.cutoff if config.cutoff is not None else config.cutoff_factor * max(median_spacing(dst, tree), 1e-12)

    def match(T):
        moved = T.apply(src)
        d, j = tree.query(moved, distance_upper_bound=cutoff)
        ok = np.isfinite(d)
        rm = float(np.sqrt(np.mean(d[ok] ** 2))) if ok.any() else float("inf")
        return rm, ok, j, moved

    T = init
    rmse, ok, j, moved = match(T)
    if not ok.any():
        return RegistrationResult(T, float("inf"), 0, False, 0)
    history = [rmse]
    converged = False
    it = 0
    for it in range(1, config.max_iterations + 1):
        if ok.sum() < 3:
            break
        R, t = rigid_fit(moved[ok], dst[j[ok]])
        Tn = compose(RigidPose.from_rt(R, t), T)
        rn, okn, jn, movedn = match(Tn)
        if not okn.any() or rn > rmse:
            converged = True
            break
        change = (rmse - rn) / max(rmse, 1e-300)
        T, rmse, ok, j, moved = Tn, rn, okn, jn, movedn
        history.append(rmse)
        if change < config.rel_tol or rmse == 0.0:
            converged = True
            break
    return RegistrationResult(T, rmse, it, converged, int(ok.sum()), tuple(history))


def cloud_rmse(src, dst, T: RigidPose = RigidPose(), tree=None) -> float:
    """RMSE of nearest-neighbour distances from ``T src`` to ``dst``."""
    src = np.asarray(src, float).reshape(-1, 3)
    dst = np.asarray(dst, float).reshape(-1, 3)
    if len(src) == 0 or len(dst) == 0:
        raise InvalidInputError("clouds must be nonempty")
    tree = tree if tree is not None else cKDTree(dst)
    d, _ = tree.query(T.apply(src))
    return float(np.sqrt(np.mean(d**2)))
