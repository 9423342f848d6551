"""Small synthetic fixtures shared by the test modules."""
import numpy as np

from surfelnav.formats import DepthMap, GrayImage, Trajectory
from surfelnav.geometry import Intrinsics, RigidPose, compose
from surfelnav.synth import SceneSpec, TrajectorySpec, default_intrinsics, generate_scene, generate_trajectory, render_frame


def random_pose(rng, t_scale=10.0, angle=np.pi):
    axis = rng.normal(size=3)
    return RigidPose.from_axis_angle(axis, rng.uniform(-angle, angle), rng.normal(size=3) * t_scale)


def textured(h, w, seed=0, blur=1.0):
    from scipy.ndimage import gaussian_filter

    rng = np.random.default_rng(seed)
    img = gaussian_filter(rng.uniform(size=(h, w)), blur)
    img = (img - img.min()) / (img.max() - img.min())
    return img


def plane_depth(K: Intrinsics, z=50.0, tilt=(0.0, 0.0)):
    """Depth of the plane ``z = z0 + a x + b y`` seen from the origin."""
    a, b = tilt
    jj, ii = np.mgrid[0:K.height, 0:K.width]
    rx = (ii - K.cx) / K.fx
    ry = (jj - K.cy) / K.fy
    return z / (1.0 - a * rx - b * ry)


def sequence(kind="zoom-in", n=10, res=320, seed=1, amplitude=20.0, **kw):
    """Rendered stereo sequence: (scene, K, trajectory, frames, gt trajectory in first-camera frame)."""
    scene = generate_scene(SceneSpec(seed=seed))
    K = default_intrinsics(res, res * 3 // 4)
    traj = generate_trajectory(TrajectorySpec(kind, n, amplitude, **kw), scene)
    frames = [render_frame(scene, p, K) for p in traj.poses]
    P0inv = traj.poses[0].inverse()
    gt = Trajectory(traj.timestamps, [compose(P0inv, p) for p in traj.poses])
    return scene, K, traj, frames, gt


def stereo_range(K, depths, margin=2):
    fb = K.fx * K.baseline
    lo = min(float(d.data.min()) for d in depths)
    hi = max(float(d.data.max()) for d in depths)
    return max(0, int(np.floor(fb / hi)) - margin), int(np.ceil(fb / lo)) + margin


def localization_fixture(res=320, kinds=("zoom-in", "zoom-out", "follow", "random"), counts=(26, 24, 26, 24),
                         queries=(1, 5, 11, 15, 19)):
    """Keyframes from the even frames of four rendered sweeps and held-out odd-frame queries.

    Returns (scene, K, map, keyframe images, keyframe poses, query images, query poses).
    """
    from surfelnav.fusion import SurfelMap, integrate_frame
    from surfelnav.localization import build_global_map
    from surfelnav.synth import render_view

    scene = generate_scene(SceneSpec(seed=1))
    K = default_intrinsics(res, res * 3 // 4)
    kf_img, kf_pose, q_img, q_pose = [], [], [], []
    smap = SurfelMap()
    for kind, n in zip(kinds, counts):
        traj = generate_trajectory(TrajectorySpec(kind, n, amplitude=15, angle=10, seed=3), scene)
        for k, p in enumerate(traj.poses):
            if k % 2 == 0:
                d, im = render_view(scene, p, K)
                kf_img.append(GrayImage(np.clip(im, 0, 1)))
                kf_pose.append(p)
                smap = integrate_frame(smap, DepthMap(d), kf_img[-1], K, p.inverse(), len(kf_img))
            elif k in queries:
                _, im = render_view(scene, p, K)
                q_img.append(GrayImage(np.clip(im, 0, 1)))
                q_pose.append(p)
    gmap = build_global_map(kf_img, kf_pose, smap, K, stride=1)
    return scene, K, gmap, kf_img, kf_pose, q_img, q_pose
