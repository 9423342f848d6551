import pytest

from scenes import plane_depth, sequence
from surfelnav.depth import file_depth_provider
from surfelnav.errors import TrackingFailure
from surfelnav.evaluation import ate, rre
from surfelnav.formats import DepthMap, write_depth_map
from surfelnav.geometry import Intrinsics, RigidPose
from surfelnav.pipeline import Reconstructor, reconstruct
from surfelnav.tracking import TrackingConfig


def test_untracked_frames_reuse_velocity_then_fail():
    K = Intrinsics(100.0, 100.0, 39.5, 29.5, 80, 60)
    D = DepthMap(plane_depth(K, 50.0))
    rec = Reconstructor(K, tracking=TrackingConfig(w_photo=0.0), max_failures=2)
    for t in range(3):
        assert rec.process(t, D, None) == RigidPose()
    assert [f.tracked for f in rec.log] == [True, False, False]
    size = len(rec.smap)
    with pytest.raises(TrackingFailure):
        rec.process(3, D, None)
    assert len(rec.smap) == size


def test_short_sequence_with_file_depth(tmp_path):
    _, K, traj, frames, gt = sequence("random", 6, res=160, amplitude=4.0, angle=3.0, seed=1)
    for k, (_, _, D) in enumerate(frames):
        write_depth_map(D, tmp_path / f"{k:06d}.dpth")
    prov = file_depth_provider(tmp_path)
    rec = reconstruct([(k, L, R) for k, (L, R, _) in enumerate(frames)], K, lambda t, l, r: prov(t))
    est = rec.trajectory(traj.timestamps)
    assert ate(gt, est) < 0.1 and rre(gt, est) < 0.1
    assert len(rec.log) == 6 and all(f.tracked for f in rec.log)
