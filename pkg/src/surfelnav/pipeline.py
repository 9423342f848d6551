"""Per-frame reconstruction loop: depth -> tracking -> fusion."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import TrackingFailure
from .formats import DepthMap, GrayImage, Trajectory
from .fusion import AssociationThresholds, SurfelMap, associate, create_surfels, fuse
from .geometry import Intrinsics, RigidPose, compose
from .tracking import TrackingConfig, estimate_relative_pose, image_pyramid, model_view, update_global_pose

log = logging.getLogger(__name__)


@dataclass
class FrameLog:
    index: int
    surfels: int
    map_size: int
    ms_depth: float = 0.0
    ms_track: float = 0.0
    ms_fuse: float = 0.0
    tracked: bool = True

    @property
    def ms_total(self):
        return self.ms_depth + self.ms_track + self.ms_fuse


@dataclass
class Reconstructor:
    """Holds the surfel model and the pose chain.

    ``poses`` are world-to-camera transforms ``T_t`` with the world being the
    first camera; :meth:`trajectory` reports camera poses (their inverses).
    """

    K: Intrinsics
    thresholds: AssociationThresholds = AssociationThresholds()
    tracking: TrackingConfig = TrackingConfig()
    max_failures: int = 3
    smap: SurfelMap = field(default_factory=SurfelMap)
    poses: list = field(default_factory=list)
    frames: list = field(default_factory=list)
    log: list = field(default_factory=list)

    def __post_init__(self):
        self._prev_image = None
        self._velocity = RigidPose()
        self._failures = 0

    def process(self, t, depth: DepthMap, image: GrayImage | None, ms_depth=0.0) -> RigidPose:
        t0 = time.perf_counter()
        S_t = create_surfels(depth, image, self.K, t)
        pyr = image_pyramid(image, self.tracking.pyramid_levels) if image is not None else None
        tracked = True
        if not self.poses:
            T = RigidPose()
        else:
            T_prev = self.poses[-1]
            view = model_view(self.smap, T_prev, self.K)
            delta = None
            for init in (self._velocity, RigidPose()):
                try:
                    delta = estimate_relative_pose(view, self._prev_image, S_t, pyr, self.tracking, init=init).delta
                    break
                except TrackingFailure as e:
                    log.warning("frame %s: tracking failed (%s)", t, e)
            if delta is None:
                self._failures += 1
                if self._failures > self.max_failures:
                    raise TrackingFailure(f"tracking lost at frame {t}")
                delta = self._velocity
                tracked = False
            else:
                self._failures = 0
            T = update_global_pose(T_prev, delta)
            self._velocity = delta
        t1 = time.perf_counter()
        if tracked:
            assoc = associate(S_t, self.smap, T, self.K, self.thresholds)
            self.smap = fuse(assoc, S_t, self.smap, T, t)
        t2 = time.perf_counter()
        self.poses.append(T)
        self.frames.append(t)
        self._prev_image = pyr
        self.log.append(FrameLog(t, len(S_t), len(self.smap), ms_depth, 1e3 * (t1 - t0), 1e3 * (t2 - t1), tracked))
        return T

    def trajectory(self, timestamps=None) -> Trajectory:
        stamps = np.asarray(self.frames, float) if timestamps is None else np.asarray(timestamps, float)
        return Trajectory(stamps, [T.inverse() for T in self.poses])


def reconstruct(frames, K: Intrinsics, provider, thresholds=AssociationThresholds(), tracking=TrackingConfig(), timestamps=None):
    """Run the loop over ``frames``, an iterable of ``(t, left, right)``.

    ``provider(t, left, right)`` returns the frame's DepthMap.
    """
    rec = Reconstructor(K, thresholds, tracking)
    for t, left, right in frames:
        s = time.perf_counter()
        depth = provider(t, left, right)
        rec.process(t, depth, left, 1e3 * (time.perf_counter() - s))
    return rec
