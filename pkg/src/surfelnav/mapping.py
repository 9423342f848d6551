"""Data types of the localization map: keyframes, local features, point table."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import RigidPose

DESCRIPTOR_BYTES = 32  # 256-bit binary descriptors


@dataclass(frozen=True)
class LocalFeature:
    keypoint: np.ndarray  # (i, j) pixel
    scale: float
    orientation: float  # radians
    descriptor: np.ndarray  # (32,) uint8


@dataclass
class FeatureSet:
    """Struct-of-arrays container for many :class:`LocalFeature`."""

    keypoints: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    scales: np.ndarray = field(default_factory=lambda: np.zeros(0))
    orientations: np.ndarray = field(default_factory=lambda: np.zeros(0))
    descriptors: np.ndarray = field(default_factory=lambda: np.zeros((0, DESCRIPTOR_BYTES), np.uint8))
    responses: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.keypoints = np.asarray(self.keypoints, dtype=float).reshape(-1, 2)
        self.scales = np.asarray(self.scales, dtype=float).reshape(-1)
        self.orientations = np.asarray(self.orientations, dtype=float).reshape(-1)
        self.descriptors = np.asarray(self.descriptors, dtype=np.uint8).reshape(-1, DESCRIPTOR_BYTES)
        self.responses = np.asarray(self.responses, dtype=float).reshape(-1)
        if len(self.responses) == 0 and len(self.keypoints):
            self.responses = np.zeros(len(self.keypoints))
        n = len(self.keypoints)
        if not (len(self.scales) == len(self.orientations) == len(self.descriptors) == len(self.responses) == n):
            raise ValueError("feature arrays must have equal length")

    def __len__(self):
        return len(self.keypoints)

    def __getitem__(self, k):
        if isinstance(k, (int, np.integer)):
            return LocalFeature(self.keypoints[k], float(self.scales[k]), float(self.orientations[k]), self.descriptors[k])
        return FeatureSet(self.keypoints[k], self.scales[k], self.orientations[k], self.descriptors[k], self.responses[k])

    def __iter__(self):
        for k in range(len(self)):
            yield self[k]

    @classmethod
    def from_list(cls, feats):
        if isinstance(feats, FeatureSet):
            return feats
        feats = list(feats)
        if not feats:
            return cls()
        return cls(
            np.array([f.keypoint for f in feats]),
            np.array([f.scale for f in feats]),
            np.array([f.orientation for f in feats]),
            np.array([f.descriptor for f in feats]),
        )


@dataclass
class Keyframe:
    """A mapped frame.

    ``pose`` is the camera pose (camera-to-world). ``keypoints``/``point_ids`` are
    the observations of map points in this image; ``features`` are the local
    features detected in the image and ``feature_obs[k]`` is the observation
    index linked to feature ``k``.
    """

    id: int
    pose: RigidPose
    keypoints: np.ndarray
    point_ids: np.ndarray
    global_descriptor: np.ndarray
    features: FeatureSet = field(default_factory=FeatureSet)
    feature_obs: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    image: str | None = None

    def __post_init__(self):
        self.keypoints = np.asarray(self.keypoints, dtype=float).reshape(-1, 2)
        self.point_ids = np.asarray(self.point_ids, dtype=np.int64).reshape(-1)
        self.global_descriptor = np.asarray(self.global_descriptor, dtype=np.float32).reshape(-1)
        self.feature_obs = np.asarray(self.feature_obs, dtype=np.int64).reshape(-1)
        if len(self.keypoints) != len(self.point_ids):
            raise ValueError("keypoints and point_ids must have the same length")
        if len(self.feature_obs) != len(self.features):
            raise ValueError("feature_obs must be parallel to features")

    def feature_points(self):
        """Point ids of the features (one per feature)."""
        return self.point_ids[self.feature_obs]


@dataclass
class GlobalMap:
    keyframes: list = field(default_factory=list)
    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    normals: np.ndarray | None = None

    def __post_init__(self):
        # the point table is stored at float32 precision on disk
        self.points = np.asarray(self.points, dtype=np.float32).astype(float).reshape(-1, 3)
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float32).astype(float).reshape(-1, 3)
        self._index = None

    def validate(self):
        for kf in self.keyframes:
            if len(kf.point_ids) and (kf.point_ids.min() < 0 or kf.point_ids.max() >= len(self.points)):
                raise ValueError(f"keyframe {kf.id} references a missing point")
            if len(kf.global_descriptor) and abs(np.linalg.norm(kf.global_descriptor) - 1.0) > 1e-5:
                raise ValueError(f"keyframe {kf.id} descriptor is not unit-norm")

    @property
    def descriptor_index(self):
        """(K, D) matrix of keyframe global descriptors, rows in keyframe order."""
        if self._index is None or len(self._index) != len(self.keyframes):
            if not self.keyframes:
                self._index = np.zeros((0, 0), np.float32)
            else:
                self._index = np.stack([kf.global_descriptor for kf in self.keyframes])
        return self._index

    def keyframe_by_id(self, kid):
        for kf in self.keyframes:
            if kf.id == kid:
                return kf
        raise KeyError(kid)
