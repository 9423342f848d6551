"""Stereo surfel reconstruction, frame-to-model tracking and map-based relocalization."""
from .errors import (BehindCameraError, DegenerateConfiguration, FormatError, InvalidInputError, LocalizationFailure,
                     SurfelNavError, TrackingFailure)
from .geometry import Intrinsics, RigidPose, compose

__version__ = "0.1.0"
