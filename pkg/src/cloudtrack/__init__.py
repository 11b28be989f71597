"""Long-term 3D point tracking in camera-stabilized feature clouds.

The package turns an RGB-D (or pointmap) video into multi-scale feature
clouds, tracks query points through them with neighborhood cross-attention
and an iterative trajectory refiner, and evaluates the results against
ground truth with depth-adaptive 3D metrics.
"""

__version__ = "0.1.0"

from .bundle_io import (  # noqa: F401
    SceneBundle,
    TrackingResult,
    load_checkpoint,
    load_result,
    load_scene,
    save_checkpoint,
    save_result,
    save_scene,
)
from .errors import (  # noqa: F401
    CheckpointMismatchError,
    CloudTrackError,
    ConfigError,
    DivergenceError,
    FormatError,
    ShapeError,
)
from .geometry import CameraIntrinsics, RigidTransform  # noqa: F401
from .metrics import MetricConfig, MetricReport, evaluate  # noqa: F401
from .pipeline import Tracker, TrackerConfig, track_bidirectional, track_video  # noqa: F401
from .synthetic import SceneSpec, default_spec, generate, two_planes_spec  # noqa: F401
from .training import LossConfig, TrainConfig, train_toy  # noqa: F401

__all__ = [
    "__version__",
    "SceneBundle",
    "TrackingResult",
    "load_checkpoint",
    "load_result",
    "load_scene",
    "save_checkpoint",
    "save_result",
    "save_scene",
    "CheckpointMismatchError",
    "CloudTrackError",
    "ConfigError",
    "DivergenceError",
    "FormatError",
    "ShapeError",
    "CameraIntrinsics",
    "RigidTransform",
    "MetricConfig",
    "MetricReport",
    "evaluate",
    "Tracker",
    "TrackerConfig",
    "track_bidirectional",
    "track_video",
    "SceneSpec",
    "default_spec",
    "generate",
    "two_planes_spec",
    "LossConfig",
    "TrainConfig",
    "train_toy",
]
