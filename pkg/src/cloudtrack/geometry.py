"""Camera geometry, rigid transforms, coordinate conversion and scale.

Conventions used throughout the package:

* Camera frame: ``+x`` right, ``+y`` down, ``+z`` forward (into the scene).
  Depth of a camera-space point is its ``z`` component.
* Projection: ``u = fx * x / z + cx``, ``v = fy * y / z + cy``.  Pixel
  ``(row i, col j)`` has its center at continuous coordinates ``(u, v) =
  (j, i)``, so a point lands in pixel ``j = floor(u + 0.5)``.
* Poses are camera-to-world: ``p_world = R @ p_cam + t``.  The world frame is
  whatever frame the caller anchors poses to (the pipeline uses the first
  camera).
* All geometry runs in float64; callers cast down when feeding the network.

Tracking can run in one of four point coordinate systems
(:class:`CoordinateSystem`): raw pixel+depth ``UVD``, pixel+log-depth
``UV_LOGD``, per-frame camera ``XYZ_CAMERA``, and pose-stabilized world
``XYZ_WORLD``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConfigError,
    DegenerateProjectionError,
    DegenerateScaleError,
    InvalidDepthError,
    ShapeError,
)

__all__ = [
    "CameraIntrinsics",
    "RigidTransform",
    "CoordinateSystem",
    "ScaleFactor",
    "RigidMagnitude",
    "project",
    "unproject",
    "to_world",
    "to_camera",
    "convert_coords",
    "compute_scale_factor",
    "axis_angle_to_matrix",
    "matrix_to_axis_angle",
    "random_rigid_sequence",
    "rotation_angle",
]


def _as_points(points: np.ndarray, name: str = "points") -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim < 1 or pts.shape[-1] != 3:
        raise ShapeError(f"{name} must have trailing dimension 3, got {pts.shape}")
    return pts


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics for one video (shared by all frames)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self) -> None:
        if not (self.fx > 0 and self.fy > 0):
            raise ConfigError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width <= 0 or self.height <= 0:
            raise ConfigError(f"image size must be positive, got {self.width}x{self.height}")
        if not (0 <= self.cx < self.width) or not (0 <= self.cy < self.height):
            raise ConfigError(
                f"principal point ({self.cx}, {self.cy}) outside image "
                f"{self.width}x{self.height}"
            )

    def matrix(self) -> np.ndarray:
        """3x3 calibration matrix."""
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]],
            dtype=np.float64,
        )

    def to_dict(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        try:
            return cls(
                fx=float(d["fx"]),
                fy=float(d["fy"]),
                cx=float(d["cx"]),
                cy=float(d["cy"]),
                width=int(d["width"]),
                height=int(d["height"]),
            )
        except KeyError as exc:
            raise ConfigError(f"intrinsics dict missing key {exc}") from exc


_ORTHO_TOL = 1e-6


@dataclass(frozen=True)
class RigidTransform:
    """Proper rigid motion ``p -> R @ p + t`` with ``R`` in SO(3)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self) -> None:
        rot = np.asarray(self.rotation, dtype=np.float64)
        tra = np.asarray(self.translation, dtype=np.float64).reshape(-1)
        if rot.shape != (3, 3):
            raise ShapeError(f"rotation must be 3x3, got {rot.shape}")
        if tra.shape != (3,):
            raise ShapeError(f"translation must have 3 entries, got {tra.shape}")
        err = np.abs(rot @ rot.T - np.eye(3)).max()
        if err > _ORTHO_TOL:
            raise ConfigError(f"rotation is not orthonormal (max residual {err:.3e})")
        if np.linalg.det(rot) < 0:
            raise ConfigError("rotation has negative determinant (reflection)")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", tra)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_axis_angle(cls, axis_angle: np.ndarray, translation: np.ndarray | None = None) -> "RigidTransform":
        t = np.zeros(3) if translation is None else translation
        return cls(axis_angle_to_matrix(axis_angle), t)

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Return ``self after other``: ``(self.compose(other))(p) == self(other(p))``."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = _as_points(points)
        return pts @ self.rotation.T + self.translation

    def as_flat12(self) -> list[float]:
        """Row-major ``[R | t]`` as 12 floats (serialization form)."""
        mat = np.concatenate([self.rotation, self.translation[:, None]], axis=1)
        return [float(v) for v in mat.reshape(-1)]

    @classmethod
    def from_flat12(cls, values) -> "RigidTransform":
        arr = np.asarray(values, dtype=np.float64).reshape(-1)
        if arr.shape != (12,):
            raise ShapeError(f"flat pose must have 12 entries, got {arr.shape}")
        mat = arr.reshape(3, 4)
        return cls(mat[:, :3], mat[:, 3])


class CoordinateSystem(enum.Enum):
    """Point coordinate system a tracker can operate in."""

    UVD = "uvd"
    UV_LOGD = "uvlogd"
    XYZ_CAMERA = "camera"
    XYZ_WORLD = "world"

    @classmethod
    def from_name(cls, name: str) -> "CoordinateSystem":
        for member in cls:
            if member.value == name:
                return member
        raise ConfigError(f"unknown coordinate system {name!r}; expected one of "
                          f"{[m.value for m in cls]}")

    @property
    def needs_pose(self) -> bool:
        return self is CoordinateSystem.XYZ_WORLD


@dataclass(frozen=True)
class ScaleFactor:
    """Scalar sigma dividing coordinates to normalize cloud variance to ~1."""

    sigma: float

    def __post_init__(self) -> None:
        if not np.isfinite(self.sigma) or self.sigma <= 0:
            raise DegenerateScaleError(f"scale factor must be finite and positive, got {self.sigma}")

    def scale(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) / self.sigma

    def unscale(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) * self.sigma


def project(
    points: np.ndarray,
    intrinsics: CameraIntrinsics,
    return_behind: bool = False,
):
    """Project camera-space points to continuous pixel coordinates.

    Points with ``z < 0`` still project (their coordinates are computed with
    the same formula) but are flagged when ``return_behind`` is set; ``z == 0``
    raises :class:`DegenerateProjectionError`.
    """
    pts = _as_points(points)
    z = pts[..., 2]
    if np.any(z == 0.0):
        raise DegenerateProjectionError("cannot project point with zero depth")
    uv = np.empty(pts.shape[:-1] + (2,), dtype=np.float64)
    uv[..., 0] = intrinsics.fx * pts[..., 0] / z + intrinsics.cx
    uv[..., 1] = intrinsics.fy * pts[..., 1] / z + intrinsics.cy
    if return_behind:
        return uv, z < 0.0
    return uv


def unproject(uv: np.ndarray, depth: np.ndarray, intrinsics: CameraIntrinsics) -> np.ndarray:
    """Lift pixel coordinates plus positive depth to camera-space XYZ."""
    uv_arr = np.asarray(uv, dtype=np.float64)
    if uv_arr.shape[-1] != 2:
        raise ShapeError(f"uv must have trailing dimension 2, got {uv_arr.shape}")
    d = np.asarray(depth, dtype=np.float64)
    if np.any(~np.isfinite(d)) or np.any(d <= 0.0):
        raise InvalidDepthError("unproject requires finite positive depth")
    xyz = np.empty(uv_arr.shape[:-1] + (3,), dtype=np.float64)
    xyz[..., 0] = (uv_arr[..., 0] - intrinsics.cx) / intrinsics.fx * d
    xyz[..., 1] = (uv_arr[..., 1] - intrinsics.cy) / intrinsics.fy * d
    xyz[..., 2] = d
    return xyz


def to_world(points: np.ndarray, pose: RigidTransform) -> np.ndarray:
    """Camera-space points to world via the camera-to-world pose."""
    return pose.apply(points)


def to_camera(points: np.ndarray, pose: RigidTransform) -> np.ndarray:
    """World points back to the camera frame of the given pose."""
    return pose.inverse().apply(points)


def convert_coords(
    points: np.ndarray,
    src: CoordinateSystem,
    dst: CoordinateSystem,
    intrinsics: CameraIntrinsics,
    pose: RigidTransform | None = None,
) -> np.ndarray:
    """Convert points between coordinate systems (routed through camera XYZ).

    ``pose`` is required whenever ``src`` or ``dst`` is ``XYZ_WORLD``.
    Depth-free conversions still validate depth: ``UVD``/``UV_LOGD`` points
    must carry positive (finite log) depth.
    """
    pts = _as_points(points)
    if (src.needs_pose or dst.needs_pose) and pose is None:
        raise ConfigError("world-space conversion requires a camera pose")
    if src is dst:
        return pts.copy()

    # to camera XYZ
    if src is CoordinateSystem.XYZ_CAMERA:
        cam = pts
    elif src is CoordinateSystem.XYZ_WORLD:
        cam = to_camera(pts, pose)
    elif src in (CoordinateSystem.UVD, CoordinateSystem.UV_LOGD):
        depth = pts[..., 2]
        if src is CoordinateSystem.UV_LOGD:
            if np.any(~np.isfinite(depth)):
                raise InvalidDepthError("log-depth must be finite")
            depth = np.exp(depth)
        cam = unproject(pts[..., :2], depth, intrinsics)
    else:  # pragma: no cover - enum is closed
        raise ConfigError(f"unsupported source system {src}")

    # from camera XYZ
    if dst is CoordinateSystem.XYZ_CAMERA:
        return cam
    if dst is CoordinateSystem.XYZ_WORLD:
        return to_world(cam, pose)
    if dst in (CoordinateSystem.UVD, CoordinateSystem.UV_LOGD):
        depth = cam[..., 2]
        if np.any(depth <= 0.0) or np.any(~np.isfinite(depth)):
            raise InvalidDepthError("pixel+depth systems require positive depth")
        uv = project(cam, intrinsics)
        third = np.log(depth) if dst is CoordinateSystem.UV_LOGD else depth
        return np.concatenate([uv, third[..., None]], axis=-1)
    raise ConfigError(f"unsupported destination system {dst}")  # pragma: no cover


def compute_scale_factor(
    points: np.ndarray,
    depths: np.ndarray | None = None,
    depth_upper_bound: float | None = None,
) -> ScaleFactor:
    """Population std of all coordinate components of depth-filtered points.

    ``depths`` defaults to the ``z`` component (camera-space input).  Points
    with depth above ``depth_upper_bound`` are excluded from the statistic
    only; callers keep them in their clouds.  Fewer than two surviving points
    or zero variance raise :class:`DegenerateScaleError`.
    """
    pts = _as_points(points).reshape(-1, 3)
    d = pts[:, 2] if depths is None else np.asarray(depths, dtype=np.float64).reshape(-1)
    if d.shape[0] != pts.shape[0]:
        raise ShapeError(f"depths length {d.shape[0]} != points length {pts.shape[0]}")
    if depth_upper_bound is not None:
        pts = pts[d <= depth_upper_bound]
    if pts.shape[0] < 2:
        raise DegenerateScaleError(
            f"scale statistic needs at least 2 points, got {pts.shape[0]}"
        )
    sigma = float(np.std(pts.reshape(-1)))  # single mean over all 3N components
    if sigma == 0.0:
        raise DegenerateScaleError("point coordinates have zero variance")
    return ScaleFactor(sigma)


# --- axis-angle <-> rotation matrix (Rodrigues) -----------------------------


def axis_angle_to_matrix(axis_angle: np.ndarray) -> np.ndarray:
    """Rotation matrix for an axis-angle vector (angle = norm, radians)."""
    aa = np.asarray(axis_angle, dtype=np.float64).reshape(3)
    angle = float(np.linalg.norm(aa))
    if angle < 1e-12:
        return np.eye(3)
    axis = aa / angle
    x, y, z = axis
    k = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


def matrix_to_axis_angle(rotation: np.ndarray) -> np.ndarray:
    """Inverse of :func:`axis_angle_to_matrix` (angle in [0, pi])."""
    rot = np.asarray(rotation, dtype=np.float64)
    cos_angle = np.clip((np.trace(rot) - 1.0) / 2.0, -1.0, 1.0)
    angle = float(np.arccos(cos_angle))
    if angle < 1e-12:
        return np.zeros(3)
    if np.pi - angle < 1e-6:
        # near pi the off-diagonal form degenerates; at pi, (R + I)/2 equals
        # the outer product axis @ axis.T, so any strong row recovers the axis
        m = (rot + np.eye(3)) / 2.0
        i = int(np.argmax(np.diag(m)))
        axis = m[i] / np.sqrt(max(m[i, i], 1e-12))
        axis = axis / np.linalg.norm(axis)
        return axis * angle
    vec = np.array(
        [rot[2, 1] - rot[1, 2], rot[0, 2] - rot[2, 0], rot[1, 0] - rot[0, 1]]
    )
    return vec / (2.0 * np.sin(angle)) * angle


def rotation_angle(rotation: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix, radians in [0, pi]."""
    cos_angle = np.clip((np.trace(np.asarray(rotation, dtype=np.float64)) - 1.0) / 2.0, -1.0, 1.0)
    return float(np.arccos(cos_angle))


@dataclass(frozen=True)
class RigidMagnitude:
    """Amplitude knobs for random smooth rigid sequences.

    Keyframes every ``keyframe_spacing`` frames get an axis-angle vector of
    norm <= ``max_rotation`` (radians) and a translation with components in
    ``[-max_translation, max_translation]``; in-between frames interpolate
    both componentwise, so per-frame rotation deltas are bounded by
    ``2 * max_rotation / keyframe_spacing``.
    """

    max_rotation: float = 0.0
    max_translation: float = 0.0
    keyframe_spacing: int = 8

    def __post_init__(self) -> None:
        if self.max_rotation < 0 or self.max_translation < 0:
            raise ConfigError("rigid magnitudes must be nonnegative")
        if self.keyframe_spacing < 1:
            raise ConfigError("keyframe spacing must be >= 1")

    def to_dict(self) -> dict:
        return {
            "max_rotation": self.max_rotation,
            "max_translation": self.max_translation,
            "keyframe_spacing": self.keyframe_spacing,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RigidMagnitude":
        return cls(
            max_rotation=float(d["max_rotation"]),
            max_translation=float(d["max_translation"]),
            keyframe_spacing=int(d.get("keyframe_spacing", 8)),
        )


def random_rigid_sequence(
    num_frames: int,
    magnitude: RigidMagnitude,
    seed: int | np.random.Generator = 0,
) -> list[RigidTransform]:
    """Temporally smooth random rigid transform per frame.

    Axis-angle and translation keyframes are drawn every
    ``magnitude.keyframe_spacing`` frames and linearly interpolated
    componentwise in between.  Zero magnitude yields identities.
    """
    if num_frames < 1:
        raise ConfigError(f"num_frames must be >= 1, got {num_frames}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    spacing = magnitude.keyframe_spacing
    num_keys = (num_frames - 1) // spacing + 2

    directions = rng.normal(size=(num_keys, 3))
    norms = np.linalg.norm(directions, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    angles = rng.uniform(0.0, magnitude.max_rotation, size=(num_keys, 1))
    key_aa = directions / norms * angles
    key_t = rng.uniform(-magnitude.max_translation, magnitude.max_translation, size=(num_keys, 3))

    out: list[RigidTransform] = []
    for f in range(num_frames):
        k, frac = divmod(f, spacing)
        w = frac / spacing
        aa = (1.0 - w) * key_aa[k] + w * key_aa[k + 1]
        t = (1.0 - w) * key_t[k] + w * key_t[k + 1]
        out.append(RigidTransform.from_axis_angle(aa, t))
    return out
