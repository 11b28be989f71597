"""Deterministic synthetic RGB-D scenes with exact ground truth.

Bodies are seeded random point sets (colored blobs or planar patches) moved
by smooth random rigid motions anchored at their centers; the camera follows
its own rigid trajectory with the first frame defining the world frame.
Every frame is rendered by projecting all points and z-buffering at pixel
resolution: the nearest point claims each pixel (ties broken by body id,
then point id), the winner's exact camera-space position becomes the point
map entry, and a ground-truth point is visible exactly when it wins its own
pixel.  Ground-truth tracks store the same float32 camera positions that the
point maps do, so a visible track and its depth pixel agree bitwise.

Everything is driven by one seed: the same spec always produces a
byte-identical bundle.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .bundle_io import SceneBundle
from .errors import ConfigError
from .geometry import (
    CameraIntrinsics,
    RigidMagnitude,
    RigidTransform,
    project,
    random_rigid_sequence,
)

__all__ = [
    "BodySpec",
    "SceneSpec",
    "default_spec",
    "two_planes_spec",
    "palindrome",
    "generate",
    "verify_bundle",
]


@dataclass(frozen=True)
class BodySpec:
    """One rigid point-set body."""

    shape: str = "blob"  # "blob" | "plane"
    num_points: int = 2000
    center: tuple[float, float, float] = (0.0, 0.0, 4.0)
    extent: float = 1.0
    color: tuple[int, int, int] = (200, 80, 80)
    motion: RigidMagnitude = field(default_factory=RigidMagnitude)

    def __post_init__(self) -> None:
        if self.shape not in ("blob", "plane"):
            raise ConfigError(f"unknown body shape {self.shape!r}")
        if self.num_points < 1:
            raise ConfigError(f"body needs at least one point, got {self.num_points}")
        if not (np.isfinite(self.extent) and self.extent > 0):
            raise ConfigError(f"extent must be positive and finite, got {self.extent}")
        if not np.all(np.isfinite(self.center)):
            raise ConfigError("body center must be finite")

    def to_dict(self) -> dict:
        return {
            "shape": self.shape,
            "num_points": self.num_points,
            "center": list(self.center),
            "extent": self.extent,
            "color": list(self.color),
            "motion": self.motion.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BodySpec":
        return cls(
            shape=str(d["shape"]),
            num_points=int(d["num_points"]),
            center=tuple(float(v) for v in d["center"]),
            extent=float(d["extent"]),
            color=tuple(int(v) for v in d["color"]),
            motion=RigidMagnitude.from_dict(d["motion"]),
        )


@dataclass(frozen=True)
class SceneSpec:
    """Everything needed to generate one scene deterministically."""

    num_frames: int = 24
    intrinsics: CameraIntrinsics = field(
        default_factory=lambda: CameraIntrinsics(
            fx=64.0, fy=64.0, cx=32.0, cy=24.0, width=64, height=48
        )
    )
    bodies: tuple[BodySpec, ...] = ()
    camera_motion: RigidMagnitude = field(default_factory=RigidMagnitude)
    num_queries: int = 32
    query_birth_frames: tuple[int, ...] = (0,)
    mirror_motion: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        if self.num_frames < 1:
            raise ConfigError(f"num_frames must be >= 1, got {self.num_frames}")
        if not self.bodies:
            raise ConfigError("scene needs at least one body")
        if self.num_queries < 1:
            raise ConfigError(f"num_queries must be >= 1, got {self.num_queries}")
        if not self.query_birth_frames:
            raise ConfigError("query_birth_frames must not be empty")
        for b in self.query_birth_frames:
            if not 0 <= b < self.num_frames:
                raise ConfigError(f"query birth frame {b} outside [0, {self.num_frames})")

    def to_dict(self) -> dict:
        return {
            "num_frames": self.num_frames,
            "intrinsics": self.intrinsics.to_dict(),
            "bodies": [b.to_dict() for b in self.bodies],
            "camera_motion": self.camera_motion.to_dict(),
            "num_queries": self.num_queries,
            "query_birth_frames": list(self.query_birth_frames),
            "mirror_motion": self.mirror_motion,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(
            num_frames=int(d["num_frames"]),
            intrinsics=CameraIntrinsics.from_dict(d["intrinsics"]),
            bodies=tuple(BodySpec.from_dict(b) for b in d["bodies"]),
            camera_motion=RigidMagnitude.from_dict(d["camera_motion"]),
            num_queries=int(d["num_queries"]),
            query_birth_frames=tuple(int(v) for v in d["query_birth_frames"]),
            mirror_motion=bool(d.get("mirror_motion", False)),
            seed=int(d["seed"]),
        )


def default_spec(seed: int = 0) -> SceneSpec:
    """Desk-scale default: a static backdrop plane plus two moving blobs."""
    return SceneSpec(
        bodies=(
            BodySpec(
                shape="plane",
                num_points=2000,
                center=(0.0, 0.0, 8.0),
                extent=6.0,
                color=(70, 90, 180),
            ),
            BodySpec(
                shape="blob",
                num_points=2000,
                center=(-0.8, 0.3, 4.5),
                extent=0.6,
                color=(200, 80, 80),
                motion=RigidMagnitude(max_rotation=0.2, max_translation=0.2),
            ),
            BodySpec(
                shape="blob",
                num_points=2000,
                center=(0.9, -0.4, 3.2),
                extent=0.5,
                color=(90, 190, 90),
                motion=RigidMagnitude(max_rotation=0.25, max_translation=0.18),
            ),
        ),
        seed=seed,
    )


def two_planes_spec(seed: int = 0) -> SceneSpec:
    """Two overlapping fronto-parallel planes - the occlusion stress case."""
    return SceneSpec(
        bodies=(
            BodySpec(
                shape="plane",
                num_points=2500,
                center=(0.0, 0.0, 6.0),
                extent=3.0,
                color=(60, 110, 200),
            ),
            BodySpec(
                shape="plane",
                num_points=1500,
                center=(0.2, 0.1, 3.5),
                extent=1.2,
                color=(220, 160, 60),
                motion=RigidMagnitude(max_rotation=0.1, max_translation=0.6),
            ),
        ),
        num_queries=48,
        seed=seed,
    )


def palindrome(spec: SceneSpec) -> SceneSpec:
    """Make every motion retrace itself so frames s and S-1-s coincide."""
    return replace(spec, mirror_motion=True)


def _sample_body(rng: np.random.Generator, body: BodySpec) -> tuple[np.ndarray, np.ndarray]:
    """Seeded points (world frame, centered on the body) and per-point colors."""
    c = np.asarray(body.center, dtype=np.float64)
    if body.shape == "blob":
        pts = c + rng.normal(size=(body.num_points, 3)) * body.extent
    else:  # plane: a tilted square patch
        tilt = rng.normal(size=3) * 0.15
        tilt[2] = 1.0
        normal = tilt / np.linalg.norm(tilt)
        a1 = np.cross(normal, [0.0, 1.0, 0.0])
        a1 /= np.linalg.norm(a1)
        a2 = np.cross(normal, a1)
        uv = rng.uniform(-body.extent, body.extent, size=(body.num_points, 2))
        pts = c + uv[:, :1] * a1 + uv[:, 1:] * a2
    base = np.asarray(body.color, dtype=np.float64)
    jitter = rng.uniform(-40.0, 40.0, size=(body.num_points, 3))
    colors = np.clip(base + jitter, 0, 255).astype(np.uint8)
    return pts, colors


def _anchored_sequence(
    rng: np.random.Generator, body: BodySpec, num_frames: int
) -> list[RigidTransform]:
    """Body motion that rotates about the body center rather than the origin."""
    seq = random_rigid_sequence(num_frames, body.motion, seed=rng)
    center = np.asarray(body.center, dtype=np.float64)
    to_c = RigidTransform(np.eye(3), center)
    from_c = RigidTransform(np.eye(3), -center)
    return [to_c.compose(x).compose(from_c) for x in seq]


def _mirror(seq: list[RigidTransform]) -> list[RigidTransform]:
    s = len(seq)
    return [seq[min(t, s - 1 - t)] for t in range(s)]


def generate(spec: SceneSpec) -> SceneBundle:
    """Render the scene and return a bundle with exact ground truth."""
    rng = np.random.default_rng(spec.seed)
    intr = spec.intrinsics
    s_frames, h, w = spec.num_frames, intr.height, intr.width

    points_list, colors_list, body_of = [], [], []
    motions: list[list[RigidTransform]] = []
    for bi, body in enumerate(spec.bodies):
        pts, cols = _sample_body(rng, body)
        points_list.append(pts)
        colors_list.append(cols)
        body_of.append(np.full(body.num_points, bi, dtype=np.int64))
        motions.append(_anchored_sequence(rng, body, s_frames))
    base_points = np.concatenate(points_list)  # world frame, frame-0 camera = world
    colors = np.concatenate(colors_list)
    body_ids = np.concatenate(body_of)
    n_total = base_points.shape[0]

    cam_seq = random_rigid_sequence(s_frames, spec.camera_motion, seed=rng)
    inv0 = cam_seq[0].inverse()
    poses = [inv0.compose(x) for x in cam_seq]  # camera-to-world, identity at frame 0
    if spec.mirror_motion:
        motions = [_mirror(m) for m in motions]
        poses = _mirror(poses)

    rgb = np.zeros((s_frames, h, w, 3), dtype=np.uint8)
    pointmap = np.zeros((s_frames, h, w, 3), dtype=np.float32)
    valid = np.zeros((s_frames, h, w), dtype=bool)
    cam_f32_all = np.zeros((s_frames, n_total, 3), dtype=np.float32)
    vis_all = np.zeros((s_frames, n_total), dtype=bool)
    in_frustum_any = np.zeros(len(spec.bodies), dtype=bool)

    for t in range(s_frames):
        world = np.empty_like(base_points)
        for bi, body in enumerate(spec.bodies):
            sel = body_ids == bi
            world[sel] = motions[bi][t].apply(base_points[sel])
        cam = poses[t].inverse().apply(world)
        cam_f32 = cam.astype(np.float32)
        cam_f32_all[t] = cam_f32

        z = cam[:, 2]
        front = z > 0.0
        uv = np.full((n_total, 2), -1.0)
        if np.any(front):
            uv[front], _ = project(cam[front], intr, return_behind=True)
        col = np.floor(uv[:, 0] + 0.5).astype(np.int64)
        row = np.floor(uv[:, 1] + 0.5).astype(np.int64)
        inside = front & (col >= 0) & (col < w) & (row >= 0) & (row < h)
        for bi in range(len(spec.bodies)):
            if not in_frustum_any[bi] and np.any(inside & (body_ids == bi)):
                in_frustum_any[bi] = True

        idx = np.nonzero(inside)[0]
        if idx.size:
            flat = row[idx] * w + col[idx]
            # nearest wins; ties by body id then point id.  Points are stored
            # body-major, so the global index already encodes that order.
            order = np.lexsort((idx, z[idx], flat))
            ordered_flat = flat[order]
            first = np.ones(order.size, dtype=bool)
            first[1:] = ordered_flat[1:] != ordered_flat[:-1]
            winners = idx[order[first]]
            win_flat = ordered_flat[first]
            pointmap[t].reshape(-1, 3)[win_flat] = cam_f32[winners]
            valid[t].reshape(-1)[win_flat] = True
            rgb[t].reshape(-1, 3)[win_flat] = colors[winners]
            vis_all[t, winners] = True

    for bi, body in enumerate(spec.bodies):
        if not in_frustum_any[bi]:
            warnings.warn(
                f"body {bi} ({body.shape}) never enters the camera frustum",
                stacklevel=2,
            )

    # queries: points visible at their birth frame, birth frames round-robin
    per_birth: dict[int, int] = {}
    for i in range(spec.num_queries):
        b = spec.query_birth_frames[i % len(spec.query_birth_frames)]
        per_birth[b] = per_birth.get(b, 0) + 1
    chosen: list[tuple[int, int]] = []  # (birth_frame, point_index)
    for b in sorted(per_birth):
        candidates = np.nonzero(vis_all[b])[0]
        if candidates.size == 0:
            raise ConfigError(f"no visible points to query at frame {b}")
        take = min(per_birth[b], candidates.size)
        picks = rng.choice(candidates, size=take, replace=False)
        chosen.extend((b, int(p)) for p in np.sort(picks))

    q_count = len(chosen)
    queries = np.zeros((q_count, 4), dtype=np.float32)
    gt_tracks = np.zeros((q_count, s_frames, 3), dtype=np.float32)
    gt_vis = np.zeros((q_count, s_frames), dtype=bool)
    for qi, (b, p) in enumerate(chosen):
        queries[qi, 0] = b
        queries[qi, 1:] = cam_f32_all[b, p]
        gt_tracks[qi] = cam_f32_all[:, p]
        gt_vis[qi] = vis_all[:, p]

    return SceneBundle(
        intrinsics=intr,
        pointmap=pointmap,
        valid=valid,
        queries=queries,
        rgb=rgb,
        poses=poses,
        gt_tracks=gt_tracks,
        gt_vis=gt_vis,
    )


def verify_bundle(bundle: SceneBundle, reproj_tol: float = 1e-5, depth_tol: float = 1e-6) -> list[str]:
    """Cross-check ground truth against the rendered maps.

    Returns a list of human-readable failures (empty when consistent):
    every visible track point must project onto a valid pixel whose stored
    point agrees with the track (same projection within ``reproj_tol``
    pixels, same depth within ``depth_tol``), and the query rows must match
    the tracks at their birth frames.
    """
    failures: list[str] = []
    if not bundle.has_ground_truth:
        return ["bundle has no ground truth to verify"]
    intr = bundle.intrinsics
    h, w = bundle.height, bundle.width
    for q in range(bundle.num_queries):
        tq = int(bundle.queries[q, 0])
        if not np.allclose(bundle.queries[q, 1:], bundle.gt_tracks[q, tq], atol=1e-6):
            failures.append(f"query {q}: row disagrees with track at birth frame {tq}")
        for t in range(bundle.num_frames):
            if not bundle.gt_vis[q, t]:
                continue
            p = bundle.gt_tracks[q, t].astype(np.float64)
            if p[2] <= 0:
                failures.append(f"query {q} frame {t}: visible but behind camera")
                continue
            uv, _ = project(p[None], intr, return_behind=True)
            col = int(np.floor(uv[0, 0] + 0.5))
            row = int(np.floor(uv[0, 1] + 0.5))
            if not (0 <= col < w and 0 <= row < h):
                failures.append(f"query {q} frame {t}: visible but projects outside image")
                continue
            if not bundle.valid[t, row, col]:
                failures.append(f"query {q} frame {t}: pixel ({row},{col}) has no depth")
                continue
            stored = bundle.pointmap[t, row, col].astype(np.float64)
            if abs(stored[2] - p[2]) > depth_tol:
                failures.append(
                    f"query {q} frame {t}: depth {stored[2]:.6f} != track z {p[2]:.6f}"
                )
                continue
            suv, _ = project(stored[None], intr, return_behind=True)
            err = float(np.max(np.abs(suv - uv)))
            if err > reproj_tol:
                failures.append(
                    f"query {q} frame {t}: stored point reprojects {err:.2e} px away"
                )
    return failures
