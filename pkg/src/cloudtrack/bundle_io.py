"""On-disk formats: scene bundles, tracking results, checkpoints.

Two containers, both little-endian and byte-deterministic (load -> save is
byte-identical):

* **Scene bundle** - a directory with ``manifest.json`` plus one raw binary
  file per tensor.  The manifest carries the schema version, frame count and
  image size, camera intrinsics, optional camera-to-world poses (one row of
  12 numbers: row-major rotation then translation), and a tensor registry
  mapping each name to dtype / shape / file / byte offset / CRC-32.
* **Single-file container** - magic ``CTRK1\\n``, a little-endian uint64
  header length, a JSON header with the same kind of tensor registry
  (offsets into the trailing payload blob), then the payload.  Used for
  tracking results and checkpoints.

Every tensor's CRC-32 is stored and re-verified on load; a flipped byte
raises :class:`~cloudtrack.errors.IntegrityError`.  Mask-like tensors are
stored as u8 and exposed in memory as bool.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, IntegrityError, ShapeError
from .geometry import CameraIntrinsics, CoordinateSystem, RigidTransform, project, unproject

__all__ = [
    "SceneBundle",
    "TrackingResult",
    "dump_json",
    "save_scene",
    "load_scene",
    "save_result",
    "load_result",
    "save_checkpoint",
    "load_checkpoint",
    "reverse_bundle",
    "export_ply",
    "save_run_manifest",
]

SCHEMA_VERSION = 1
_MAGIC = b"CTRK1\n"


def dump_json(obj) -> str:
    """Canonical JSON used by every manifest (sorted keys, trailing newline)."""
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _le_bytes(arr: np.ndarray) -> bytes:
    """Array payload as contiguous little-endian bytes."""
    arr = np.ascontiguousarray(arr)
    if arr.dtype.byteorder == ">":
        arr = arr.astype(arr.dtype.newbyteorder("<"))
    return arr.tobytes()


def _dtype_tag(arr: np.ndarray) -> str:
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    return dt.str


def _crc(data: bytes) -> int:
    return zlib.crc32(data) & 0xFFFFFFFF


def _decode_tensor(name: str, entry: dict, data: bytes) -> np.ndarray:
    try:
        dtype = np.dtype(str(entry["dtype"]))
        shape = tuple(int(v) for v in entry["shape"])
        crc = int(entry["crc32"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"tensor {name!r}: malformed registry entry") from exc
    want = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(data) != want:
        raise FormatError(
            f"tensor {name!r}: registry says {want} bytes, file holds {len(data)}"
        )
    if _crc(data) != crc:
        raise IntegrityError(f"tensor {name!r}: CRC-32 mismatch (corrupted data)")
    return np.frombuffer(data, dtype=dtype).reshape(shape).copy()


@dataclass
class SceneBundle:
    """An in-memory scene: per-frame point maps, camera, queries, optional GT.

    ``pointmap`` is camera-space XYZ per pixel; ``valid`` masks pixels with
    usable depth.  ``queries`` rows are ``(t_q, x, y, z)`` with the position
    in the camera space of frame ``t_q``.  ``gt_tracks`` is camera-space per
    frame.  ``features`` optionally replaces the learned encoder with
    externally computed grid features at ``feature_stride``.
    """

    intrinsics: CameraIntrinsics
    pointmap: np.ndarray
    valid: np.ndarray
    queries: np.ndarray
    rgb: np.ndarray | None = None
    poses: list[RigidTransform] | None = None
    features: np.ndarray | None = None
    feature_stride: int | None = None
    gt_tracks: np.ndarray | None = None
    gt_vis: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.pointmap = np.asarray(self.pointmap, dtype=np.float32)
        if self.pointmap.ndim != 4 or self.pointmap.shape[-1] != 3:
            raise ShapeError(f"pointmap must be (S, H, W, 3), got {self.pointmap.shape}")
        s, h, w, _ = self.pointmap.shape
        if (self.intrinsics.height, self.intrinsics.width) != (h, w):
            raise ShapeError(
                f"intrinsics are for {self.intrinsics.width}x{self.intrinsics.height}, "
                f"point maps are {w}x{h}"
            )
        self.valid = np.asarray(self.valid) != 0
        if self.valid.shape != (s, h, w):
            raise ShapeError(f"valid must be ({s}, {h}, {w}), got {self.valid.shape}")
        self.queries = np.asarray(self.queries, dtype=np.float32)
        if self.queries.ndim != 2 or self.queries.shape[1] != 4:
            raise ShapeError(f"queries must be (Q, 4), got {self.queries.shape}")
        tq = self.queries[:, 0]
        if tq.size and (np.any(tq != np.round(tq)) or np.any(tq < 0) or np.any(tq >= s)):
            raise ShapeError("query frame indices must be integers in [0, S)")
        if self.rgb is not None:
            self.rgb = np.asarray(self.rgb, dtype=np.uint8)
            if self.rgb.shape != (s, h, w, 3):
                raise ShapeError(f"rgb must be ({s}, {h}, {w}, 3), got {self.rgb.shape}")
        if self.poses is not None:
            if len(self.poses) != s:
                raise ShapeError(f"need {s} poses, got {len(self.poses)}")
        if (self.features is None) != (self.feature_stride is None):
            raise ConfigError("features and feature_stride must be given together")
        if self.features is not None:
            self.features = np.asarray(self.features, dtype=np.float32)
            stride = int(self.feature_stride)
            if stride < 1:
                raise ConfigError(f"feature_stride must be >= 1, got {stride}")
            gh, gw = -(-h // stride), -(-w // stride)
            if self.features.ndim != 4 or self.features.shape[:3] != (s, gh, gw):
                raise ShapeError(
                    f"features must be ({s}, {gh}, {gw}, C) for stride {stride}, "
                    f"got {self.features.shape}"
                )
            self.feature_stride = stride
        if (self.gt_tracks is None) != (self.gt_vis is None):
            raise ConfigError("gt_tracks and gt_vis must be given together")
        if self.gt_tracks is not None:
            self.gt_tracks = np.asarray(self.gt_tracks, dtype=np.float32)
            self.gt_vis = np.asarray(self.gt_vis) != 0
            q = self.queries.shape[0]
            if self.gt_tracks.shape != (q, s, 3):
                raise ShapeError(f"gt_tracks must be ({q}, {s}, 3), got {self.gt_tracks.shape}")
            if self.gt_vis.shape != (q, s):
                raise ShapeError(f"gt_vis must be ({q}, {s}), got {self.gt_vis.shape}")

    @property
    def num_frames(self) -> int:
        return self.pointmap.shape[0]

    @property
    def height(self) -> int:
        return self.pointmap.shape[1]

    @property
    def width(self) -> int:
        return self.pointmap.shape[2]

    @property
    def num_queries(self) -> int:
        return self.queries.shape[0]

    @property
    def has_ground_truth(self) -> bool:
        return self.gt_tracks is not None

    def pose(self, frame: int) -> RigidTransform:
        """Camera-to-world pose of a frame (identity when poses are absent)."""
        if self.poses is None:
            return RigidTransform.identity()
        return self.poses[frame]


@dataclass
class TrackingResult:
    """Estimated trajectories: positions in the requested coordinate system
    (unscaled), hard visibility, image-plane projections, per-frame validity.
    """

    coordinate_system: CoordinateSystem
    sigma: float
    positions: np.ndarray
    visibility: np.ndarray
    pixels: np.ndarray
    valid: np.ndarray
    intrinsics: CameraIntrinsics
    poses: list[RigidTransform] | None = None

    def __post_init__(self) -> None:
        self.positions = np.asarray(self.positions, dtype=np.float32)
        if self.positions.ndim != 3 or self.positions.shape[-1] != 3:
            raise ShapeError(f"positions must be (Q, S, 3), got {self.positions.shape}")
        q, s, _ = self.positions.shape
        self.visibility = np.asarray(self.visibility) != 0
        self.valid = np.asarray(self.valid) != 0
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        if self.visibility.shape != (q, s):
            raise ShapeError(f"visibility must be ({q}, {s}), got {self.visibility.shape}")
        if self.valid.shape != (q, s):
            raise ShapeError(f"valid must be ({q}, {s}), got {self.valid.shape}")
        if self.pixels.shape != (q, s, 2):
            raise ShapeError(f"pixels must be ({q}, {s}, 2), got {self.pixels.shape}")
        self.sigma = float(self.sigma)
        if not (np.isfinite(self.sigma) and self.sigma > 0):
            raise ConfigError(f"sigma must be positive and finite, got {self.sigma}")
        if self.coordinate_system.needs_pose and self.poses is None:
            raise ConfigError("world-space results must record the camera poses")
        if self.poses is not None and len(self.poses) != s:
            raise ShapeError(f"need {s} poses, got {len(self.poses)}")
        if not np.all(np.isfinite(self.positions[self.valid])):
            raise ShapeError("positions must be finite where valid")

    @property
    def num_queries(self) -> int:
        return self.positions.shape[0]

    @property
    def num_frames(self) -> int:
        return self.positions.shape[1]

    def camera_positions(self) -> np.ndarray:
        """Positions converted to per-frame camera space, float64 (Q, S, 3)."""
        from .geometry import convert_coords  # local import avoids cycle at module load

        q, s, _ = self.positions.shape
        out = np.empty((q, s, 3), dtype=np.float64)
        for t in range(s):
            pose = self.poses[t] if self.poses is not None else None
            out[:, t] = convert_coords(
                self.positions[:, t].astype(np.float64),
                src=self.coordinate_system,
                dst=CoordinateSystem.XYZ_CAMERA,
                intrinsics=self.intrinsics,
                pose=pose,
            )
        return out

    def verify_projection(self, atol: float = 1e-5) -> None:
        """Check pixels == project(to_camera(position)) for valid frames.

        Tolerance is ``atol`` plus a few ulps of the stored float32 pixels
        (storage quantization).  Raises :class:`IntegrityError` on failure.
        """
        cam = self.camera_positions()
        check = self.valid & np.all(np.isfinite(self.pixels), axis=-1) & (cam[..., 2] > 0)
        if not np.any(check):
            return
        uv, _ = project(cam[check], self.intrinsics, return_behind=True)
        stored = self.pixels[check].astype(np.float64)
        tol = atol + 4.0 * np.spacing(np.abs(self.pixels[check])).astype(np.float64)
        bad = np.abs(uv - stored) > tol
        if np.any(bad):
            worst = float(np.max(np.abs(uv - stored)))
            raise IntegrityError(
                f"stored pixels disagree with projected positions (max err {worst:.3e})"
            )


# ---------------------------------------------------------------------------
# scene directory format


def _scene_tensors(bundle: SceneBundle) -> dict[str, np.ndarray]:
    tensors: dict[str, np.ndarray] = {
        "pointmap": bundle.pointmap,
        "valid": bundle.valid.astype(np.uint8),
        "queries": bundle.queries,
    }
    if bundle.rgb is not None:
        tensors["rgb"] = bundle.rgb
    if bundle.features is not None:
        tensors["features"] = bundle.features
    if bundle.gt_tracks is not None:
        tensors["gt_tracks"] = bundle.gt_tracks
        tensors["gt_vis"] = bundle.gt_vis.astype(np.uint8)
    return tensors


def save_scene(directory: str | Path, bundle: SceneBundle) -> Path:
    """Write a scene bundle directory; returns the manifest path."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    registry = {}
    for name, arr in _scene_tensors(bundle).items():
        data = _le_bytes(arr)
        fname = f"{name}.bin"
        (d / fname).write_bytes(data)
        registry[name] = {
            "dtype": _dtype_tag(arr),
            "shape": list(arr.shape),
            "file": fname,
            "byte_offset": 0,
            "crc32": _crc(data),
        }
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "kind": "scene",
        "num_frames": bundle.num_frames,
        "height": bundle.height,
        "width": bundle.width,
        "intrinsics": bundle.intrinsics.to_dict(),
        "poses": None if bundle.poses is None else [p.as_flat12() for p in bundle.poses],
        "feature_stride": bundle.feature_stride,
        "tensors": registry,
    }
    path = d / "manifest.json"
    path.write_text(dump_json(manifest), encoding="utf-8")
    return path


def load_scene(directory: str | Path) -> SceneBundle:
    """Read a scene bundle directory, verifying shapes and checksums."""
    d = Path(directory)
    mpath = d / "manifest.json"
    if not mpath.is_file():
        raise FormatError(f"no manifest.json in {d}")
    try:
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest.json is not valid JSON: {exc}") from exc
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise FormatError(
            f"unsupported schema version {manifest.get('schema_version')!r}"
        )
    if manifest.get("kind") != "scene":
        raise FormatError(f"expected a scene manifest, got kind={manifest.get('kind')!r}")
    try:
        registry = manifest["tensors"]
        intr = CameraIntrinsics.from_dict(manifest["intrinsics"])
        poses_raw = manifest["poses"]
        stride = manifest["feature_stride"]
    except KeyError as exc:
        raise FormatError(f"manifest missing key {exc}") from exc

    arrays: dict[str, np.ndarray] = {}
    for name, entry in registry.items():
        fpath = d / str(entry.get("file", ""))
        if not fpath.is_file():
            raise FormatError(f"tensor {name!r}: file {entry.get('file')!r} not found")
        blob = fpath.read_bytes()
        off = int(entry.get("byte_offset", 0))
        arrays[name] = _decode_tensor(name, entry, blob[off:])

    for required in ("pointmap", "valid", "queries"):
        if required not in arrays:
            raise FormatError(f"scene is missing required tensor {required!r}")
    poses = None
    if poses_raw is not None:
        poses = [RigidTransform.from_flat12(row) for row in poses_raw]
    bundle = SceneBundle(
        intrinsics=intr,
        pointmap=arrays["pointmap"],
        valid=arrays["valid"],
        queries=arrays["queries"],
        rgb=arrays.get("rgb"),
        poses=poses,
        features=arrays.get("features"),
        feature_stride=None if stride is None else int(stride),
        gt_tracks=arrays.get("gt_tracks"),
        gt_vis=arrays.get("gt_vis"),
    )
    if (bundle.num_frames, bundle.height, bundle.width) != (
        int(manifest["num_frames"]), int(manifest["height"]), int(manifest["width"])
    ):
        raise FormatError("manifest frame count / image size disagree with tensors")
    return bundle


# ---------------------------------------------------------------------------
# single-file container format


def _write_container(path: str | Path, kind: str, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    registry = {}
    blobs: list[bytes] = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        data = _le_bytes(arr)
        pad = (-offset) % 8
        if pad:
            blobs.append(b"\x00" * pad)
            offset += pad
        registry[name] = {
            "dtype": _dtype_tag(arr),
            "shape": list(arr.shape),
            "file": "",
            "byte_offset": offset,
            "crc32": _crc(data),
        }
        blobs.append(data)
        offset += len(data)
    header = dump_json(
        {"schema_version": SCHEMA_VERSION, "kind": kind, "meta": meta, "tensors": registry}
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def _read_container(path: str | Path, expect_kind: str) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if len(raw) < len(_MAGIC) + 8 or raw[: len(_MAGIC)] != _MAGIC:
        raise FormatError(f"{path}: not a tracking container (bad magic)")
    (hlen,) = struct.unpack("<Q", raw[len(_MAGIC) : len(_MAGIC) + 8])
    start = len(_MAGIC) + 8
    if start + hlen > len(raw):
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: malformed header JSON") from exc
    if header.get("schema_version") != SCHEMA_VERSION:
        raise FormatError(f"unsupported schema version {header.get('schema_version')!r}")
    if header.get("kind") != expect_kind:
        raise FormatError(f"expected kind {expect_kind!r}, got {header.get('kind')!r}")
    payload = raw[start + hlen :]
    arrays = {}
    for name, entry in header.get("tensors", {}).items():
        off = int(entry["byte_offset"])
        dtype = np.dtype(str(entry["dtype"]))
        nbytes = int(np.prod([int(v) for v in entry["shape"]], dtype=np.int64)) * dtype.itemsize
        if off + nbytes > len(payload):
            raise FormatError(f"tensor {name!r}: payload truncated")
        arrays[name] = _decode_tensor(name, entry, payload[off : off + nbytes])
    return header, arrays


def save_result(path: str | Path, result: TrackingResult) -> None:
    """Write a tracking result container."""
    tensors = {
        "positions": result.positions,
        "visibility": result.visibility.astype(np.uint8),
        "pixels": result.pixels,
        "valid": result.valid.astype(np.uint8),
    }
    if result.poses is not None:
        tensors["poses"] = np.asarray([p.as_flat12() for p in result.poses], dtype=np.float64)
    meta = {
        "coordinate_system": result.coordinate_system.value,
        "sigma": result.sigma,
        "intrinsics": result.intrinsics.to_dict(),
        "has_poses": result.poses is not None,
    }
    _write_container(path, "tracking_result", meta, tensors)


def load_result(path: str | Path, verify: bool = True) -> TrackingResult:
    """Read a tracking result; re-checks the pixel/position consistency."""
    header, arrays = _read_container(path, "tracking_result")
    meta = header.get("meta", {})
    try:
        mode = CoordinateSystem.from_name(str(meta["coordinate_system"]))
        sigma = float(meta["sigma"])
        intr = CameraIntrinsics.from_dict(meta["intrinsics"])
    except KeyError as exc:
        raise FormatError(f"result meta missing key {exc}") from exc
    for required in ("positions", "visibility", "pixels", "valid"):
        if required not in arrays:
            raise FormatError(f"result is missing required tensor {required!r}")
    poses = None
    if "poses" in arrays:
        poses = [RigidTransform.from_flat12(row) for row in arrays["poses"]]
    result = TrackingResult(
        coordinate_system=mode,
        sigma=sigma,
        positions=arrays["positions"],
        visibility=arrays["visibility"],
        pixels=arrays["pixels"],
        valid=arrays["valid"],
        intrinsics=intr,
        poses=poses,
    )
    if verify:
        result.verify_projection()
    return result


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    """Write model parameters plus a free-form metadata dict."""
    _write_container(path, "checkpoint", meta, arrays)


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    """Read a checkpoint; returns ``(meta, arrays)``."""
    header, arrays = _read_container(path, "checkpoint")
    return header.get("meta", {}), arrays


# ---------------------------------------------------------------------------
# misc adapters


def reverse_bundle(bundle: SceneBundle) -> SceneBundle:
    """Time-reverse every per-frame field (for the backward tracking pass).

    Query positions are unchanged - the frame content is the same, only its
    index moves to ``S - 1 - t_q``.  Applying this twice is the identity.
    """
    s = bundle.num_frames
    queries = bundle.queries.copy()
    queries[:, 0] = (s - 1) - queries[:, 0]
    return SceneBundle(
        intrinsics=bundle.intrinsics,
        pointmap=np.ascontiguousarray(bundle.pointmap[::-1]),
        valid=np.ascontiguousarray(bundle.valid[::-1]),
        queries=queries,
        rgb=None if bundle.rgb is None else np.ascontiguousarray(bundle.rgb[::-1]),
        poses=None if bundle.poses is None else list(reversed(bundle.poses)),
        features=None if bundle.features is None else np.ascontiguousarray(bundle.features[::-1]),
        feature_stride=bundle.feature_stride,
        gt_tracks=None if bundle.gt_tracks is None else np.ascontiguousarray(bundle.gt_tracks[:, ::-1]),
        gt_vis=None if bundle.gt_vis is None else np.ascontiguousarray(bundle.gt_vis[:, ::-1]),
    )


def export_ply(path: str | Path, points: np.ndarray, colors: np.ndarray | None = None) -> None:
    """Write an ASCII PLY point cloud for external viewers."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {pts.shape[0]}",
        "property float x",
        "property float y",
        "property float z",
    ]
    if colors is not None:
        colors = np.asarray(colors, dtype=np.uint8).reshape(-1, 3)
        if colors.shape[0] != pts.shape[0]:
            raise ShapeError("colors must match points")
        lines += ["property uchar red", "property uchar green", "property uchar blue"]
    lines.append("end_header")
    body = []
    for i in range(pts.shape[0]):
        row = f"{pts[i, 0]:.6f} {pts[i, 1]:.6f} {pts[i, 2]:.6f}"
        if colors is not None:
            row += f" {colors[i, 0]} {colors[i, 1]} {colors[i, 2]}"
        body.append(row)
    Path(path).write_text("\n".join(lines + body) + "\n", encoding="utf-8")


def save_run_manifest(path: str | Path, config: dict, seed: int) -> None:
    """Record config hash, seed, and code version alongside a run's outputs."""
    import hashlib

    from . import __version__

    canonical = json.dumps(config, sort_keys=True).encode("utf-8")
    manifest = {
        "code_version": __version__,
        "config": config,
        "config_sha256": hashlib.sha256(canonical).hexdigest(),
        "seed": int(seed),
    }
    Path(path).write_text(dump_json(manifest), encoding="utf-8")
