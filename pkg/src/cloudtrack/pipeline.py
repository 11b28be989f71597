"""End-to-end video tracking.

The tracker builds one multi-scale feature cloud per frame in the requested
tracking coordinate system, normalizes coordinates by the scene scale sigma
(population std of the depth-bounded cloud), and refines trajectories over
sliding windows of ``window_length`` frames advancing by half a window:

* window 0 initializes every trajectory at its query position;
* each later window copies the overlap (first half) from the previous
  window's estimates and constant-extrapolates its last frame into the
  second half, with visibility logits carried along;
* queries born inside a window start at their query position from birth on;
* the last window pads by repeating the final frame; padded slots never
  reach the output, and later windows override the overlap.

Neighbor membership is found on the *unscaled* mode-space clouds (uniform
scaling preserves nearest-neighbor order), while every quantity the network
sees - offsets, trajectory state, motion deltas - is divided by sigma.
Support bags are gathered once per video around each query in its birth
frame; context bags follow the current estimates every iteration.

A backward pass over the time-reversed bundle fills the frames before each
query's birth; the merged result takes frame t_q and later from the forward
pass and earlier frames from the reversed one.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from .bundle_io import (
    SceneBundle,
    TrackingResult,
    load_checkpoint,
    reverse_bundle,
    save_checkpoint,
)
from .errors import (
    CheckpointMismatchError,
    ConfigError,
    EmptyCloudError,
    EmptyWindowError,
    ShapeError,
)
from .feature_cloud import (
    CloudLevel,
    EncoderConfig,
    attach_coordinates,
    build_pyramid,
    encode_frame,
    features_from_external,
)
from .geometry import (
    CameraIntrinsics,
    CoordinateSystem,
    RigidTransform,
    ScaleFactor,
    compute_scale_factor,
    convert_coords,
    project,
)
from .knn import SpatialIndex, fixed_2d_neighbors
from .n2n import LevelBags, NeighborhoodConfig, summarize_levels
from .refiner import RefinerConfig, iterative_refine
from .trajectory import TrajectoryState

__all__ = [
    "TrackerConfig",
    "Tracker",
    "plan_windows",
    "window_frames",
    "add_support_grid",
    "track_video",
    "track_bidirectional",
]


@dataclass(frozen=True)
class TrackerConfig:
    """Everything that determines the tracker's behavior and parameters."""

    mode: str = "camera"            # uvd | uvlogd | camera | world
    window_length: int = 16
    neighbor_mode: str = "knn3d"    # knn3d | fixed2d
    fixed2d_radius: int = 2
    depth_bound_factor: float = 2.0
    scale_per_window: bool = False  # per-video sigma by default (inference)
    support_grid: int = 0           # 0 disables auxiliary support queries
    bidirectional: bool = False
    seed: int = 0
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    neighborhood: NeighborhoodConfig = field(default_factory=NeighborhoodConfig)
    refiner: RefinerConfig = field(default_factory=RefinerConfig)

    def __post_init__(self) -> None:
        CoordinateSystem.from_name(self.mode)  # validates
        if self.window_length < 2:
            raise ConfigError(f"window_length must be >= 2, got {self.window_length}")
        if self.neighbor_mode not in ("knn3d", "fixed2d"):
            raise ConfigError(f"unknown neighbor mode {self.neighbor_mode!r}")
        if self.fixed2d_radius < 0:
            raise ConfigError(f"fixed2d_radius must be >= 0, got {self.fixed2d_radius}")
        if not (np.isfinite(self.depth_bound_factor) and self.depth_bound_factor > 0):
            raise ConfigError(
                f"depth_bound_factor must be positive, got {self.depth_bound_factor}"
            )
        if self.support_grid < 0:
            raise ConfigError(f"support_grid must be >= 0, got {self.support_grid}")

    @property
    def coordinate_system(self) -> CoordinateSystem:
        return CoordinateSystem.from_name(self.mode)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "window_length": self.window_length,
            "neighbor_mode": self.neighbor_mode,
            "fixed2d_radius": self.fixed2d_radius,
            "depth_bound_factor": self.depth_bound_factor,
            "scale_per_window": self.scale_per_window,
            "support_grid": self.support_grid,
            "bidirectional": self.bidirectional,
            "seed": self.seed,
            "encoder": self.encoder.to_dict(),
            "neighborhood": self.neighborhood.to_dict(),
            "refiner": self.refiner.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrackerConfig":
        return cls(
            mode=str(d["mode"]),
            window_length=int(d["window_length"]),
            neighbor_mode=str(d["neighbor_mode"]),
            fixed2d_radius=int(d["fixed2d_radius"]),
            depth_bound_factor=float(d["depth_bound_factor"]),
            scale_per_window=bool(d["scale_per_window"]),
            support_grid=int(d["support_grid"]),
            bidirectional=bool(d["bidirectional"]),
            seed=int(d["seed"]),
            encoder=EncoderConfig.from_dict(d["encoder"]),
            neighborhood=NeighborhoodConfig.from_dict(d["neighborhood"]),
            refiner=RefinerConfig.from_dict(d["refiner"]),
        )


def plan_windows(num_frames: int, window_length: int) -> list[int]:
    """Window start frames: from 0, advancing by half a window to cover all."""
    if num_frames < 1:
        raise EmptyWindowError("video has no frames")
    starts = [0]
    while starts[-1] + window_length < num_frames:
        starts.append(starts[-1] + window_length // 2)
    return starts


def window_frames(start: int, window_length: int, num_frames: int) -> list[int]:
    """Global frame index per window slot; trailing slots repeat the last frame."""
    return [min(start + i, num_frames - 1) for i in range(window_length)]


def add_support_grid(bundle: SceneBundle, grid_n: int) -> np.ndarray:
    """Auxiliary queries on a grid_n x grid_n pixel grid of frame 0.

    Each grid cell contributes its center pixel, lifted through the frame-0
    point map; cells without valid depth are skipped.  Returns ``(A, 4)``
    rows shaped like regular queries (birth frame 0).
    """
    if grid_n < 1:
        raise ConfigError(f"support grid must be >= 1, got {grid_n}")
    h, w = bundle.height, bundle.width
    rows = []
    for gi in range(grid_n):
        for gj in range(grid_n):
            py = min(int((gi + 0.5) * h / grid_n), h - 1)
            px = min(int((gj + 0.5) * w / grid_n), w - 1)
            if not bundle.valid[0, py, px]:
                continue
            x, y, z = bundle.pointmap[0, py, px]
            rows.append((0.0, x, y, z))
    return np.asarray(rows, dtype=np.float32).reshape(-1, 4)


def materialize_params(params: nn.ParamStore, config: TrackerConfig) -> None:
    """Create every parameter the tracker can touch, via tiny dummy passes.

    Makes checkpoint loading strict and deterministic: all names and shapes
    exist before any real data is seen.
    """
    from .trajectory import assemble_tokens, initialize_window
    from .refiner import refine_once

    encode_frame(np.zeros((4, 4, 3), dtype=np.uint8), params, config.encoder)
    ncfg = config.neighborhood
    cf = config.encoder.out_channels
    k = 2
    bags = [
        LevelBags(
            context_feats=nn.Tensor(np.zeros((1, 2, k, cf), dtype=np.float32)),
            context_offsets=np.zeros((1, 2, k, 3)),
            support_feats=nn.Tensor(np.zeros((1, k, cf), dtype=np.float32)),
            support_offsets=np.zeros((1, k, 3)),
            query_feats=nn.Tensor(np.zeros((1, cf), dtype=np.float32)),
        )
        for _ in range(ncfg.num_levels)
    ]
    summaries = summarize_levels(params, ncfg, bags)
    state = initialize_window(np.zeros((1, 3)), 2)
    tokens = assemble_tokens(summaries, state, np.zeros((1, 2, 2)), num_bands=config.refiner.num_bands)
    refine_once(params, config.refiner, tokens)


@dataclass
class _Geometry:
    """Per-video static structure: clouds, indices, scale, support membership."""

    mode: CoordinateSystem
    sigma_video: ScaleFactor
    num_levels: int
    strides: list[int]                      # pixel stride per level
    shapes: list[tuple[int, int]]           # grid (h, w) per level
    coords: list[list[np.ndarray]]          # [t][l] (N, 3) unscaled mode coords
    cell_valid: list[list[np.ndarray]]      # [t][l] (N,) bool
    indices: list[list[SpatialIndex]]       # [t][l] on unscaled mode coords
    queries: np.ndarray                     # (Q, 4) as given
    query_mode: np.ndarray                  # (Q, 3) unscaled mode positions
    query_frames: np.ndarray                # (Q,) int64
    support_ids: list[np.ndarray]           # [l] (Q, K) cell ids in birth frames
    support_offsets: list[np.ndarray]       # [l] (Q, K, 3) unscaled offsets
    p2n_cells: list[np.ndarray]             # [l] (Q,) own-cell id at birth frame
    poses: list[RigidTransform] | None
    intrinsics: CameraIntrinsics
    num_frames: int


class Tracker:
    """Holds parameters plus configuration; runs the sliding-window pipeline."""

    def __init__(self, config: TrackerConfig, params: nn.ParamStore | None = None):
        self.config = config
        self.params = params if params is not None else nn.ParamStore(seed=config.seed)
        materialize_params(self.params, config)

    # -- checkpointing ------------------------------------------------------

    @classmethod
    def from_checkpoint(cls, path, **overrides) -> "Tracker":
        """Rebuild a tracker from a checkpoint, optionally overriding
        behavioral config fields; parameter names/shapes must match exactly.
        """
        meta, arrays = load_checkpoint(path)
        if "tracker" not in meta:
            raise CheckpointMismatchError("checkpoint has no tracker config")
        config = TrackerConfig.from_dict(meta["tracker"])
        if overrides:
            config = replace(config, **overrides)
        tracker = cls(config)
        tracker.params.load_arrays(arrays, strict=True)
        return tracker

    def save_checkpoint(self, path, extra_meta: dict | None = None) -> None:
        meta = {"tracker": self.config.to_dict()}
        if extra_meta:
            meta.update(extra_meta)
        save_checkpoint(path, self.params.arrays(), meta)

    # -- feature clouds ------------------------------------------------------

    def frame_pyramid(self, bundle: SceneBundle, t: int, mode_coords: np.ndarray,
                      cell_valid: np.ndarray) -> list[CloudLevel]:
        """Feature pyramid of one frame (fresh tensors; call per forward)."""
        cfg = self.config
        if bundle.features is not None:
            if bundle.feature_stride != cfg.encoder.downsample:
                raise ConfigError(
                    f"external features at stride {bundle.feature_stride}, "
                    f"encoder config expects {cfg.encoder.downsample}"
                )
            feats = features_from_external(
                bundle.features[t], (bundle.height, bundle.width),
                bundle.feature_stride, expected_channels=cfg.encoder.out_channels,
            )
        elif bundle.rgb is not None:
            feats = encode_frame(bundle.rgb[t], self.params, cfg.encoder)
        else:
            raise ConfigError("bundle has neither rgb nor precomputed features")
        return build_pyramid(feats, mode_coords, cell_valid, cfg.neighborhood.num_levels)

    def _mode_grid(self, bundle: SceneBundle, t: int) -> np.ndarray:
        """Full-resolution point map of frame t in the tracking system."""
        mode = self.config.coordinate_system
        cam = bundle.pointmap[t].astype(np.float64).reshape(-1, 3)
        ok = bundle.valid[t].reshape(-1)
        out = np.zeros_like(cam)
        if np.any(ok):
            out[ok] = convert_coords(
                cam[ok], CoordinateSystem.XYZ_CAMERA, mode,
                bundle.intrinsics, pose=bundle.pose(t),
            )
        return out.reshape(bundle.height, bundle.width, 3)

    # -- geometry preparation -----------------------------------------------

    def prepare(self, bundle: SceneBundle, queries: np.ndarray) -> _Geometry:
        cfg = self.config
        mode = cfg.coordinate_system
        if mode.needs_pose and bundle.poses is None:
            raise ConfigError("world-space tracking requires camera poses")
        queries = np.asarray(queries, dtype=np.float32)
        if queries.ndim != 2 or queries.shape[1] != 4:
            raise ShapeError(f"queries must be (Q, 4), got {queries.shape}")
        if queries.shape[0] == 0:
            raise ShapeError("need at least one query")
        s = bundle.num_frames

        base_stride = cfg.encoder.downsample
        strides = [base_stride * (1 << l) for l in range(cfg.neighborhood.num_levels)]
        mode_grids = [self._mode_grid(bundle, t) for t in range(s)]

        coords: list[list[np.ndarray]] = []
        cell_valid: list[list[np.ndarray]] = []
        indices: list[list[SpatialIndex]] = []
        shapes: list[tuple[int, int]] = []
        for t in range(s):
            c_t, v_t, ix_t = [], [], []
            for l, stride in enumerate(strides):
                c, v = attach_coordinates(mode_grids[t], bundle.valid[t], stride)
                gh = -(-bundle.height // stride)
                gw = -(-bundle.width // stride)
                if t == 0:
                    shapes.append((gh, gw))
                if not np.any(v):
                    raise EmptyCloudError(f"frame {t} has no valid cells at level {l}")
                ids = np.nonzero(v)[0].astype(np.int64)
                c_t.append(c)
                v_t.append(v)
                ix_t.append(SpatialIndex(c[ids], ids))
            coords.append(c_t)
            cell_valid.append(v_t)
            indices.append(ix_t)

        # scene scale: std of depth-bounded cloud coordinates (whole video)
        tq = queries[:, 0].astype(np.int64)
        if np.any(tq < 0) or np.any(tq >= s):
            raise ShapeError("query birth frames outside the video")
        bound = cfg.depth_bound_factor * float(np.max(queries[:, 3].astype(np.float64)))
        sigma_video = self._scale_over(bundle, mode_grids, range(s), bound)

        # query positions in mode space
        q_count = queries.shape[0]
        query_mode = np.zeros((q_count, 3), dtype=np.float64)
        for qi in range(q_count):
            query_mode[qi] = convert_coords(
                queries[qi, 1:].astype(np.float64), CoordinateSystem.XYZ_CAMERA, mode,
                bundle.intrinsics, pose=bundle.pose(int(tq[qi])),
            )

        # support bags: membership + offsets around each query at birth
        support_ids, support_offsets, p2n_cells = [], [], []
        for l in range(cfg.neighborhood.num_levels):
            k = self._bag_size()
            ids_l = np.zeros((q_count, k), dtype=np.int64)
            off_l = np.zeros((q_count, k, 3), dtype=np.float64)
            own_l = np.zeros(q_count, dtype=np.int64)
            for b in np.unique(tq):
                sel = np.nonzero(tq == b)[0]
                nb = self._neighbors(
                    indices[b][l], coords[b][l], cell_valid[b][l], shapes[l],
                    strides[l], query_mode[sel], bundle.intrinsics,
                    bundle.poses, int(b),
                )
                ids_l[sel] = nb.ids
                off_l[sel] = nb.offsets
                own = indices[b][l].query(query_mode[sel], 1)
                own_l[sel] = own.ids[:, 0]
            support_ids.append(ids_l)
            support_offsets.append(off_l)
            p2n_cells.append(own_l)

        return _Geometry(
            mode=mode,
            sigma_video=sigma_video,
            num_levels=cfg.neighborhood.num_levels,
            strides=strides,
            shapes=shapes,
            coords=coords,
            cell_valid=cell_valid,
            indices=indices,
            queries=queries,
            query_mode=query_mode,
            query_frames=tq,
            support_ids=support_ids,
            support_offsets=support_offsets,
            p2n_cells=p2n_cells,
            poses=bundle.poses,
            intrinsics=bundle.intrinsics,
            num_frames=s,
        )

    def _scale_over(self, bundle, mode_grids, frames, bound) -> ScaleFactor:
        pts, depths = [], []
        for t in frames:
            ok = bundle.valid[t].reshape(-1)
            pts.append(mode_grids[t].reshape(-1, 3)[ok])
            depths.append(bundle.pointmap[t].astype(np.float64).reshape(-1, 3)[ok, 2])
        return compute_scale_factor(
            np.concatenate(pts), np.concatenate(depths), depth_upper_bound=bound
        )

    def _bag_size(self) -> int:
        if self.config.neighbor_mode == "fixed2d":
            return (2 * self.config.fixed2d_radius + 1) ** 2
        return self.config.neighborhood.k

    def _neighbors(self, index, coords_flat, valid_flat, shape, stride,
                   positions, intrinsics, poses, frame):
        """Neighbor membership for queries in one frame/level (unscaled)."""
        if self.config.neighbor_mode == "knn3d":
            return index.query(positions, self.config.neighborhood.k)
        h, w = shape
        px = self._pixels(positions, frame, intrinsics, poses)
        rows = np.clip(np.floor(px[:, 1] + 0.5).astype(np.int64) // stride, 0, h - 1)
        cols = np.clip(np.floor(px[:, 0] + 0.5).astype(np.int64) // stride, 0, w - 1)
        return fixed_2d_neighbors(
            coords_flat.reshape(h, w, 3), valid_flat.reshape(h, w),
            positions, np.stack([rows, cols], axis=1), self.config.fixed2d_radius,
        )

    def _pixels(self, mode_positions: np.ndarray, frame: int,
                intrinsics: CameraIntrinsics,
                poses: list[RigidTransform] | None) -> np.ndarray:
        """Continuous pixel coords of unscaled mode positions (safe at z<=0)."""
        mode = self.config.coordinate_system
        if mode in (CoordinateSystem.UVD, CoordinateSystem.UV_LOGD):
            return mode_positions[..., :2].copy()
        cam = mode_positions
        if mode is CoordinateSystem.XYZ_WORLD:
            cam = poses[frame].inverse().apply(mode_positions)
        z = np.maximum(cam[..., 2], 1e-6)
        return np.stack(
            [
                intrinsics.fx * cam[..., 0] / z + intrinsics.cx,
                intrinsics.fy * cam[..., 1] / z + intrinsics.cy,
            ],
            axis=-1,
        )

    # -- per-window forward ---------------------------------------------------

    def window_summaries_fn(self, geo: _Geometry, pyramids, frames, sigma: ScaleFactor):
        """Build the closure mapping a window state to (summaries, pixels)."""
        cfg = self.config

        def summaries_fn(state: TrajectoryState):
            q = state.num_queries
            unscaled = sigma.unscale(state.positions)  # (Q, T, 3) mode space
            bags: list[LevelBags] = []
            for l in range(geo.num_levels):
                feats_t, offs_t = [], []
                for ti, f in enumerate(frames):
                    nb = self._neighbors(
                        geo.indices[f][l], geo.coords[f][l], geo.cell_valid[f][l],
                        geo.shapes[l], geo.strides[l], unscaled[:, ti],
                        geo.intrinsics, geo.poses, f,
                    )
                    k = nb.ids.shape[1]
                    gathered = nn.gather_rows(pyramids[f][l].features, nb.ids.reshape(-1))
                    feats_t.append(nn.reshape(gathered, (q, k, -1)))
                    offs_t.append(sigma.scale(nb.offsets))
                context = nn.stack(feats_t, axis=1)          # (Q, T, K, Cf)
                ctx_off = np.stack(offs_t, axis=1)
                sup = self._gather_support(geo, pyramids, l)
                bags.append(
                    LevelBags(
                        context_feats=context,
                        context_offsets=ctx_off,
                        support_feats=sup,
                        support_offsets=sigma.scale(geo.support_offsets[l]),
                        query_feats=self._gather_query_feats(geo, pyramids, l),
                    )
                )
            summaries = summarize_levels(self.params, cfg.neighborhood, bags)
            pixels = np.stack(
                [
                    self._pixels(unscaled[:, ti], f, geo.intrinsics, geo.poses)
                    for ti, f in enumerate(frames)
                ],
                axis=1,
            )
            norm = float(max(geo.intrinsics.width, geo.intrinsics.height))
            return summaries, pixels / norm

        return summaries_fn

    def _gather_support(self, geo: _Geometry, pyramids, level: int) -> nn.Tensor:
        q, k = geo.support_ids[level].shape
        parts, order = [], []
        for b in np.unique(geo.query_frames):
            sel = np.nonzero(geo.query_frames == b)[0]
            ids = geo.support_ids[level][sel].reshape(-1)
            parts.append(nn.gather_rows(pyramids[int(b)][level].features, ids))
            order.append(sel)
        stacked = nn.concat(parts, axis=0)  # grouped by birth frame
        perm = np.concatenate(order)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(perm.size)
        cf = stacked.shape[-1]
        regrouped = nn.gather_rows(nn.reshape(stacked, (q, k * cf)), inv)
        return nn.reshape(regrouped, (q, k, cf))

    def _gather_query_feats(self, geo: _Geometry, pyramids, level: int) -> nn.Tensor:
        parts, order = [], []
        for b in np.unique(geo.query_frames):
            sel = np.nonzero(geo.query_frames == b)[0]
            parts.append(
                nn.gather_rows(pyramids[int(b)][level].features, geo.p2n_cells[level][sel])
            )
            order.append(sel)
        stacked = nn.concat(parts, axis=0)
        perm = np.concatenate(order)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(perm.size)
        return nn.gather_rows(stacked, inv)

    # -- full video ------------------------------------------------------------

    def track(self, bundle: SceneBundle, queries: np.ndarray | None = None,
              include_support_in_output: bool = False) -> TrackingResult:
        cfg = self.config
        if cfg.bidirectional:
            return self.track_bidirectional(bundle, queries, include_support_in_output)
        return self._track_one_direction(bundle, queries, include_support_in_output)

    def _track_one_direction(self, bundle, queries=None, include_support_in_output=False):
        cfg = self.config
        base = bundle.queries if queries is None else np.asarray(queries, dtype=np.float32)
        num_main = base.shape[0]
        if cfg.support_grid > 0:
            aux = add_support_grid(bundle, cfg.support_grid)
            if aux.shape[0]:
                base = np.concatenate([base, aux], axis=0)
        geo = self.prepare(bundle, base)
        positions, logits = self._run_windows(bundle, geo)
        result = self._assemble_result(bundle, geo, positions, logits)
        if include_support_in_output or base.shape[0] == num_main:
            return result
        return TrackingResult(
            coordinate_system=result.coordinate_system,
            sigma=result.sigma,
            positions=result.positions[:num_main],
            visibility=result.visibility[:num_main],
            pixels=result.pixels[:num_main],
            valid=result.valid[:num_main],
            intrinsics=result.intrinsics,
            poses=result.poses,
        )

    def window_sigma(self, bundle: SceneBundle, geo: _Geometry, frames,
                     mode_grids: list | None = None) -> ScaleFactor:
        """Scale for one window: per-window std or the whole-video value."""
        if not self.config.scale_per_window:
            return geo.sigma_video
        if mode_grids is None:
            mode_grids = [self._mode_grid(bundle, t) for t in range(geo.num_frames)]
        bound = self.config.depth_bound_factor * float(
            np.max(geo.queries[:, 3].astype(np.float64))
        )
        return self._scale_over(bundle, mode_grids, sorted(set(frames)), bound)

    def init_window(self, geo: _Geometry, positions: np.ndarray, logits: np.ndarray,
                    wi: int, s0: int) -> tuple[np.ndarray, np.ndarray]:
        """Unscaled initial positions/logits for window ``wi`` starting at ``s0``.

        ``positions``/``logits`` hold the running full-video estimates.  The
        first window (and queries born at/after ``s0``) start at the query
        position; otherwise the overlap half copies the running estimates and
        the second half repeats the previous window's final frame.
        """
        s, t_len = geo.num_frames, self.config.window_length
        half = t_len // 2
        q = geo.query_mode.shape[0]
        init_pos = np.empty((q, t_len, 3), dtype=np.float64)
        init_log = np.zeros((q, t_len), dtype=np.float64)
        fresh = (geo.query_frames >= s0) | (wi == 0)
        init_pos[fresh] = geo.query_mode[fresh, None, :]
        carried = np.nonzero(~fresh)[0]
        if carried.size:
            hand_off = min(s0 + half - 1, s - 1)  # previous window's last frame
            for ti in range(t_len):
                src = min(s0 + ti, s - 1) if ti < half else hand_off
                init_pos[carried, ti] = positions[carried, src]
                init_log[carried, ti] = logits[carried, src]
        return init_pos, init_log

    @staticmethod
    def write_window(positions: np.ndarray, logits: np.ndarray, s0: int,
                     window_positions: np.ndarray, window_logits: np.ndarray) -> None:
        """Copy one window's estimates into the running full-video arrays."""
        s = positions.shape[1]
        t_len = window_positions.shape[1]
        for ti in range(t_len):
            f = s0 + ti
            if f < s:
                positions[:, f] = window_positions[:, ti]
                logits[:, f] = window_logits[:, ti]

    def _run_windows(self, bundle: SceneBundle, geo: _Geometry):
        """Sliding-window refinement; returns unscaled mode positions + logits."""
        cfg = self.config
        s, t_len = geo.num_frames, cfg.window_length
        q = geo.query_mode.shape[0]
        positions = np.repeat(geo.query_mode[:, None, :], s, axis=1)  # unscaled mode
        logits = np.zeros((q, s), dtype=np.float64)

        mode_grids = None
        if cfg.scale_per_window:
            mode_grids = [self._mode_grid(bundle, t) for t in range(s)]
        for wi, s0 in enumerate(plan_windows(s, t_len)):
            frames = window_frames(s0, t_len, s)
            sigma = self.window_sigma(bundle, geo, frames, mode_grids)
            init_pos, init_log = self.init_window(geo, positions, logits, wi, s0)
            init = TrajectoryState(sigma.scale(init_pos), init_log)

            pyramids = self._window_pyramids(bundle, geo, frames)
            fn = self.window_summaries_fn(geo, pyramids, frames, sigma)
            final, _ = iterative_refine(init, fn, self.params, cfg.refiner)

            self.write_window(
                positions, logits, s0, sigma.unscale(final.positions), final.vis_logits
            )
        return positions, logits

    def _window_pyramids(self, bundle: SceneBundle, geo: _Geometry, frames) -> dict:
        """Feature pyramids for the frames a window touches (plus birth frames)."""
        needed = sorted(set(frames) | set(int(b) for b in np.unique(geo.query_frames)))
        return {
            f: self.frame_pyramid(bundle, f, geo.coords[f][0], geo.cell_valid[f][0])
            for f in needed
        }

    def _assemble_result(self, bundle: SceneBundle, geo: _Geometry,
                         positions: np.ndarray, logits: np.ndarray) -> TrackingResult:
        q, s = logits.shape
        cols = np.arange(s)[None, :]
        valid = cols >= geo.query_frames[:, None]
        pos32 = positions.astype(np.float32)
        pixels = np.full((q, s, 2), np.nan, dtype=np.float64)
        for t in range(s):
            cam = convert_coords(
                pos32[:, t].astype(np.float64), geo.mode, CoordinateSystem.XYZ_CAMERA,
                geo.intrinsics,
                pose=geo.poses[t] if geo.poses is not None else None,
            ) if geo.mode is not CoordinateSystem.XYZ_CAMERA else pos32[:, t].astype(np.float64)
            front = cam[:, 2] > 0
            if np.any(front):
                pixels[front, t] = project(cam[front], geo.intrinsics)
        return TrackingResult(
            coordinate_system=geo.mode,
            sigma=geo.sigma_video.sigma,
            positions=pos32,
            visibility=logits > 0.0,
            pixels=pixels.astype(np.float32),
            valid=valid,
            intrinsics=geo.intrinsics,
            poses=geo.poses if geo.mode.needs_pose else None,
        )

    def track_bidirectional(self, bundle: SceneBundle, queries: np.ndarray | None = None,
                            include_support_in_output: bool = False) -> TrackingResult:
        """Forward pass for frames >= t_q, reversed pass for frames < t_q."""
        fwd = self._track_one_direction(bundle, queries, include_support_in_output)
        rev_bundle = reverse_bundle(bundle)
        rev_queries = None
        if queries is not None:
            rev_queries = np.asarray(queries, dtype=np.float32).copy()
            rev_queries[:, 0] = (bundle.num_frames - 1) - rev_queries[:, 0]
        bwd = self._track_one_direction(rev_bundle, rev_queries, include_support_in_output)

        s = bundle.num_frames
        q = fwd.positions.shape[0]
        tq = (bundle.queries if queries is None else np.asarray(queries))[:, 0].astype(np.int64)
        if q != tq.shape[0]:  # support grid rows appended (birth frame 0)
            tq = np.concatenate([tq, np.zeros(q - tq.shape[0], dtype=np.int64)])
        positions = fwd.positions.copy()
        visibility = fwd.visibility.copy()
        pixels = fwd.pixels.copy()
        valid = fwd.valid.copy()
        bwd_pos = bwd.positions[:, ::-1]
        bwd_vis = bwd.visibility[:, ::-1]
        bwd_pix = bwd.pixels[:, ::-1]
        bwd_val = bwd.valid[:, ::-1]
        before = np.arange(s)[None, :] < tq[:, None]
        positions[before] = bwd_pos[before]
        visibility[before] = bwd_vis[before]
        pixels[before] = bwd_pix[before]
        valid[before] = bwd_val[before]
        return TrackingResult(
            coordinate_system=fwd.coordinate_system,
            sigma=fwd.sigma,
            positions=positions,
            visibility=visibility,
            pixels=pixels,
            valid=valid,
            intrinsics=fwd.intrinsics,
            poses=fwd.poses,
        )


def track_video(bundle: SceneBundle, queries: np.ndarray | None = None,
                mode: str | None = None, params: nn.ParamStore | None = None,
                config: TrackerConfig | None = None) -> TrackingResult:
    """One-call forward tracking (see :class:`Tracker`)."""
    config = config or TrackerConfig()
    if mode is not None:
        config = replace(config, mode=mode)
    return Tracker(config, params)._track_one_direction(bundle, queries)


def track_bidirectional(bundle: SceneBundle, queries: np.ndarray | None = None,
                        mode: str | None = None, params: nn.ParamStore | None = None,
                        config: TrackerConfig | None = None) -> TrackingResult:
    """Forward + time-reversed tracking merged at each query's birth frame."""
    config = config or TrackerConfig()
    if mode is not None:
        config = replace(config, mode=mode)
    return Tracker(config, params).track_bidirectional(bundle, queries)
