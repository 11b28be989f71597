"""Supervision, optimization, and augmentation for desk-scale training runs.

The loss on one window sums, over supervised query/frame slots, the position
error divided by the point's ground-truth camera depth (far points count
less) plus a weighted binary cross entropy on the visibility logits.  Each
refinement iteration is supervised; iteration ``m`` of ``M`` is discounted by
``discount ** (M - m)`` and the total is scaled by a small constant
multiplier.

Memory contract: refinement iterations consume *detached* trajectory
estimates, so iteration ``m``'s loss reaches only iteration ``m``'s update;
window hand-offs are plain arrays and likewise carry no gradient.  Image
features are shared across the windows of a step: window backward passes stop
there and accumulate, and one flush per step carries the summed gradient into
the encoder.  Because of that, backpropagating each window eagerly or all of
them at the end of the step gives bitwise-identical parameter gradients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from . import nn
from .bundle_io import SceneBundle
from .errors import ConfigError, DivergenceError, LossError, ShapeError
from .geometry import (
    CoordinateSystem,
    RigidMagnitude,
    convert_coords,
    random_rigid_sequence,
)
from .pipeline import Tracker, plan_windows, window_frames
from .trajectory import TrajectoryState

__all__ = [
    "LossConfig",
    "TrainConfig",
    "AugmentConfig",
    "TrainingScene",
    "TrainingRun",
    "compute_loss",
    "discounted_loss",
    "clip_global_norm",
    "AdamW",
    "prepare_scene",
    "training_step",
    "learning_rate_at",
    "train_toy",
    "augment_sample",
]


# ---------------------------------------------------------------------------
# loss


@dataclass(frozen=True)
class LossConfig:
    """Weights of the training objective."""

    visibility_weight: float = 3.0     # factor on the visibility cross entropy
    iteration_discount: float = 0.8    # later iterations count more
    loss_multiplier: float = 0.005     # overall scale of the total loss
    num_iterations: int = 4            # refinement iterations supervised per window
    supervise_occluded: bool = True    # position loss also on occluded GT points

    def __post_init__(self) -> None:
        if self.visibility_weight < 0:
            raise ConfigError(f"visibility weight must be >= 0, got {self.visibility_weight}")
        if not (0.0 < self.iteration_discount <= 1.0):
            raise ConfigError(
                f"iteration discount must be in (0, 1], got {self.iteration_discount}"
            )
        if not (np.isfinite(self.loss_multiplier) and self.loss_multiplier > 0):
            raise ConfigError(f"loss multiplier must be positive, got {self.loss_multiplier}")
        if self.num_iterations < 1:
            raise ConfigError(f"need at least one iteration, got {self.num_iterations}")

    def to_dict(self) -> dict:
        return {
            "visibility_weight": self.visibility_weight,
            "iteration_discount": self.iteration_discount,
            "loss_multiplier": self.loss_multiplier,
            "num_iterations": self.num_iterations,
            "supervise_occluded": self.supervise_occluded,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        return cls(
            visibility_weight=float(d["visibility_weight"]),
            iteration_discount=float(d["iteration_discount"]),
            loss_multiplier=float(d["loss_multiplier"]),
            num_iterations=int(d["num_iterations"]),
            supervise_occluded=bool(d["supervise_occluded"]),
        )


def compute_loss(
    pred_positions: nn.Tensor,
    pred_logits: nn.Tensor,
    gt_positions: np.ndarray,
    gt_visible: np.ndarray,
    supervised: np.ndarray,
    depths: np.ndarray,
    config: LossConfig,
) -> nn.Tensor:
    """One iteration's loss over a ``(Q, T)`` window of supervised slots.

    ``pred_positions`` are in the (unscaled) tracking coordinate system, like
    ``gt_positions``; ``depths`` holds each GT point's camera-frame depth,
    which must be positive wherever the position is supervised.
    """
    q, t = pred_logits.shape
    if pred_positions.shape != (q, t, 3):
        raise ShapeError(f"positions {pred_positions.shape} vs logits {pred_logits.shape}")
    gt = np.asarray(gt_positions, dtype=np.float64)
    vis = np.asarray(gt_visible, dtype=bool)
    sup = np.asarray(supervised, dtype=bool)
    d = np.asarray(depths, dtype=np.float64)
    for name, arr in (("gt", gt), ("vis", vis), ("supervised", sup), ("depths", d)):
        if arr.shape[:2] != (q, t):
            raise ShapeError(f"{name} shape {arr.shape} does not match ({q}, {t})")

    pos_mask = sup if config.supervise_occluded else (sup & vis)
    if np.any(~np.isfinite(d[pos_mask])) or np.any(d[pos_mask] <= 0.0):
        raise LossError("supervised points must have positive finite GT depth")
    if np.any(~np.isfinite(gt[pos_mask])):
        raise LossError("supervised points must have finite GT positions")

    dtype = pred_positions.data.dtype
    weights = np.zeros((q, t), dtype=np.float64)
    weights[pos_mask] = 1.0 / d[pos_mask]
    gt = np.where(pos_mask[..., None], gt, 0.0)  # unsupervised slots never pollute
    errors = nn.l2_norm(nn.sub(pred_positions, gt.astype(dtype)))
    position_term = nn.reduce_sum(nn.mul(errors, weights.astype(dtype)))
    ce = nn.bce_with_logits(pred_logits, vis.astype(dtype))
    ce_term = nn.reduce_sum(nn.mul(ce, sup.astype(dtype)))
    return nn.add(position_term, nn.mul(ce_term, dtype.type(config.visibility_weight)))


def discounted_loss(iteration_losses, discount: float, multiplier: float) -> nn.Tensor:
    """``multiplier * sum_m discount**(M - m) * L_m`` for losses ``L_1..L_M``."""
    losses = list(iteration_losses)
    if not losses:
        raise ConfigError("discounted_loss needs at least one iteration loss")
    m = len(losses)
    total = None
    for i, loss in enumerate(losses):
        dtype = loss.data.dtype
        term = nn.mul(loss, dtype.type(discount ** (m - 1 - i)))
        total = term if total is None else nn.add(total, term)
    return nn.mul(total, total.data.dtype.type(multiplier))


# ---------------------------------------------------------------------------
# optimizer


def clip_global_norm(params: nn.ParamStore, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``.

    Returns the pre-clip norm.  Parameters without gradients contribute zero.
    """
    if max_norm <= 0:
        raise ConfigError(f"max_norm must be positive, got {max_norm}")
    total = 0.0
    for p in params.tensors():
        if p.grad is not None:
            total += float(np.sum(np.square(p.grad.astype(np.float64))))
    norm = float(np.sqrt(total))
    if norm > max_norm:
        scale = max_norm / norm
        for p in params.tensors():
            if p.grad is not None:
                p.grad = (p.grad * p.grad.dtype.type(scale)).astype(p.grad.dtype)
    return norm


class AdamW:
    """Adaptive-moment optimization with decoupled weight decay."""

    def __init__(self, params: nn.ParamStore, learning_rate: float,
                 weight_decay: float = 0.0, betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8):
        if learning_rate < 0 or weight_decay < 0:
            raise ConfigError("learning rate and weight decay must be >= 0")
        self.params = params
        self.learning_rate = float(learning_rate)
        self.weight_decay = float(weight_decay)
        self.betas = (float(betas[0]), float(betas[1]))
        self.eps = float(eps)
        self.step_count = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self) -> None:
        """Apply one update from the gradients currently on the parameters."""
        self.step_count += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad.astype(np.float64)
            m = self._m.get(name)
            v = self._v.get(name)
            if m is None:
                m = np.zeros_like(g)
                v = np.zeros_like(g)
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * np.square(g)
            self._m[name] = m
            self._v[name] = v
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            new = p.data.astype(np.float64) - self.learning_rate * (
                update + self.weight_decay * p.data.astype(np.float64)
            )
            p.data = new.astype(p.data.dtype)


# ---------------------------------------------------------------------------
# scene preparation and the step


@dataclass
class TrainingScene:
    """Static per-scene structure shared by every step (GT in mode space)."""

    bundle: SceneBundle
    geo: object                       # pipeline geometry (indices, scale, queries)
    window_starts: list[int]
    window_framelists: list[list[int]]
    window_sigmas: list
    gt_mode: np.ndarray               # (Q, S, 3) float64 tracking coords
    gt_visible: np.ndarray            # (Q, S) bool
    gt_depths: np.ndarray             # (Q, S) float64 camera depth
    supervised: np.ndarray            # (Q, S) bool


def prepare_scene(tracker: Tracker, bundle: SceneBundle) -> TrainingScene:
    """Precompute everything that does not depend on the parameters."""
    if not bundle.has_ground_truth:
        raise ConfigError("training needs a bundle with GT tracks")
    geo = tracker.prepare(bundle, bundle.queries)
    s = bundle.num_frames
    starts = plan_windows(s, tracker.config.window_length)
    framelists = [window_frames(s0, tracker.config.window_length, s) for s0 in starts]
    mode_grids = None
    if tracker.config.scale_per_window:
        mode_grids = [tracker._mode_grid(bundle, t) for t in range(s)]
    sigmas = [tracker.window_sigma(bundle, geo, fl, mode_grids) for fl in framelists]

    gt_cam = bundle.gt_tracks.astype(np.float64)      # (Q, S, 3)
    mode = tracker.config.coordinate_system
    gt_mode = np.empty_like(gt_cam)
    for t in range(s):
        gt_mode[:, t] = convert_coords(
            gt_cam[:, t], CoordinateSystem.XYZ_CAMERA, mode,
            bundle.intrinsics, pose=bundle.pose(t),
        )
    cols = np.arange(s)[None, :]
    supervised = cols >= geo.query_frames[:, None]
    return TrainingScene(
        bundle=bundle,
        geo=geo,
        window_starts=starts,
        window_framelists=framelists,
        window_sigmas=sigmas,
        gt_mode=gt_mode,
        gt_visible=bundle.gt_vis.copy(),
        gt_depths=gt_cam[..., 2].copy(),
        supervised=supervised,
    )


def _window_slices(scene: TrainingScene, wi: int):
    """GT arrays for window ``wi``; padded slots are masked out."""
    frames = scene.window_framelists[wi]
    s0 = scene.window_starts[wi]
    s = scene.bundle.num_frames
    idx = np.asarray(frames)
    gt = scene.gt_mode[:, idx]
    vis = scene.gt_visible[:, idx]
    depths = scene.gt_depths[:, idx]
    in_video = (s0 + np.arange(len(frames))) < s
    sup = scene.supervised[:, idx] & in_video[None, :]
    return gt, vis, sup, depths


def training_step(tracker: Tracker, scene: TrainingScene, loss_config: LossConfig,
                  eager_backward: bool = True) -> tuple[float, list[float]]:
    """Forward + backward over all windows of one scene.

    Each iteration's loss term is backpropagated separately with its
    discount-times-multiplier weight as the seed, so the iteration's graph
    can be freed before the next one is built (peak memory of roughly one
    iteration instead of all M).  With ``eager_backward`` the term's
    backward runs as soon as the iteration finishes; otherwise the terms
    are collected and replayed in the same order at the end of the step.
    Both schedules traverse identical graphs in identical order, so the
    accumulated gradients are bitwise equal.  Encoder gradients are held
    at the image features and flushed once at the end either way.

    Gradients are left on the parameters (caller clips, steps, and zeroes).
    Returns the total discounted loss and the per-window values.
    """
    from .refiner import iterative_refine

    geo = scene.geo
    bundle = scene.bundle
    s = bundle.num_frames
    q = geo.query_mode.shape[0]
    m = loss_config.num_iterations

    needed = sorted(set(f for fl in scene.window_framelists for f in fl)
                    | set(int(b) for b in np.unique(geo.query_frames)))
    pyramids = {
        f: tracker.frame_pyramid(bundle, f, geo.coords[f][0], geo.cell_valid[f][0])
        for f in needed
    }
    feature_roots = tuple(
        pyramids[f][0].features for f in needed if pyramids[f][0].features.requires_grad
    )

    positions = np.repeat(geo.query_mode[:, None, :], s, axis=1)
    logits = np.zeros((q, s), dtype=np.float64)
    window_losses: list[float] = []
    deferred: list[tuple[nn.Tensor, np.floating]] = []

    for wi, s0 in enumerate(scene.window_starts):
        frames = scene.window_framelists[wi]
        sigma = scene.window_sigmas[wi]
        init_pos, init_log = tracker.init_window(geo, positions, logits, wi, s0)
        init = TrajectoryState(sigma.scale(init_pos), init_log)
        fn = tracker.window_summaries_fn(geo, pyramids, frames, sigma)
        gt, vis, sup, depths = _window_slices(scene, wi)
        iteration_values: list[np.ndarray] = []

        def consume(it: int, pred_pos: nn.Tensor, pred_logit: nn.Tensor) -> None:
            dtype = pred_pos.data.dtype
            unscaled = nn.mul(pred_pos, dtype.type(sigma.sigma))
            loss = compute_loss(unscaled, pred_logit, gt, vis, sup, depths, loss_config)
            iteration_values.append(loss.data.copy())
            lt = loss.data.dtype.type
            weight = lt(loss_config.loss_multiplier) * lt(
                loss_config.iteration_discount ** (m - 1 - it)
            )
            if eager_backward:
                loss.backward(seed=weight, stop_at=feature_roots)
            else:
                deferred.append((loss, weight))

        final, _ = iterative_refine(
            init, fn, tracker.params, tracker.config.refiner,
            num_iterations=m, on_iteration=consume,
        )

        # same value (and float association) as `discounted_loss` on the
        # per-iteration losses, without keeping their graphs alive
        with nn.no_grad():
            window_loss = discounted_loss(
                [nn.Tensor(v) for v in iteration_values],
                loss_config.iteration_discount, loss_config.loss_multiplier,
            )
        window_losses.append(float(window_loss.data))

        tracker.write_window(
            positions, logits, s0, sigma.unscale(final.positions), final.vis_logits
        )

    for loss, weight in deferred:
        loss.backward(seed=weight, stop_at=feature_roots)
    for root in feature_roots:      # one encoder flush per step
        if root.grad is not None:
            root.backward(seed=root.grad)
    return float(sum(window_losses)), window_losses


# ---------------------------------------------------------------------------
# the toy trainer


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings for desk-scale overfitting runs.

    ``learning_rate`` is the peak rate; by default it ramps up linearly over
    ``warmup_steps``, holds at the peak for ``hold_steps``, then follows a
    cosine decay to ``learning_rate * final_lr_fraction`` at the last step.
    The shape matters here: the positional term is an (unsquared) L2 norm
    whose gradient magnitude does not shrink as the error does, so without a
    cold tail the parameters jitter around the optimum instead of settling,
    while the visibility term needs a long stretch at full rate before its
    logit margins saturate.  The hold phase serves the second need, the tail
    the first.
    """

    learning_rate: float = 5e-4
    weight_decay: float = 5e-4
    grad_clip: float = 10.0
    num_steps: int = 500
    seed: int = 0
    eager_backward: bool = True
    lr_schedule: str = "cosine"  # "cosine" | "constant"
    warmup_steps: int = 25
    hold_steps: int = 225
    final_lr_fraction: float = 0.02
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self) -> None:
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ConfigError("learning rate and weight decay must be >= 0")
        if self.grad_clip <= 0:
            raise ConfigError(f"grad_clip must be positive, got {self.grad_clip}")
        if self.num_steps < 0:
            raise ConfigError(f"num_steps must be >= 0, got {self.num_steps}")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ConfigError(f"unknown lr schedule {self.lr_schedule!r}")
        if self.warmup_steps < 0:
            raise ConfigError(f"warmup_steps must be >= 0, got {self.warmup_steps}")
        if self.hold_steps < 0:
            raise ConfigError(f"hold_steps must be >= 0, got {self.hold_steps}")
        if not 0.0 <= self.final_lr_fraction <= 1.0:
            raise ConfigError(
                f"final_lr_fraction must be in [0, 1], got {self.final_lr_fraction}"
            )

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "weight_decay": self.weight_decay,
            "grad_clip": self.grad_clip,
            "num_steps": self.num_steps,
            "seed": self.seed,
            "eager_backward": self.eager_backward,
            "lr_schedule": self.lr_schedule,
            "warmup_steps": self.warmup_steps,
            "hold_steps": self.hold_steps,
            "final_lr_fraction": self.final_lr_fraction,
            "loss": self.loss.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(
            learning_rate=float(d["learning_rate"]),
            weight_decay=float(d["weight_decay"]),
            grad_clip=float(d["grad_clip"]),
            num_steps=int(d["num_steps"]),
            seed=int(d["seed"]),
            eager_backward=bool(d["eager_backward"]),
            lr_schedule=str(d.get("lr_schedule", "cosine")),
            warmup_steps=int(d.get("warmup_steps", 25)),
            hold_steps=int(d.get("hold_steps", 0)),
            final_lr_fraction=float(d.get("final_lr_fraction", 0.0)),
            loss=LossConfig.from_dict(d["loss"]),
        )


def learning_rate_at(step_index: int, config: TrainConfig) -> float:
    """Scheduled learning rate for one optimizer step (0-based)."""
    base = config.learning_rate
    if config.lr_schedule == "constant":
        return base
    if config.warmup_steps > 0 and step_index < config.warmup_steps:
        return base * (step_index + 1) / config.warmup_steps
    decay_start = config.warmup_steps + config.hold_steps
    if step_index < decay_start:
        return base
    span = max(config.num_steps - decay_start, 1)
    t = min((step_index - decay_start) / span, 1.0)
    floor = base * config.final_lr_fraction
    return floor + (base - floor) * 0.5 * (1.0 + math.cos(math.pi * t))


@dataclass
class TrainingRun:
    """Loss curve plus bookkeeping from one trainer invocation."""

    losses: list[float]
    grad_norms: list[float]

    @property
    def num_steps(self) -> int:
        return len(self.losses)

    def to_csv(self, path) -> None:
        import csv

        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "loss", "grad_norm"])
            for i, (loss, norm) in enumerate(zip(self.losses, self.grad_norms)):
                writer.writerow([i, f"{loss:.10g}", f"{norm:.10g}"])


def train_toy(tracker: Tracker, bundles, config: TrainConfig,
              progress=None) -> TrainingRun:
    """Overfit the tracker on a handful of synthetic scenes.

    Each step processes one scene (cycling through ``bundles``), runs every
    window, and applies one clipped optimizer update.  A non-finite loss
    aborts with the last good step in the error message.
    """
    if isinstance(bundles, SceneBundle):
        bundles = [bundles]
    if not bundles:
        raise ConfigError("train_toy needs at least one scene")
    scenes = [prepare_scene(tracker, b) for b in bundles]
    optimizer = AdamW(tracker.params, config.learning_rate, config.weight_decay)
    losses: list[float] = []
    norms: list[float] = []
    for step_index in range(config.num_steps):
        scene = scenes[step_index % len(scenes)]
        optimizer.learning_rate = learning_rate_at(step_index, config)
        tracker.params.zero_grads()
        total, _ = training_step(tracker, scene, config.loss, config.eager_backward)
        if not np.isfinite(total):
            last = f"step {step_index - 1} loss {losses[-1]:.6g}" if losses else "none"
            raise DivergenceError(
                f"non-finite loss at step {step_index}; last good: {last}"
            )
        norm = clip_global_norm(tracker.params, config.grad_clip)
        optimizer.step()
        losses.append(total)
        norms.append(norm)
        if progress is not None:
            progress(step_index, total, norm)
    tracker.params.zero_grads()
    return TrainingRun(losses=losses, grad_norms=norms)


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentConfig:
    """Photometric jitter on RGB plus a smooth rigid disturbance of the scene.

    All-zero magnitudes (the default) make :func:`augment_sample` an exact
    identity.  The rigid sequence moves the camera-space cloud, the GT
    tracks, and the query points together, and adjusts poses so world-space
    labels are untouched.
    """

    blur_probability: float = 0.0
    blur_sigma: float = 1.0
    occlusion_probability: float = 0.0
    max_occlusion_fraction: float = 0.25
    brightness_jitter: float = 0.0
    contrast_jitter: float = 0.0
    rigid: RigidMagnitude = field(default_factory=RigidMagnitude)

    def __post_init__(self) -> None:
        for name in ("blur_probability", "occlusion_probability"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ConfigError(f"{name} must be in [0, 1], got {v}")
        if self.blur_sigma <= 0:
            raise ConfigError(f"blur_sigma must be positive, got {self.blur_sigma}")
        if not (0.0 < self.max_occlusion_fraction <= 1.0):
            raise ConfigError("max_occlusion_fraction must be in (0, 1]")
        if self.brightness_jitter < 0 or self.contrast_jitter < 0:
            raise ConfigError("jitter magnitudes must be >= 0")


def augment_sample(bundle: SceneBundle, config: AugmentConfig,
                   seed: int | np.random.Generator = 0) -> SceneBundle:
    """Return an augmented copy of ``bundle`` (labels stay consistent)."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    s, h, w = bundle.num_frames, bundle.height, bundle.width

    rgb = bundle.rgb
    if rgb is not None:
        rgb = rgb.copy()
        for t in range(s):
            frame = rgb[t]
            if config.blur_probability > 0 and rng.uniform() < config.blur_probability:
                sigma = rng.uniform(0.1, config.blur_sigma)
                blurred = ndimage.gaussian_filter(
                    frame.astype(np.float32), sigma=(sigma, sigma, 0.0)
                )
                frame = np.clip(np.rint(blurred), 0, 255).astype(np.uint8)
            if config.occlusion_probability > 0 and rng.uniform() < config.occlusion_probability:
                oh = max(1, int(rng.uniform(0.05, config.max_occlusion_fraction) * h))
                ow = max(1, int(rng.uniform(0.05, config.max_occlusion_fraction) * w))
                top = int(rng.integers(0, h - oh + 1))
                left = int(rng.integers(0, w - ow + 1))
                color = rng.integers(0, 256, size=3, dtype=np.uint8)
                frame = frame.copy()
                frame[top:top + oh, left:left + ow] = color
            if config.brightness_jitter > 0 or config.contrast_jitter > 0:
                gain = 1.0 + rng.uniform(-config.contrast_jitter, config.contrast_jitter)
                shift = rng.uniform(-config.brightness_jitter, config.brightness_jitter) * 255.0
                adjusted = (frame.astype(np.float32) - 127.5) * gain + 127.5 + shift
                frame = np.clip(np.rint(adjusted), 0, 255).astype(np.uint8)
            rgb[t] = frame

    pointmap = bundle.pointmap
    queries = bundle.queries
    gt_tracks = bundle.gt_tracks
    poses = bundle.poses
    if config.rigid.max_rotation > 0 or config.rigid.max_translation > 0:
        seq = random_rigid_sequence(s, config.rigid, rng)
        pointmap = bundle.pointmap.copy()
        for t in range(s):
            mask = bundle.valid[t]
            pts = pointmap[t][mask].astype(np.float64)
            pointmap[t][mask] = seq[t].apply(pts).astype(np.float32)
        if gt_tracks is not None:
            gt_tracks = gt_tracks.copy()
            for t in range(s):
                gt_tracks[:, t] = seq[t].apply(gt_tracks[:, t].astype(np.float64)).astype(np.float32)
        queries = bundle.queries.copy()
        for qi in range(queries.shape[0]):
            b = int(queries[qi, 0])
            queries[qi, 1:] = seq[b].apply(queries[qi, 1:].astype(np.float64)).astype(np.float32)
        if poses is not None:
            poses = [poses[t].compose(seq[t].inverse()) for t in range(s)]

    return replace_bundle(
        bundle, rgb=rgb, pointmap=pointmap, queries=queries,
        gt_tracks=gt_tracks, poses=poses,
    )


def replace_bundle(bundle: SceneBundle, **fields) -> SceneBundle:
    """Dataclass-style replace for scene bundles (revalidates)."""
    return replace(bundle, **fields)
