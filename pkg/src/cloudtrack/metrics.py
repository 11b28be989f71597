"""Trajectory evaluation: depth-adaptive 3D position accuracy, occlusion
accuracy, and Jaccard scores, plus 2D variants on projected tracks.

All positions are compared in per-frame camera space.  The positional test
at fraction ``f`` is strict: an estimate counts as *within* when its 3D
error is ``< f * gt_depth`` (the threshold adapts to how far the point is).
2D errors are measured after rescaling both projections to a common
``image_norm`` (default 256) resolution, against fixed pixel thresholds.

Conventions (documented, configurable):

* position accuracy (``apd_*``) averages, over thresholds, the percentage of
  ground-truth-visible valid points within the threshold;
* Jaccard counts TP = predicted-visible & GT-visible & within, FN = GT-visible
  not matched so, FP = predicted-visible & not (GT-visible & within), and an
  empty denominator contributes 0 at that threshold;
* occlusion accuracy is the percentage of valid points whose hard visibility
  matches the ground truth.

Every reduction is written so a plain scalar loop reproduces it bit-for-bit
(componentwise squared sums, scale-then-subtract in 2D).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .bundle_io import SceneBundle, TrackingResult
from .errors import ConfigError, ShapeError, UndefinedMetricError
from .geometry import CameraIntrinsics

__all__ = [
    "MetricConfig",
    "EvalPair",
    "MetricReport",
    "make_eval_pair",
    "apd_3d",
    "occlusion_accuracy",
    "average_jaccard",
    "metrics_2d",
    "evaluate",
]


@dataclass(frozen=True)
class MetricConfig:
    """Threshold sets and bookkeeping switches."""

    fractions: tuple[float, ...] = (0.01, 0.02, 0.04, 0.08, 0.16)
    pixel_thresholds: tuple[float, ...] = (1.0, 2.0, 4.0, 8.0, 16.0)
    image_norm: float = 256.0
    exclude_query_frame: bool = False

    def __post_init__(self) -> None:
        if not self.fractions or any(f <= 0 for f in self.fractions):
            raise ConfigError("fractions must be a nonempty tuple of positives")
        if not self.pixel_thresholds or any(t <= 0 for t in self.pixel_thresholds):
            raise ConfigError("pixel thresholds must be a nonempty tuple of positives")
        if self.image_norm <= 0:
            raise ConfigError(f"image_norm must be positive, got {self.image_norm}")


@dataclass
class EvalPair:
    """Aligned prediction / ground truth, all in per-frame camera space."""

    pred_cam: np.ndarray     # (Q, S, 3) float64
    pred_vis: np.ndarray     # (Q, S) bool
    pred_pixels: np.ndarray  # (Q, S, 2) float64
    gt_cam: np.ndarray       # (Q, S, 3) float64
    gt_vis: np.ndarray       # (Q, S) bool
    valid: np.ndarray        # (Q, S) bool: rows that participate at all
    query_frames: np.ndarray  # (Q,) int64
    intrinsics: CameraIntrinsics

    def __post_init__(self) -> None:
        q, s, _ = self.pred_cam.shape
        for name in ("pred_vis", "gt_vis", "valid"):
            if getattr(self, name).shape != (q, s):
                raise ShapeError(f"{name} must be ({q}, {s}), got {getattr(self, name).shape}")
        if self.gt_cam.shape != (q, s, 3):
            raise ShapeError(f"gt_cam must be ({q}, {s}, 3), got {self.gt_cam.shape}")
        if self.pred_pixels.shape != (q, s, 2):
            raise ShapeError(f"pred_pixels must be ({q}, {s}, 2), got {self.pred_pixels.shape}")
        if self.query_frames.shape != (q,):
            raise ShapeError(f"query_frames must be ({q},), got {self.query_frames.shape}")

    @property
    def num_queries(self) -> int:
        return self.pred_cam.shape[0]

    @property
    def num_frames(self) -> int:
        return self.pred_cam.shape[1]


def make_eval_pair(result: TrackingResult, bundle: SceneBundle) -> EvalPair:
    """Align a tracking result with a bundle's ground truth."""
    if not bundle.has_ground_truth:
        raise ConfigError("scene bundle has no ground-truth tracks to evaluate against")
    q, s = bundle.num_queries, bundle.num_frames
    if result.positions.shape != (q, s, 3):
        raise ShapeError(
            f"result covers {result.positions.shape[:2]}, ground truth is ({q}, {s})"
        )
    return EvalPair(
        pred_cam=result.camera_positions(),
        pred_vis=result.visibility.copy(),
        pred_pixels=result.pixels.astype(np.float64),
        gt_cam=bundle.gt_tracks.astype(np.float64),
        gt_vis=bundle.gt_vis.copy(),
        valid=result.valid.copy(),
        query_frames=bundle.queries[:, 0].astype(np.int64),
        intrinsics=bundle.intrinsics,
    )


def _errors_3d(pair: EvalPair) -> np.ndarray:
    d = pair.pred_cam - pair.gt_cam
    return np.sqrt(d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2])


def _errors_2d(pair: EvalPair, cfg: MetricConfig) -> np.ndarray:
    """Pixel errors at the normalized resolution; inf where GT depth <= 0."""
    intr = pair.intrinsics
    su = cfg.image_norm / intr.width
    sv = cfg.image_norm / intr.height
    z = pair.gt_cam[..., 2]
    ok = z > 0.0
    gu = np.full(z.shape, np.inf)
    gv = np.full(z.shape, np.inf)
    gu[ok] = (intr.fx * pair.gt_cam[..., 0][ok] / z[ok] + intr.cx) * su
    gv[ok] = (intr.fy * pair.gt_cam[..., 1][ok] / z[ok] + intr.cy) * sv
    pu = pair.pred_pixels[..., 0] * su
    pv = pair.pred_pixels[..., 1] * sv
    du = pu - gu
    dv = pv - gv
    err = np.sqrt(du * du + dv * dv)
    err[~ok] = np.inf
    return err


def _within_sets(
    errors: np.ndarray, scales: np.ndarray, thresholds: tuple[float, ...]
) -> list[np.ndarray]:
    """Boolean 'inside threshold' masks, one per threshold (strict <)."""
    return [errors < (t * scales) for t in thresholds]


def _apd(
    within: list[np.ndarray], thresholds: tuple[float, ...], mask: np.ndarray
) -> tuple[float, dict[str, float]]:
    n = int(np.count_nonzero(mask))
    if n == 0:
        raise UndefinedMetricError("no ground-truth-visible valid points to score")
    per: dict[str, float] = {}
    total = 0.0
    for t, w in zip(thresholds, within):
        pct = 100.0 * int(np.count_nonzero(w & mask)) / n
        per[_key(t)] = pct
        total += pct
    return total / len(thresholds), per


def _jaccard(
    within: list[np.ndarray],
    thresholds: tuple[float, ...],
    pair: EvalPair,
    mask: np.ndarray,
) -> tuple[float, dict[str, float]]:
    per: dict[str, float] = {}
    total = 0.0
    gt_vis = pair.gt_vis
    pred_vis = pair.pred_vis
    for t, w in zip(thresholds, within):
        match = pred_vis & gt_vis & w
        tp = int(np.count_nonzero(match & mask))
        fn = int(np.count_nonzero(gt_vis & ~match & mask))
        fp = int(np.count_nonzero(pred_vis & ~(gt_vis & w) & mask))
        denom = tp + fn + fp
        jac = 100.0 * tp / denom if denom > 0 else 0.0
        per[_key(t)] = jac
        total += jac
    return total / len(thresholds), per


def _key(threshold: float) -> str:
    return format(threshold, "g")


def _base_mask(pair: EvalPair, cfg: MetricConfig, for_jaccard: bool) -> np.ndarray:
    mask = pair.valid.copy()
    if for_jaccard and cfg.exclude_query_frame:
        cols = np.arange(pair.num_frames)[None, :]
        mask &= cols != pair.query_frames[:, None]
    return mask


def apd_3d(pair: EvalPair, cfg: MetricConfig = MetricConfig()) -> tuple[float, dict[str, float]]:
    """Average position accuracy under depth-scaled 3D thresholds."""
    errors = _errors_3d(pair)
    within = _within_sets(errors, pair.gt_cam[..., 2], cfg.fractions)
    return _apd(within, cfg.fractions, pair.valid & pair.gt_vis)


def occlusion_accuracy(pair: EvalPair, cfg: MetricConfig = MetricConfig()) -> float:
    """Percentage of valid points with correctly predicted visibility."""
    n = int(np.count_nonzero(pair.valid))
    if n == 0:
        raise UndefinedMetricError("no valid points to score visibility on")
    agree = pair.pred_vis == pair.gt_vis
    return 100.0 * int(np.count_nonzero(agree & pair.valid)) / n


def average_jaccard(
    pair: EvalPair, cfg: MetricConfig = MetricConfig()
) -> tuple[float, dict[str, float]]:
    """Joint position+visibility score under depth-scaled 3D thresholds."""
    if not np.any(pair.valid & pair.gt_vis):
        raise UndefinedMetricError("no ground-truth-visible valid points to score")
    errors = _errors_3d(pair)
    within = _within_sets(errors, pair.gt_cam[..., 2], cfg.fractions)
    return _jaccard(within, cfg.fractions, pair, _base_mask(pair, cfg, for_jaccard=True))


def metrics_2d(
    pair: EvalPair, cfg: MetricConfig = MetricConfig()
) -> tuple[float, dict[str, float], float, dict[str, float]]:
    """(AJ2D, per-threshold, APD2D, per-threshold) on projected tracks."""
    errors = _errors_2d(pair, cfg)
    ones = np.ones_like(errors)
    within = _within_sets(errors, ones, cfg.pixel_thresholds)
    apd, apd_per = _apd(within, cfg.pixel_thresholds, pair.valid & pair.gt_vis)
    aj, aj_per = _jaccard(
        within, cfg.pixel_thresholds, pair, _base_mask(pair, cfg, for_jaccard=True)
    )
    return aj, aj_per, apd, apd_per


@dataclass
class MetricReport:
    """Headline percentages plus per-threshold breakdowns and counts."""

    aj_3d: float
    apd_3d: float
    oa: float
    aj_2d: float
    apd_2d: float
    per_fraction_apd_3d: dict[str, float]
    per_fraction_aj_3d: dict[str, float]
    per_threshold_apd_2d: dict[str, float]
    per_threshold_aj_2d: dict[str, float]
    num_queries: int
    num_valid_points: int
    num_visible_points: int

    def to_dict(self) -> dict:
        # insertion order is the documented fixed key order
        return {
            "aj_3d": self.aj_3d,
            "apd_3d": self.apd_3d,
            "oa": self.oa,
            "aj_2d": self.aj_2d,
            "apd_2d": self.apd_2d,
            "per_fraction_apd_3d": self.per_fraction_apd_3d,
            "per_fraction_aj_3d": self.per_fraction_aj_3d,
            "per_threshold_apd_2d": self.per_threshold_apd_2d,
            "per_threshold_aj_2d": self.per_threshold_aj_2d,
            "num_queries": self.num_queries,
            "num_valid_points": self.num_valid_points,
            "num_visible_points": self.num_visible_points,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def table(self) -> str:
        rows = [
            ("AJ 3D", self.aj_3d),
            ("APD 3D", self.apd_3d),
            ("OA", self.oa),
            ("AJ 2D", self.aj_2d),
            ("APD 2D", self.apd_2d),
        ]
        lines = ["metric    value", "-" * 17]
        lines += [f"{name:<9} {value:6.2f}" for name, value in rows]
        lines.append(
            f"points: {self.num_queries} queries, {self.num_valid_points} valid, "
            f"{self.num_visible_points} visible"
        )
        return "\n".join(lines)


def evaluate(
    result: TrackingResult, bundle: SceneBundle, cfg: MetricConfig = MetricConfig()
) -> MetricReport:
    """Full evaluation of a tracking result against bundle ground truth."""
    pair = make_eval_pair(result, bundle)
    apd3, apd3_per = apd_3d(pair, cfg)
    oa = occlusion_accuracy(pair, cfg)
    aj3, aj3_per = average_jaccard(pair, cfg)
    aj2, aj2_per, apd2, apd2_per = metrics_2d(pair, cfg)
    return MetricReport(
        aj_3d=aj3,
        apd_3d=apd3,
        oa=oa,
        aj_2d=aj2,
        apd_2d=apd2,
        per_fraction_apd_3d=apd3_per,
        per_fraction_aj_3d=aj3_per,
        per_threshold_apd_2d=apd2_per,
        per_threshold_aj_2d=aj2_per,
        num_queries=pair.num_queries,
        num_valid_points=int(np.count_nonzero(pair.valid)),
        num_visible_points=int(np.count_nonzero(pair.valid & pair.gt_vis)),
    )
