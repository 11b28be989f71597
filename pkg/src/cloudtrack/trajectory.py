"""Per-window trajectory state and refiner input tokens.

A window holds, for every query, a 3D position estimate and a visibility
logit at each of its T frames.  Each refinement iteration turns the current
state into one token per (query, frame):

    [ neighborhood summary | enc(pos[t] - pos[t-1]) | enc(pos[t+1] - pos[t])
      | enc(pixel location) | visibility logit | enc(t / T) ]

where ``enc`` is the sinusoidal encoding from :func:`cloudtrack.nn.fourier_encode`.
Motion deltas are clamped at the window ends (no predecessor / successor), so
a static trajectory encodes to exact zeros there.  Positions live in scaled
model space as float64; only the summary slice carries gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .errors import ShapeError, TokenAssemblyError

__all__ = [
    "TrajectoryState",
    "initialize_window",
    "motion_deltas",
    "token_width",
    "assemble_tokens",
]


@dataclass
class TrajectoryState:
    """Current estimates for one window: positions ``(Q, T, 3)``, logits ``(Q, T)``."""

    positions: np.ndarray
    vis_logits: np.ndarray

    def __post_init__(self) -> None:
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.vis_logits = np.asarray(self.vis_logits, dtype=np.float64)
        if self.positions.ndim != 3 or self.positions.shape[-1] != 3:
            raise ShapeError(f"positions must be (Q, T, 3), got {self.positions.shape}")
        if self.vis_logits.shape != self.positions.shape[:2]:
            raise ShapeError(
                f"vis_logits {self.vis_logits.shape} must match positions "
                f"{self.positions.shape[:2]}"
            )

    @property
    def num_queries(self) -> int:
        return self.positions.shape[0]

    @property
    def num_frames(self) -> int:
        return self.positions.shape[1]

    def copy(self) -> "TrajectoryState":
        return TrajectoryState(self.positions.copy(), self.vis_logits.copy())

    def visibility(self) -> np.ndarray:
        """Hard visibility decisions: sigmoid(logit) > 0.5, i.e. logit > 0."""
        return self.vis_logits > 0.0


def initialize_window(query_positions: np.ndarray, num_frames: int) -> TrajectoryState:
    """Constant-in-time start: every frame gets the query position, logit 0."""
    pts = np.asarray(query_positions, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ShapeError(f"query positions must be (Q, 3), got {pts.shape}")
    if num_frames < 1:
        raise ShapeError(f"window needs at least one frame, got {num_frames}")
    positions = np.repeat(pts[:, None, :], num_frames, axis=1)
    return TrajectoryState(positions, np.zeros((pts.shape[0], num_frames)))


def motion_deltas(positions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Backward and forward per-frame displacements, zero-clamped at the ends.

    Returns ``(prev_delta, next_delta)`` with ``prev_delta[:, t] =
    pos[:, t] - pos[:, t-1]`` (zero at t=0) and ``next_delta[:, t] =
    pos[:, t+1] - pos[:, t]`` (zero at t=T-1).
    """
    if positions.ndim != 3 or positions.shape[-1] != 3:
        raise ShapeError(f"positions must be (Q, T, 3), got {positions.shape}")
    prev_delta = np.zeros_like(positions)
    next_delta = np.zeros_like(positions)
    prev_delta[:, 1:] = positions[:, 1:] - positions[:, :-1]
    next_delta[:, :-1] = positions[:, 1:] - positions[:, :-1]
    return prev_delta, next_delta


def token_width(summary_width: int, num_bands: int = 8) -> int:
    """Width of one assembled token for a given summary width."""
    enc = 2 * num_bands  # sin+cos per band
    return summary_width + 3 * enc + 3 * enc + 2 * enc + 1 + enc


def assemble_tokens(
    summaries: nn.Tensor,
    state: TrajectoryState,
    pixels_norm: np.ndarray,
    num_bands: int = 8,
) -> nn.Tensor:
    """Concatenate summaries with encoded state into ``(Q, T, W)`` tokens.

    ``pixels_norm`` is the (Q, T, 2) projection of the current estimates,
    normalized by the longer image side.  Everything except the summaries is
    a constant input to the refiner (cast to the summaries' dtype) - the
    state channels describe the estimate, they are not differentiated
    through.
    """
    q, t = state.num_queries, state.num_frames
    if summaries.ndim != 3 or summaries.shape[0] != q or summaries.shape[1] != t:
        raise TokenAssemblyError(
            f"summaries {summaries.shape} do not match state ({q}, {t})"
        )
    pixels_norm = np.asarray(pixels_norm, dtype=np.float64)
    if pixels_norm.shape != (q, t, 2):
        raise TokenAssemblyError(
            f"pixels must be ({q}, {t}, 2), got {pixels_norm.shape}"
        )

    prev_delta, next_delta = motion_deltas(state.positions)
    time_frac = np.broadcast_to(
        (np.arange(t, dtype=np.float64) / t)[None, :, None], (q, t, 1)
    )
    dtype = summaries.data.dtype

    def enc(arr: np.ndarray) -> np.ndarray:
        return nn.fourier_encode(arr.astype(dtype), num_bands=num_bands)

    const = np.concatenate(
        [
            enc(prev_delta),
            enc(next_delta),
            enc(pixels_norm),
            state.vis_logits[:, :, None].astype(dtype),
            enc(time_frac),
        ],
        axis=-1,
    )
    token = nn.concat([summaries, nn.Tensor(const)], axis=-1)
    expect = token_width(summaries.shape[-1], num_bands)
    if token.shape[-1] != expect:
        raise TokenAssemblyError(
            f"assembled width {token.shape[-1]} != expected {expect}"
        )
    return token
