"""Iterative trajectory refinement with a proxy-token transformer.

Each iteration maps the assembled per-(query, frame) tokens to additive
updates: new position = position + delta, new logit = logit + delta.  The
transformer alternates temporal self-attention along each track with a
cross-frame exchange routed through a small set of learned *virtual tracks*
(every real track talks to the virtual ones, never directly to other real
tracks, keeping per-frame cost linear in the number of queries).

The output head is zero-initialized, so an untrained refiner is exactly the
identity on the trajectory state.  Between iterations the state is updated
with plain (detached) array arithmetic; the returned per-iteration prediction
tensors are what training differentiates, each iteration's graph standing on
its own.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import nn
from .errors import ConfigError, DivergenceError
from .trajectory import TrajectoryState, assemble_tokens

__all__ = ["RefinerConfig", "refine_once", "iterative_refine"]


@dataclass(frozen=True)
class RefinerConfig:
    """Shape of the refinement transformer."""

    width: int = 64
    depth: int = 2
    num_heads: int = 4
    num_virtual: int = 8
    mlp_ratio: float = 2.0
    iterations: int = 4
    num_bands: int = 8

    def __post_init__(self) -> None:
        if self.width < 1 or self.width % self.num_heads != 0:
            raise ConfigError(
                f"width ({self.width}) must be a positive multiple of "
                f"num_heads ({self.num_heads})"
            )
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if self.num_virtual < 1:
            raise ConfigError(f"need at least one virtual track, got {self.num_virtual}")
        if self.mlp_ratio <= 0:
            raise ConfigError(f"mlp_ratio must be positive, got {self.mlp_ratio}")
        if self.iterations < 0:
            raise ConfigError(f"iterations must be >= 0, got {self.iterations}")
        if self.num_bands < 1:
            raise ConfigError(f"num_bands must be >= 1, got {self.num_bands}")

    def to_dict(self) -> dict:
        return {
            "width": self.width,
            "depth": self.depth,
            "num_heads": self.num_heads,
            "num_virtual": self.num_virtual,
            "mlp_ratio": self.mlp_ratio,
            "iterations": self.iterations,
            "num_bands": self.num_bands,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RefinerConfig":
        return cls(
            width=int(d["width"]),
            depth=int(d["depth"]),
            num_heads=int(d["num_heads"]),
            num_virtual=int(d["num_virtual"]),
            mlp_ratio=float(d["mlp_ratio"]),
            iterations=int(d["iterations"]),
            num_bands=int(d["num_bands"]),
        )


def _linear(params: nn.ParamStore, prefix: str, din: int, dout: int, x: nn.Tensor) -> nn.Tensor:
    w = params.parameter(f"{prefix}.weight", (din, dout))
    b = params.parameter(f"{prefix}.bias", (dout,), init="zeros")
    return nn.linear(x, w, b)


def _mha(
    params: nn.ParamStore,
    prefix: str,
    cfg: RefinerConfig,
    queries: nn.Tensor,
    keys_values: nn.Tensor,
) -> nn.Tensor:
    """Multi-head attention of (B, Nq, W) queries over (B, Nk, W) keys/values."""
    w, h = cfg.width, cfg.num_heads
    hd = w // h

    def split(x: nn.Tensor) -> nn.Tensor:
        b, n, _ = x.shape
        return nn.transpose(nn.reshape(x, (b, n, h, hd)), (0, 2, 1, 3))

    q = split(_linear(params, f"{prefix}.q", w, w, queries))
    k = split(_linear(params, f"{prefix}.k", w, w, keys_values))
    v = split(_linear(params, f"{prefix}.v", w, w, keys_values))
    scale = q.data.dtype.type(1.0 / math.sqrt(hd))
    attn = nn.softmax(nn.mul(nn.matmul(q, nn.transpose(k, (0, 1, 3, 2))), scale))
    out = nn.matmul(attn, v)
    b, _, n, _ = out.shape
    merged = nn.reshape(nn.transpose(out, (0, 2, 1, 3)), (b, n, w))
    return _linear(params, f"{prefix}.out", w, w, merged)


def _mlp(params: nn.ParamStore, prefix: str, cfg: RefinerConfig, x: nn.Tensor) -> nn.Tensor:
    hidden = int(round(cfg.width * cfg.mlp_ratio))
    return _linear(params, f"{prefix}.fc2", hidden, cfg.width,
                   nn.gelu(_linear(params, f"{prefix}.fc1", cfg.width, hidden, x)))


def refine_once(
    params: nn.ParamStore,
    cfg: RefinerConfig,
    tokens: nn.Tensor,
    prefix: str = "refiner",
) -> tuple[nn.Tensor, nn.Tensor]:
    """One refinement pass over ``(Q, T, W_in)`` tokens.

    Returns ``(delta_positions (Q, T, 3), delta_logits (Q, T))``.
    """
    q, t, w_in = tokens.shape
    w, v_count = cfg.width, cfg.num_virtual

    x = _linear(params, f"{prefix}.input", w_in, w, tokens)  # (Q, T, W)

    # shared time embedding; virtual tracks start from learned per-track bases
    time_frac = (np.arange(t, dtype=tokens.data.dtype) / t)[:, None]
    time_emb = _linear(
        params, f"{prefix}.time", 2 * cfg.num_bands, w,
        nn.Tensor(nn.fourier_encode(time_frac, num_bands=cfg.num_bands)),
    )  # (T, W)
    time3 = nn.reshape(time_emb, (1, t, w))
    x = nn.add(x, nn.broadcast_to(time3, (q, t, w)))
    base = params.parameter(f"{prefix}.virtual", (v_count, w))
    virt = nn.add(
        nn.broadcast_to(nn.reshape(base, (v_count, 1, w)), (v_count, t, w)),
        nn.broadcast_to(time3, (v_count, t, w)),
    )
    x = nn.concat([x, virt], axis=0)  # (Q+V, T, W): tracks as batch rows

    for d in range(cfg.depth):
        p = f"{prefix}.block{d}"
        # along time, each track independently
        x = nn.add(x, _mha(params, f"{p}.time_attn", cfg, nn.layer_norm(x), nn.layer_norm(x)))
        # across tracks within each frame, routed through the virtual tracks
        xt = nn.transpose(x, (1, 0, 2))  # (T, Q+V, W)
        r = nn.index(xt, np.s_[:, :q])
        vv = nn.index(xt, np.s_[:, q:])
        vv = nn.add(vv, _mha(params, f"{p}.v_gather", cfg, nn.layer_norm(vv), nn.layer_norm(r)))
        vv = nn.add(vv, _mha(params, f"{p}.v_mix", cfg, nn.layer_norm(vv), nn.layer_norm(vv)))
        r = nn.add(r, _mha(params, f"{p}.r_read", cfg, nn.layer_norm(r), nn.layer_norm(vv)))
        x = nn.transpose(nn.concat([r, vv], axis=1), (1, 0, 2))
        x = nn.add(x, _mlp(params, f"{p}.mlp", cfg, nn.layer_norm(x)))

    real = nn.index(x, np.s_[:q])  # drop virtual tracks
    head_w = params.parameter(f"{prefix}.head.weight", (w, 4), init="zeros")
    head_b = params.parameter(f"{prefix}.head.bias", (4,), init="zeros")
    out = nn.linear(nn.layer_norm(real), head_w, head_b)  # (Q, T, 4)
    delta_pos = nn.index(out, np.s_[..., 0:3])
    delta_logit = nn.reshape(nn.index(out, np.s_[..., 3:4]), (q, t))
    return delta_pos, delta_logit


SummariesFn = Callable[[TrajectoryState], tuple[nn.Tensor, np.ndarray]]
IterationHook = Callable[[int, nn.Tensor, nn.Tensor], None]


def iterative_refine(
    state: TrajectoryState,
    summaries_fn: SummariesFn,
    params: nn.ParamStore,
    cfg: RefinerConfig,
    num_iterations: int | None = None,
    prefix: str = "refiner",
    on_iteration: IterationHook | None = None,
) -> tuple[TrajectoryState, list[tuple[nn.Tensor, nn.Tensor]]]:
    """Run M refinement iterations from ``state``.

    ``summaries_fn(state)`` must return the neighborhood summaries
    ``(Q, T, S)`` and normalized pixel locations ``(Q, T, 2)`` for the
    current estimates.  Returns the final (detached) state plus one
    ``(positions, vis_logits)`` tensor pair per iteration, built as
    ``constant(previous state) + delta`` so each iteration trains against
    its own starting point.

    When ``on_iteration`` is given it is called with
    ``(iteration_index, positions, vis_logits)`` right after each update and
    the pair is *not* kept in the returned history.  Consuming each
    iteration's graph immediately (e.g. running its backward pass) lets the
    graph be freed before the next iteration is built, which caps peak
    memory at roughly one iteration instead of all M.
    """
    m = cfg.iterations if num_iterations is None else num_iterations
    state = state.copy()
    history: list[tuple[nn.Tensor, nn.Tensor]] = []
    for it in range(m):
        summaries, pixels_norm = summaries_fn(state)
        tokens = assemble_tokens(summaries, state, pixels_norm, num_bands=cfg.num_bands)
        delta_pos, delta_logit = refine_once(params, cfg, tokens, prefix=prefix)
        pred_pos = nn.add(nn.Tensor(state.positions.astype(delta_pos.data.dtype)), delta_pos)
        pred_logit = nn.add(nn.Tensor(state.vis_logits.astype(delta_logit.data.dtype)), delta_logit)
        new_pos = state.positions + delta_pos.data.astype(np.float64)
        new_logit = state.vis_logits + delta_logit.data.astype(np.float64)
        if on_iteration is not None:
            on_iteration(it, pred_pos, pred_logit)
        else:
            history.append((pred_pos, pred_logit))
        del summaries, tokens, delta_pos, delta_logit, pred_pos, pred_logit
        if not (np.all(np.isfinite(new_pos)) and np.all(np.isfinite(new_logit))):
            raise DivergenceError("refinement produced non-finite trajectory state")
        state = TrajectoryState(new_pos, new_logit)
    return state, history
