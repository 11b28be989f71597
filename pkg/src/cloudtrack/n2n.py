"""Neighborhood-to-neighborhood attention over 3D k-NN token bags.

For each query q and frame t, two bags of neighbor tokens are compared:

* the *support* bag: the k cells nearest the query position in its birth
  frame, built once per query and shared across all frames (Q*K tokens);
* the *context* bag: the k cells nearest the current trajectory estimate in
  frame t (Q*T*K tokens).

Each token is its cell feature plus an encoding of the 3D offset from the
bag's center, so everything is invariant to translating cloud and query
together.  A bi-directional cross-attention block with per-token MLPs lets
the bags exchange information; each processed bag is then attention-pooled
by a learned probe token (Q*T*2 pooled tokens), the two pools are summed to
one summary per (q, t), and summaries are concatenated across pyramid levels.

The *point-to-neighborhood* baseline replaces the support bag with a single
query-feature token that attention-pools the embedded context bag directly -
structurally the same pooling op with the probe token swapped for the query
embedding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn
from .errors import ConfigError, TokenAssemblyError

__all__ = [
    "NeighborhoodConfig",
    "LevelBags",
    "attention_pool",
    "n2n_block",
    "point_to_neighborhood",
    "summarize_levels",
]


@dataclass(frozen=True)
class NeighborhoodConfig:
    """Shape and mode of the neighborhood attention stack."""

    k: int = 32
    num_levels: int = 1
    channels: int = 16
    num_heads: int = 2
    mlp_ratio: float = 2.0
    num_bands: int = 8
    attention_mode: str = "n2n"          # "n2n" | "p2n"
    offset_attention_bias: bool = False  # optional key bias from neighbor offsets
    share_level_weights: bool = False

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if self.num_levels < 1:
            raise ConfigError(f"num_levels must be >= 1, got {self.num_levels}")
        if self.channels < 1 or self.channels % self.num_heads != 0:
            raise ConfigError(
                f"channels ({self.channels}) must be a positive multiple of "
                f"num_heads ({self.num_heads})"
            )
        if self.mlp_ratio <= 0:
            raise ConfigError(f"mlp_ratio must be positive, got {self.mlp_ratio}")
        if self.num_bands < 1:
            raise ConfigError(f"num_bands must be >= 1, got {self.num_bands}")
        if self.attention_mode not in ("n2n", "p2n"):
            raise ConfigError(f"unknown attention mode {self.attention_mode!r}")

    @property
    def head_dim(self) -> int:
        return self.channels // self.num_heads

    @property
    def summary_width(self) -> int:
        return self.num_levels * self.channels

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "num_levels": self.num_levels,
            "channels": self.channels,
            "num_heads": self.num_heads,
            "mlp_ratio": self.mlp_ratio,
            "num_bands": self.num_bands,
            "attention_mode": self.attention_mode,
            "offset_attention_bias": self.offset_attention_bias,
            "share_level_weights": self.share_level_weights,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NeighborhoodConfig":
        return cls(
            k=int(d["k"]),
            num_levels=int(d["num_levels"]),
            channels=int(d["channels"]),
            num_heads=int(d["num_heads"]),
            mlp_ratio=float(d["mlp_ratio"]),
            num_bands=int(d["num_bands"]),
            attention_mode=str(d["attention_mode"]),
            offset_attention_bias=bool(d["offset_attention_bias"]),
            share_level_weights=bool(d["share_level_weights"]),
        )


@dataclass
class LevelBags:
    """Token bags of one pyramid level, batched over queries and frames.

    ``support_feats`` is ``(Q, K, Cf)`` (shared across frames; tiled inside),
    ``context_feats`` is ``(Q, T, K, Cf)``; offsets are matching plain arrays
    with trailing dim 3.  ``query_feats`` ``(Q, Cf)`` replaces the support bag
    in point-to-neighborhood mode.
    """

    context_feats: nn.Tensor
    context_offsets: np.ndarray
    support_feats: nn.Tensor | None = None
    support_offsets: np.ndarray | None = None
    query_feats: nn.Tensor | None = None


def _heads_split(x: nn.Tensor, num_heads: int) -> nn.Tensor:
    b, n, c = x.shape
    return nn.transpose(nn.reshape(x, (b, n, num_heads, c // num_heads)), (0, 2, 1, 3))


def _heads_merge(x: nn.Tensor) -> nn.Tensor:
    b, h, n, d = x.shape
    return nn.reshape(nn.transpose(x, (0, 2, 1, 3)), (b, n, h * d))


def _linear(params: nn.ParamStore, prefix: str, din: int, dout: int, x: nn.Tensor) -> nn.Tensor:
    w = params.parameter(f"{prefix}.weight", (din, dout))
    b = params.parameter(f"{prefix}.bias", (dout,), init="zeros")
    return nn.linear(x, w, b)


def _mha(
    params: nn.ParamStore,
    prefix: str,
    cfg: NeighborhoodConfig,
    queries: nn.Tensor,
    keys_values: nn.Tensor,
    key_bias: nn.Tensor | None = None,
) -> nn.Tensor:
    """Multi-head attention of ``queries`` over ``keys_values`` (both (B,N,C)).

    ``key_bias`` (B, heads, Nk) is added to every row of attention logits.
    """
    c = cfg.channels
    q = _heads_split(_linear(params, f"{prefix}.q", c, c, queries), cfg.num_heads)
    k = _heads_split(_linear(params, f"{prefix}.k", c, c, keys_values), cfg.num_heads)
    v = _heads_split(_linear(params, f"{prefix}.v", c, c, keys_values), cfg.num_heads)
    scale = q.data.dtype.type(1.0 / math.sqrt(cfg.head_dim))
    logits = nn.mul(nn.matmul(q, nn.transpose(k, (0, 1, 3, 2))), scale)
    if key_bias is not None:
        b, h, nk = key_bias.shape
        logits = nn.add(logits, nn.reshape(key_bias, (b, h, 1, nk)))
    attn = nn.softmax(logits)
    out = _heads_merge(nn.matmul(attn, v))
    return _linear(params, f"{prefix}.out", c, c, out)


def _mlp(params: nn.ParamStore, prefix: str, cfg: NeighborhoodConfig, x: nn.Tensor) -> nn.Tensor:
    c = cfg.channels
    hidden = int(round(c * cfg.mlp_ratio))
    return _linear(params, f"{prefix}.fc2", hidden, c,
                   nn.gelu(_linear(params, f"{prefix}.fc1", c, hidden, x)))


def _embed_bag(
    params: nn.ParamStore,
    prefix: str,
    cfg: NeighborhoodConfig,
    feats: nn.Tensor,
    offsets: np.ndarray,
) -> nn.Tensor:
    """Project features and add the encoded 3D offset from the bag center."""
    cf = feats.shape[-1]
    pe = nn.fourier_encode(offsets.astype(feats.data.dtype), num_bands=cfg.num_bands)
    projected = _linear(params, f"{prefix}.feat_proj", cf, cfg.channels, feats)
    encoded = _linear(params, f"{prefix}.pe_proj", pe.shape[-1], cfg.channels, nn.Tensor(pe))
    return nn.add(projected, encoded)


def _offset_key_bias(
    params: nn.ParamStore,
    prefix: str,
    cfg: NeighborhoodConfig,
    offsets: np.ndarray,
) -> nn.Tensor:
    """Per-key attention-logit bias from neighbor offsets (optional flag)."""
    pe = nn.fourier_encode(offsets.astype(params.dtype), num_bands=cfg.num_bands)
    bias = _linear(params, f"{prefix}.offset_bias", pe.shape[-1], cfg.num_heads, nn.Tensor(pe))
    return nn.transpose(bias, (0, 2, 1))  # (B, heads, Nk)


def attention_pool(
    params: nn.ParamStore,
    prefix: str,
    cfg: NeighborhoodConfig,
    tokens: nn.Tensor,
    probe: nn.Tensor | None = None,
) -> nn.Tensor:
    """Pool ``(B, N, C)`` tokens to ``(B, C)`` by single-token attention.

    With ``probe=None`` a learned free token attends to the bag (one learned
    token per pooling site).  Passing an explicit ``(B, C)`` probe yields the
    point-to-neighborhood form: identical machinery, query-supplied token.
    """
    b, n, c = tokens.shape
    if probe is None:
        token = params.parameter(f"{prefix}.probe", (c,))
        probe3 = nn.broadcast_to(nn.reshape(token, (1, 1, c)), (b, 1, c))
    else:
        probe3 = nn.reshape(probe, (b, 1, c))
    pooled = _mha(params, f"{prefix}.attn", cfg, probe3, nn.layer_norm(tokens))
    return nn.reshape(pooled, (b, c))


def n2n_block(
    params: nn.ParamStore,
    prefix: str,
    cfg: NeighborhoodConfig,
    bags: LevelBags,
) -> nn.Tensor:
    """Bi-directional bag attention for one level; returns ``(Q, T, C)``."""
    if bags.support_feats is None or bags.support_offsets is None:
        raise TokenAssemblyError("n2n block requires support bags")
    q_count, k, cf = bags.support_feats.shape
    qc, t, kc, cfc = bags.context_feats.shape
    if qc != q_count or kc != k or cfc != cf:
        raise TokenAssemblyError(
            f"support {bags.support_feats.shape} and context {bags.context_feats.shape} disagree"
        )
    if bags.support_offsets.shape != (q_count, k, 3) or bags.context_offsets.shape != (q_count, t, k, 3):
        raise TokenAssemblyError("bag offset shapes disagree with feature shapes")
    bsz = q_count * t

    # embed once per bag; support is shared across frames, so embed (Q, K)
    # tokens and broadcast to (Q, T, K) afterwards
    s_emb = _embed_bag(params, f"{prefix}.embed", cfg, bags.support_feats, bags.support_offsets)
    assert s_emb.shape[0] * s_emb.shape[1] == q_count * k
    s = nn.reshape(
        nn.broadcast_to(nn.reshape(s_emb, (q_count, 1, k, cfg.channels)), (q_count, t, k, cfg.channels)),
        (bsz, k, cfg.channels),
    )
    c_emb = _embed_bag(params, f"{prefix}.embed", cfg, bags.context_feats, bags.context_offsets)
    assert c_emb.shape[0] * c_emb.shape[1] * c_emb.shape[2] == q_count * t * k
    c = nn.reshape(c_emb, (bsz, k, cfg.channels))

    ctx_bias = sup_bias = None
    if cfg.offset_attention_bias:
        ctx_off = bags.context_offsets.reshape(bsz, k, 3)
        sup_off = np.broadcast_to(
            bags.support_offsets[:, None, :, :], (q_count, t, k, 3)
        ).reshape(bsz, k, 3)
        ctx_bias = _offset_key_bias(params, prefix, cfg, ctx_off)
        sup_bias = _offset_key_bias(params, prefix, cfg, sup_off)

    # bags exchange information, then refine per-token
    s = nn.add(s, _mha(params, f"{prefix}.s_from_c", cfg, nn.layer_norm(s), nn.layer_norm(c), ctx_bias))
    c = nn.add(c, _mha(params, f"{prefix}.c_from_s", cfg, nn.layer_norm(c), nn.layer_norm(s), sup_bias))
    s = nn.add(s, _mlp(params, f"{prefix}.s_mlp", cfg, nn.layer_norm(s)))
    c = nn.add(c, _mlp(params, f"{prefix}.c_mlp", cfg, nn.layer_norm(c)))

    pooled_s = attention_pool(params, f"{prefix}.pool_s", cfg, s)
    pooled_c = attention_pool(params, f"{prefix}.pool_c", cfg, c)
    fused = nn.add(pooled_s, pooled_c)  # (Q*T, C): one summary per query-frame
    return nn.reshape(fused, (q_count, t, cfg.channels))


def point_to_neighborhood(
    params: nn.ParamStore,
    prefix: str,
    cfg: NeighborhoodConfig,
    bags: LevelBags,
) -> nn.Tensor:
    """Single-query-token baseline for one level; returns ``(Q, T, C)``."""
    if bags.query_feats is None:
        raise TokenAssemblyError("point-to-neighborhood requires query features")
    q_count, t, k, cf = bags.context_feats.shape
    if bags.query_feats.shape != (q_count, cf):
        raise TokenAssemblyError(
            f"query features {bags.query_feats.shape} disagree with context {bags.context_feats.shape}"
        )
    bsz = q_count * t

    zero_off = np.zeros((q_count, 3), dtype=np.float32)
    q_emb = _embed_bag(params, f"{prefix}.embed", cfg, bags.query_feats, zero_off)  # (Q, C)
    probe = nn.reshape(
        nn.broadcast_to(nn.reshape(q_emb, (q_count, 1, cfg.channels)), (q_count, t, cfg.channels)),
        (bsz, cfg.channels),
    )
    c_emb = nn.reshape(
        _embed_bag(params, f"{prefix}.embed", cfg, bags.context_feats, bags.context_offsets),
        (bsz, k, cfg.channels),
    )
    pooled = attention_pool(params, f"{prefix}.pool", cfg, c_emb, probe=probe)
    return nn.reshape(pooled, (q_count, t, cfg.channels))


def summarize_levels(
    params: nn.ParamStore,
    cfg: NeighborhoodConfig,
    level_bags: list[LevelBags],
    prefix: str = "n2n",
) -> nn.Tensor:
    """Per-level neighborhood summaries concatenated to ``(Q, T, L*C)``."""
    if len(level_bags) != cfg.num_levels:
        raise TokenAssemblyError(
            f"expected {cfg.num_levels} levels of bags, got {len(level_bags)}"
        )
    outs = []
    for lvl, bags in enumerate(level_bags):
        p = f"{prefix}.shared" if cfg.share_level_weights else f"{prefix}.level{lvl}"
        if cfg.attention_mode == "n2n":
            outs.append(n2n_block(params, p, cfg, bags))
        else:
            outs.append(point_to_neighborhood(params, p, cfg, bags))
    return nn.concat(outs, axis=-1)
