"""Multi-scale feature clouds: 2D features enriched with 3D coordinates.

A video frame becomes a small grid of feature cells (stride ``downsample``
pixels per cell), each carrying the 3D point of its anchor pixel.  A pyramid
of ``num_levels`` levels coarsens the grid by 2x per level:

* features: 2x2 average pooling over *valid* cells (empty blocks stay zero),
* coordinates: nearest-neighbor pick of the block's top-left cell,
* validity: the picked cell's validity.

Level ``l`` therefore has grid dims ``ceil(H1 / 2**(l-1))`` and its
coordinates are a subset of level-1 coordinates.  Features flow through the
autodiff graph (pooling is a constant matrix multiply); coordinates and
validity are plain arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn
from .errors import ConfigError, FormatError, ShapeError

__all__ = [
    "EncoderConfig",
    "CloudLevel",
    "encode_frame",
    "features_from_external",
    "grid_shape",
    "level_shapes",
    "attach_coordinates",
    "build_pyramid",
]


@dataclass(frozen=True)
class EncoderConfig:
    """Toy convolutional encoder: a few strided conv blocks."""

    channels: tuple[int, ...] = (16, 32, 32)
    strides: tuple[int, ...] = (2, 1, 1)
    kernel_size: int = 3

    def __post_init__(self) -> None:
        if len(self.channels) != len(self.strides) or not self.channels:
            raise ConfigError("encoder channels and strides must be equal-length, nonempty")
        if any(c < 1 for c in self.channels) or any(s < 1 for s in self.strides):
            raise ConfigError("encoder channels and strides must be positive")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel size must be odd and positive, got {self.kernel_size}")

    @property
    def downsample(self) -> int:
        return int(np.prod(self.strides))

    @property
    def out_channels(self) -> int:
        return self.channels[-1]

    def to_dict(self) -> dict:
        return {
            "channels": list(self.channels),
            "strides": list(self.strides),
            "kernel_size": self.kernel_size,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(
            channels=tuple(d["channels"]),
            strides=tuple(d["strides"]),
            kernel_size=int(d["kernel_size"]),
        )


def grid_shape(height: int, width: int, downsample: int) -> tuple[int, int]:
    """Feature-grid dims for an image: ``ceil(size / downsample)``."""
    return -(-height // downsample), -(-width // downsample)


def level_shapes(h1: int, w1: int, num_levels: int) -> list[tuple[int, int]]:
    """Grid dims per pyramid level: ``ceil(level1 / 2**(l-1))``."""
    if num_levels < 1:
        raise ConfigError(f"num_levels must be >= 1, got {num_levels}")
    if h1 < 1 or w1 < 1:
        raise ConfigError(f"level-1 grid must be nonempty, got {h1}x{w1}")
    if 2 ** (num_levels - 1) > max(h1, w1):
        raise ConfigError(
            f"{num_levels} levels collapse a {h1}x{w1} grid past a single cell"
        )
    return [(-(-h1 // 2 ** l), -(-w1 // 2 ** l)) for l in range(num_levels)]


def encode_frame(
    rgb: np.ndarray,
    params: nn.ParamStore,
    config: EncoderConfig,
    prefix: str = "encoder",
) -> nn.Tensor:
    """Run the toy encoder on one frame; returns features ``(H', W', C)``.

    Accepts uint8 RGB or floats in [0, 1]; both are centered to [-0.5, 0.5].
    Convolutions use replicate padding, so a constant-color image yields
    spatially constant features everywhere.
    """
    img = np.asarray(rgb)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"rgb frame must be (H, W, 3), got {img.shape}")
    if img.dtype == np.uint8:
        data = img.astype(np.float32) / 255.0 - 0.5
    else:
        data = img.astype(np.float32) - 0.5
    x = nn.Tensor(data)
    k = config.kernel_size
    cin = 3
    for i, (cout, stride) in enumerate(zip(config.channels, config.strides)):
        w = params.parameter(f"{prefix}.conv{i}.weight", (k, k, cin, cout))
        b = params.parameter(f"{prefix}.conv{i}.bias", (cout,), init="zeros")
        x = nn.conv2d(x, w, b, stride=stride)
        if i + 1 < len(config.channels):
            x = nn.gelu(x)
        cin = cout
    return x


def features_from_external(
    features: np.ndarray,
    image_hw: tuple[int, int],
    stride: int,
    expected_channels: int | None = None,
) -> nn.Tensor:
    """Wrap precomputed per-frame features, validating the grid contract."""
    feats = np.asarray(features)
    if feats.ndim != 3:
        raise FormatError(f"external features must be (H', W', C), got {feats.shape}")
    want = grid_shape(image_hw[0], image_hw[1], stride)
    if feats.shape[:2] != want:
        raise FormatError(
            f"external feature grid {feats.shape[:2]} != expected {want} "
            f"for image {image_hw} at stride {stride}"
        )
    if expected_channels is not None and feats.shape[2] != expected_channels:
        raise FormatError(
            f"external features have {feats.shape[2]} channels, config expects {expected_channels}"
        )
    return nn.Tensor(np.ascontiguousarray(feats, dtype=np.float32))


def attach_coordinates(
    pointmap: np.ndarray,
    valid: np.ndarray,
    stride: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Anchor each feature cell to its top-left pixel's 3D point.

    Returns flat ``(N, 3)`` float64 coordinates and ``(N,)`` validity for the
    ``ceil(H/stride) x ceil(W/stride)`` grid (row-major cell order).
    """
    pm = np.asarray(pointmap, dtype=np.float64)
    vd = np.asarray(valid, dtype=bool)
    if pm.ndim != 3 or pm.shape[2] != 3 or vd.shape != pm.shape[:2]:
        raise ShapeError(f"bad pointmap/valid shapes: {pm.shape}, {vd.shape}")
    h, w = vd.shape
    gh, gw = grid_shape(h, w, stride)
    rows = np.arange(gh) * stride
    cols = np.arange(gw) * stride
    coords = pm[rows[:, None], cols[None, :]].reshape(-1, 3)
    cell_valid = vd[rows[:, None], cols[None, :]].reshape(-1)
    return coords, cell_valid


@dataclass
class CloudLevel:
    """One pyramid level of a frame's feature cloud (flat row-major cells)."""

    features: nn.Tensor    # (N, C), in the autodiff graph
    coords: np.ndarray     # (N, 3) float64, tracking coordinate system
    valid: np.ndarray      # (N,) bool
    height: int
    width: int

    def __post_init__(self) -> None:
        n = self.height * self.width
        if self.features.shape[0] != n or self.coords.shape != (n, 3) or self.valid.shape != (n,):
            raise ShapeError(
                f"level arrays disagree: {self.features.shape}, {self.coords.shape}, "
                f"{self.valid.shape} for {self.height}x{self.width}"
            )

    @property
    def num_cells(self) -> int:
        return self.height * self.width

    @property
    def channels(self) -> int:
        return int(self.features.shape[1])


def _pool_matrix(h: int, w: int, valid_flat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Masked 2x2 mean-pool matrix and the top-left pick indices.

    Returns ``(P, picked)`` where ``P @ features`` pools a flat ``(h*w, C)``
    level to ``(h2*w2, C)`` averaging only valid source cells (all-invalid
    blocks give zero), and ``picked`` indexes each block's top-left cell.
    """
    h2, w2 = -(-h // 2), -(-w // 2)
    p = np.zeros((h2 * w2, h * w), dtype=np.float32)
    counts = np.zeros(h2 * w2, dtype=np.int64)
    bi = np.repeat(np.arange(h2), w2)
    bj = np.tile(np.arange(w2), h2)
    blocks = bi * w2 + bj
    for di in (0, 1):
        for dj in (0, 1):
            ii = 2 * bi + di
            jj = 2 * bj + dj
            ok = (ii < h) & (jj < w)
            src = ii[ok] * w + jj[ok]
            use = valid_flat[src]
            p[blocks[ok][use], src[use]] = 1.0
            counts[blocks[ok][use]] += 1
    nonzero = counts > 0
    p[nonzero] /= counts[nonzero, None].astype(np.float32)
    picked = (2 * bi) * w + 2 * bj
    return p, picked


def build_pyramid(
    features: nn.Tensor,
    coords: np.ndarray,
    valid: np.ndarray,
    num_levels: int,
) -> list[CloudLevel]:
    """Build the level list for one frame from its level-1 grid.

    ``features`` may be ``(H', W', C)`` or flat ``(H'*W', C)`` with
    ``coords``/``valid`` flat in matching row-major order.
    """
    if features.ndim == 3:
        gh, gw = features.shape[0], features.shape[1]
        flat = nn.reshape(features, (gh * gw, features.shape[2]))
    elif features.ndim == 2:
        raise ShapeError("flat features are ambiguous; pass (H', W', C)")
    else:
        raise ShapeError(f"features must be (H', W', C), got {features.shape}")
    level_shapes(gh, gw, num_levels)  # validates level count

    levels = [CloudLevel(flat, np.asarray(coords, dtype=np.float64),
                         np.asarray(valid, dtype=bool), gh, gw)]
    for _ in range(1, num_levels):
        prev = levels[-1]
        pmat, picked = _pool_matrix(prev.height, prev.width, prev.valid)
        pooled = nn.matmul(nn.Tensor(pmat), prev.features)
        levels.append(
            CloudLevel(
                features=pooled,
                coords=prev.coords[picked],
                valid=prev.valid[picked],
                height=-(-prev.height // 2),
                width=-(-prev.width // 2),
            )
        )
    return levels
