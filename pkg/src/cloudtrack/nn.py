"""Minimal reverse-mode autodiff over numpy arrays.

The package trains small models on CPU, so instead of a heavyweight framework
it uses a closed set of primitive ops, each with a hand-written
vector-Jacobian product.  Every primitive is validated against central finite
differences by :func:`grad_check` (see tests and the ``gradcheck`` CLI).

Design points:

* :class:`Tensor` wraps an ``np.ndarray`` plus an optional backward closure.
  Graphs are built eagerly; ``backward`` runs reverse topological order.
* ``float32`` is the working precision; gradient checks run the same code in
  ``float64`` (ops preserve input dtype).
* ``backward(stop_at=...)`` truncates at designated tensors, accumulating
  their gradient without crossing.  The trainer uses this to cut iteration
  backwards at the image-feature boundary and flush the encoder exactly once
  per batch.
* :class:`ParamStore` creates named parameters with per-name deterministic
  seeding, so adding a parameter never shifts another one's initialization.
"""

from __future__ import annotations

import math
import zlib
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf as _np_erf

from .errors import CheckpointMismatchError, ConfigError, DivergenceError, ShapeError

__all__ = [
    "Tensor",
    "ParamStore",
    "no_grad",
    "set_nan_debug",
    "as_tensor",
    "add",
    "mul",
    "neg",
    "sub",
    "matmul",
    "reshape",
    "transpose",
    "broadcast_to",
    "concat",
    "stack",
    "index",
    "gather_rows",
    "reduce_sum",
    "mean",
    "sin",
    "cos",
    "exp",
    "log",
    "sqrt",
    "erf",
    "sigmoid",
    "gelu",
    "softmax",
    "layer_norm",
    "l2_norm",
    "bce_with_logits",
    "conv2d",
    "linear",
    "fourier_encode",
    "grad_check",
    "GradCheckResult",
]

_GRAD_ENABLED = True
_DEBUG_NAN = False


def set_nan_debug(enabled: bool) -> None:
    """When enabled, every op raises if it produces a nonfinite value."""
    global _DEBUG_NAN
    _DEBUG_NAN = bool(enabled)


@contextmanager
def no_grad():
    """Context manager disabling graph construction (inference fast path)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """Array node in the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad) and _GRAD_ENABLED
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._vjp = None

    # -- introspection -------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    # -- operators -----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    # -- backward engine -----------------------------------------------------

    def backward(self, seed=None, stop_at: tuple["Tensor", ...] = ()) -> None:
        """Accumulate gradients of ``self`` into leaf (and stop) tensors.

        ``seed`` defaults to 1 for scalar outputs.  Tensors in ``stop_at``
        receive their accumulated gradient in ``.grad`` and are not traversed
        further; a later ``backward`` seeded with that gradient finishes the
        job (used for the once-per-batch encoder flush).
        """
        if not self.requires_grad:
            raise ConfigError("backward on a tensor that does not require grad")
        if seed is None:
            if self.data.size != 1:
                raise ShapeError("backward() without seed requires a scalar output")
            seed_arr = np.ones_like(self.data)
        else:
            seed_arr = np.asarray(seed, dtype=self.data.dtype)
            if seed_arr.shape != self.data.shape:
                seed_arr = np.broadcast_to(seed_arr, self.data.shape).copy()
        stop_ids = {id(t) for t in stop_at}

        order = _toposort(self, stop_ids)
        grads: dict[int, np.ndarray] = {id(self): seed_arr}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            is_stop = id(node) in stop_ids
            if is_stop or not node._parents:
                node.grad = g.copy() if node.grad is None else node.grad + g
            if is_stop or node._vjp is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.dtype != parent.data.dtype:
                    pg = pg.astype(parent.data.dtype)
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else prev + pg


def _toposort(root: Tensor, stop_ids: set[int]) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if id(node) in stop_ids:
            continue
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, (np.ndarray, np.generic)):
        return Tensor(np.asarray(x))
    arr = np.asarray(x)
    # Bare Python scalars carry no intended precision; keep them from
    # promoting float32 graphs to float64 under NumPy 2 promotion rules.
    # Explicitly typed values (np.float64(...), arrays) keep their dtype.
    if arr.ndim == 0 and arr.dtype.kind in "iuf":
        arr = arr.astype(np.float32)
    return Tensor(arr)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], vjp, opname: str) -> Tensor:
    if _DEBUG_NAN and not np.all(np.isfinite(data)):
        raise DivergenceError(f"nonfinite values produced by op {opname!r}")
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise / arithmetic -------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make(data, (a, b), vjp, "add")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)

    return _make(data, (a, b), vjp, "mul")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def sub(a, b) -> Tensor:
    return add(a, neg(b))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul requires operands with ndim >= 2")
    data = a.data @ b.data

    def vjp(g):
        ga = g @ b.data.swapaxes(-1, -2)
        gb = a.data.swapaxes(-1, -2) @ g
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return _make(data, (a, b), vjp, "matmul")


# -- shape ops ----------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    data = a.data.reshape(shape)
    return _make(data, (a,), lambda g: (g.reshape(a.data.shape),), "reshape")


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    data = np.broadcast_to(a.data, shape)
    return _make(data, (a,), lambda g: (_unbroadcast(g, a.data.shape),), "broadcast_to")


def concat(tensors, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(data, tuple(ts), vjp, "concat")


def stack(tensors, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    data = np.stack([t.data for t in ts], axis=axis)

    def vjp(g):
        pieces = np.split(g, len(ts), axis=axis)
        return tuple(p.squeeze(axis=axis) for p in pieces)

    return _make(data, tuple(ts), vjp, "stack")


def index(a, key) -> Tensor:
    """Basic (slice/int/ellipsis) indexing; no advanced indexing here."""
    a = as_tensor(a)
    for k in key if isinstance(key, tuple) else (key,):
        if isinstance(k, (np.ndarray, list)):
            raise ShapeError("index() supports basic slicing only; use gather_rows")
    data = a.data[key]

    def vjp(g):
        out = np.zeros_like(a.data)
        out[key] = g  # basic slices never overlap
        return (out,)

    return _make(data, (a,), vjp, "index")


def gather_rows(a, idx) -> Tensor:
    """Select rows of a 2-D tensor: ``a[idx]`` for an integer index array.

    ``a`` has shape ``(N, C)``; ``idx`` any integer shape ``S``; the result is
    ``S + (C,)``.  The backward scatter-adds duplicate rows deterministically.
    """
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"gather_rows expects a 2-D tensor, got {a.data.shape}")
    idx = np.asarray(idx)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ShapeError("gather_rows index must be integer")
    data = a.data[idx]

    def vjp(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx.reshape(-1), g.reshape(-1, a.data.shape[1]))
        return (out,)

    return _make(data, (a,), vjp, "gather_rows")


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape).copy(),)

    return _make(data, (a,), vjp, "reduce_sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.data.shape[ax] for ax in axes]))
    return mul(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# -- transcendental -----------------------------------------------------------


def sin(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),), "sin")


def cos(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),), "cos")


def exp(a) -> Tensor:
    a = as_tensor(a)
    data = np.exp(a.data)
    return _make(data, (a,), lambda g: (g * data,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    data = np.sqrt(a.data)
    return _make(data, (a,), lambda g: (g * (0.5 / data),), "sqrt")


def erf(a) -> Tensor:
    a = as_tensor(a)
    data = _np_erf(a.data)
    coef = 2.0 / math.sqrt(math.pi)

    def vjp(g):
        return (g * (coef * np.exp(-np.square(a.data))),)

    return _make(data, (a,), vjp, "erf")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    data = data.astype(x.dtype, copy=False)

    def vjp(g):
        return (g * data * (1.0 - data),)

    return _make(data, (a,), vjp, "sigmoid")


def gelu(a) -> Tensor:
    """Gaussian-error smooth rectifier: ``0.5 * x * (1 + erf(x / sqrt(2)))``."""
    a = as_tensor(a)
    return mul(mul(a, 0.5), add(erf(mul(a, 1.0 / math.sqrt(2.0))), 1.0))


# -- fused ops ----------------------------------------------------------------


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * data).sum(axis=axis, keepdims=True)
        return (data * (g - inner),)

    return _make(data, (a,), vjp, "softmax")


def layer_norm(a, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance (no affine)."""
    a = as_tensor(a)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.square(xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    data = xc * inv

    def vjp(g):
        m1 = g.mean(axis=-1, keepdims=True)
        m2 = (g * data).mean(axis=-1, keepdims=True)
        return (inv * (g - m1 - data * m2),)

    return _make(data, (a,), vjp, "layer_norm")


def l2_norm(a) -> Tensor:
    """Euclidean norm over the last axis; gradient defined as 0 at the origin."""
    a = as_tensor(a)
    data = np.sqrt(np.square(a.data).sum(axis=-1))

    def vjp(g):
        denom = np.where(data == 0.0, 1.0, data)
        return (a.data * (g / denom)[..., None] * (data != 0.0)[..., None],)

    return _make(data, (a,), vjp, "l2_norm")


def bce_with_logits(logits, targets) -> Tensor:
    """Elementwise binary cross entropy on logits (numerically stable).

    ``targets`` is a plain array of the same shape with values in [0, 1].
    """
    a = as_tensor(logits)
    z = np.asarray(targets, dtype=a.data.dtype)
    if z.shape != a.data.shape:
        raise ShapeError(f"targets shape {z.shape} != logits shape {a.data.shape}")
    x = a.data
    data = np.maximum(x, 0.0) - x * z + np.log1p(np.exp(-np.abs(x)))

    def vjp(g):
        s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        return (g * (s - z),)

    return _make(data, (a,), vjp, "bce_with_logits")


# -- convolution ---------------------------------------------------------------

_CONV_INDEX_CACHE: dict[tuple, tuple] = {}


def _conv_indices(h: int, w: int, kh: int, kw: int, stride: int):
    """Precompute replicate-pad and im2col index maps for one geometry."""
    key = (h, w, kh, kw, stride)
    cached = _CONV_INDEX_CACHE.get(key)
    if cached is not None:
        return cached
    out_h = -(-h // stride)
    out_w = -(-w // stride)
    pad_h = max(0, (out_h - 1) * stride + kh - h)
    pad_w = max(0, (out_w - 1) * stride + kw - w)
    pt, pl = pad_h // 2, pad_w // 2
    hp, wp = h + pad_h, w + pad_w

    rows = np.clip(np.arange(hp) - pt, 0, h - 1)
    cols = np.clip(np.arange(wp) - pl, 0, w - 1)
    # flat index map: padded cell -> source cell (replicate padding)
    pad_src = (rows[:, None] * w + cols[None, :]).reshape(-1)

    oi = np.arange(out_h) * stride
    oj = np.arange(out_w) * stride
    ki = np.arange(kh)
    kj = np.arange(kw)
    win_r = oi[:, None, None, None] + ki[None, None, :, None]  # (oh,1,kh,1)
    win_c = oj[None, :, None, None] + kj[None, None, None, :]  # (1,ow,1,kw)
    col_idx = (win_r * wp + win_c).reshape(out_h * out_w, kh * kw)
    # compose with the pad map so gather/scatter hit source cells directly
    gather_idx = pad_src[col_idx.reshape(-1)]

    result = (out_h, out_w, gather_idx)
    _CONV_INDEX_CACHE[key] = result
    return result


def conv2d(x, weight, bias=None, stride: int = 1) -> Tensor:
    """2-D convolution with replicate padding to ``ceil(size / stride)`` output.

    ``x`` is ``(H, W, Cin)``, ``weight`` ``(kh, kw, Cin, Cout)``, ``bias``
    ``(Cout,)``.  Implemented as an index-gather plus one GEMM; the backward
    scatter-adds through the same index maps.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 3 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects (H,W,Cin) and (kh,kw,Cin,Cout), got {x.data.shape}, {weight.data.shape}")
    h, w, cin = x.data.shape
    kh, kw, wcin, cout = weight.data.shape
    if wcin != cin:
        raise ShapeError(f"conv2d channel mismatch: input {cin}, weight {wcin}")
    out_h, out_w, gather_idx = _conv_indices(h, w, kh, kw, stride)

    flat = x.data.reshape(h * w, cin)
    cols = flat[gather_idx].reshape(out_h * out_w, kh * kw * cin)
    wmat = weight.data.reshape(kh * kw * cin, cout)
    out = cols @ wmat
    parents: list[Tensor] = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        parents.append(bias)
    data = out.reshape(out_h, out_w, cout)

    def vjp(g):
        g2 = g.reshape(out_h * out_w, cout)
        dw = (cols.T @ g2).reshape(weight.data.shape)
        dcols = (g2 @ wmat.T).reshape(-1, cin)            # (oh*ow*kh*kw, cin)
        dx = np.zeros((h * w, cin), dtype=g.dtype)
        np.add.at(dx, gather_idx, dcols)
        grads = [dx.reshape(x.data.shape), dw]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return _make(data, tuple(parents), vjp, "conv2d")


# -- composite helpers ---------------------------------------------------------


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight (+ bias)`` with ``weight`` shaped ``(in, out)``."""
    out = matmul(x, weight)
    if bias is not None:
        out = add(out, bias)
    return out


def fourier_encode(x, num_bands: int = 8, base_frequency: float = 1.0):
    """Sinusoidal positional code, dims varying slowest.

    For input ``(..., D)`` the output is ``(..., D * num_bands * 2)`` laid out
    as ``(D, num_bands, (sin, cos))`` flattened: band ``b`` uses angular
    frequency ``2**b * pi * base_frequency``.  Zero input gives all sin terms
    0 and all cos terms 1.  Accepts a plain array (returns an array) or a
    :class:`Tensor` (returns a graph node).
    """
    if num_bands < 1:
        raise ConfigError(f"num_bands must be >= 1, got {num_bands}")
    freqs = (2.0 ** np.arange(num_bands)) * np.pi * base_frequency
    if isinstance(x, Tensor):
        d = x.data.shape[-1]
        ang = mul(reshape(x, x.data.shape + (1,)), freqs.astype(x.data.dtype))
        enc = stack([sin(ang), cos(ang)], axis=-1)
        return reshape(enc, x.data.shape[:-1] + (d * num_bands * 2,))
    arr = np.asarray(x)
    ang = arr[..., None] * freqs.astype(arr.dtype)
    enc = np.stack([np.sin(ang), np.cos(ang)], axis=-1)
    return enc.reshape(arr.shape[:-1] + (arr.shape[-1] * num_bands * 2,)).astype(arr.dtype)


# -- parameters ----------------------------------------------------------------


class ParamStore:
    """Named, deterministically initialized trainable parameters.

    Each parameter's RNG is keyed by ``(store seed, crc32(name))``, so the
    initialization of one parameter never depends on creation order of the
    others.  Fetching an existing name returns the same tensor.
    """

    def __init__(self, seed: int = 0, dtype=np.float32):
        self.seed = int(seed)
        self.dtype = np.dtype(dtype)
        if self.dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
            raise ConfigError(f"ParamStore dtype must be float32/float64, got {self.dtype}")
        self._params: dict[str, Tensor] = {}

    def parameter(self, name: str, shape, init: str = "trunc_normal", std: float = 0.02) -> Tensor:
        shape = tuple(int(s) for s in shape)
        existing = self._params.get(name)
        if existing is not None:
            if existing.data.shape != shape:
                raise ShapeError(
                    f"parameter {name!r} exists with shape {existing.data.shape}, requested {shape}"
                )
            return existing
        rng = np.random.default_rng([self.seed, zlib.crc32(name.encode("utf-8"))])
        if init == "trunc_normal":
            data = rng.normal(0.0, std, size=shape)
            for _ in range(16):
                bad = np.abs(data) > 2.0 * std
                if not bad.any():
                    break
                data[bad] = rng.normal(0.0, std, size=int(bad.sum()))
            np.clip(data, -2.0 * std, 2.0 * std, out=data)
        elif init == "zeros":
            data = np.zeros(shape)
        elif init == "ones":
            data = np.ones(shape)
        else:
            raise ConfigError(f"unknown init {init!r}")
        tensor = Tensor(np.ascontiguousarray(data, dtype=self.dtype), requires_grad=True, name=name)
        self._params[name] = tensor
        return tensor

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params.keys())

    def items(self):
        return self._params.items()

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self._params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray], strict: bool = True) -> None:
        if strict:
            missing = set(self._params) - set(arrays)
            extra = set(arrays) - set(self._params)
            if missing or extra:
                raise CheckpointMismatchError(
                    f"parameter names differ: missing={sorted(missing)[:4]} extra={sorted(extra)[:4]}"
                )
        for name, arr in arrays.items():
            param = self._params.get(name)
            if param is None:
                continue
            arr = np.asarray(arr)
            if arr.shape != param.data.shape:
                raise CheckpointMismatchError(
                    f"parameter {name!r}: stored shape {arr.shape} != model shape {param.data.shape}"
                )
            param.data = np.ascontiguousarray(arr, dtype=self.dtype)

    def zero_grads(self) -> None:
        for p in self._params.values():
            p.grad = None

    def num_values(self) -> int:
        return sum(p.data.size for p in self._params.values())


# -- gradient checking -----------------------------------------------------------


@dataclass
class GradCheckResult:
    """Outcome of a finite-difference comparison."""

    ok: bool
    max_rel_err: float
    worst: str = ""
    failures: list[str] = field(default_factory=list)

    def __str__(self) -> str:
        status = "ok" if self.ok else "FAIL"
        return f"grad_check {status}: max rel err {self.max_rel_err:.3e} ({self.worst})"


def grad_check(
    fn,
    inputs: dict[str, Tensor],
    eps: float = 1e-5,
    rtol: float = 1e-4,
    atol: float = 1e-7,
    require_float64: bool = True,
) -> GradCheckResult:
    """Compare analytic gradients of ``fn()`` against central differences.

    ``fn`` must rebuild its graph from the given leaf tensors on every call
    and return a scalar tensor.  Every element of every input is perturbed by
    ``+-eps``; an element fails when ``|analytic - numeric| > atol + rtol *
    max(|analytic|, |numeric|)``.
    """
    for name, t in inputs.items():
        if not isinstance(t, Tensor) or not t.requires_grad:
            raise ConfigError(f"grad_check input {name!r} must be a Tensor requiring grad")
        if require_float64 and t.data.dtype != np.float64:
            raise ConfigError(f"grad_check input {name!r} must be float64, got {t.data.dtype}")

    out = fn()
    if out.data.size != 1:
        raise ShapeError("grad_check target must be scalar")
    for t in inputs.values():
        t.grad = None
    out.backward()

    max_rel = 0.0
    worst = ""
    failures: list[str] = []
    for name, t in inputs.items():
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        t.data = np.ascontiguousarray(t.data)
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = fn().item()
            flat[i] = orig - eps
            f_minus = fn().item()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = float(analytic.reshape(-1)[i])
            diff = abs(a - numeric)
            denom = max(abs(a), abs(numeric))
            rel = diff / max(denom, 1e-12)
            tracked_rel = rel if denom > atol else 0.0
            if tracked_rel > max_rel:
                max_rel = tracked_rel
                worst = f"{name}[{i}]"
            if diff > atol + rtol * denom:
                failures.append(
                    f"{name}[{i}]: analytic {a:.6e} vs numeric {numeric:.6e} (diff {diff:.3e})"
                )
    return GradCheckResult(ok=not failures, max_rel_err=max_rel, worst=worst, failures=failures)
