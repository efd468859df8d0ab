"""Differentiable tensor operations.

Every op validates extents, computes its output extents, and then either
returns a meta tensor (shape-only execution) or computes values and records
a vector-Jacobian product on the active tape.  Feature maps use the
[N, C, D, H, W] layout throughout.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from scipy.special import erf

from . import conv as K
from .conv import ConvSpec, ShapeError
from .tensor import Tensor, emit

LN_EPS = 1e-6
BN_EPS = 1e-5
BN_MOMENTUM = 0.1
LEAKY_SLOPE = 0.01

_SQRT_HALF = np.sqrt(0.5)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


# --------------------------------------------------------------------------
# cost accounting hooks (consumed by dnet.analysis)


@dataclass
class CostRecord:
    op: str
    name: str
    macs: int
    elements: int
    output_shape: tuple[int, ...]


@dataclass
class CostLog:
    records: list[CostRecord] = field(default_factory=list)


_COST_LOGS: list[CostLog] = []


@contextlib.contextmanager
def cost_log():
    log = CostLog()
    _COST_LOGS.append(log)
    try:
        yield log
    finally:
        _COST_LOGS.remove(log)


def _cost(op: str, name: str | None, out_shape, macs: int = 0) -> None:
    if _COST_LOGS:
        rec = CostRecord(op, name or op, int(macs), int(np.prod(out_shape, dtype=np.int64)),
                         tuple(out_shape))
        for log in _COST_LOGS:
            log.records.append(rec)


_BRANCH_LOGS: list[list[np.ndarray]] = []
_FROZEN: list = []


@contextlib.contextmanager
def branch_log():
    """Collect the branch decisions of piecewise ops (leaky_relu sign, channel max index)."""
    log: list[np.ndarray] = []
    _BRANCH_LOGS.append(log)
    try:
        yield log
    finally:
        _BRANCH_LOGS.remove(log)


@contextlib.contextmanager
def frozen_branches(decisions: list[np.ndarray]):
    """Replay recorded decisions in op order, pinning every piecewise op to one piece."""
    _FROZEN.append(iter(decisions))
    try:
        yield
    finally:
        _FROZEN.pop()


def _branch(decision: np.ndarray) -> np.ndarray:
    if _FROZEN:
        pinned = next(_FROZEN[-1], None)
        if pinned is None or pinned.shape != decision.shape:
            raise RuntimeError("frozen branch replay does not match the forward graph")
        decision = pinned
    for log in _BRANCH_LOGS:
        log.append(decision)
    return decision


def _any_meta(*ts) -> bool:
    return any(t is not None and t.is_meta for t in ts)


def _require_5d(x: Tensor, op: str) -> None:
    if x.ndim != 5:
        raise ShapeError(f"{op}: expected [N, C, D, H, W] input, got extents {x.shape}")


# --------------------------------------------------------------------------
# convolution


def _check_conv(x: Tensor, w: Tensor, b: Tensor | None, spec: ConvSpec, op: str):
    _require_5d(x, op)
    if tuple(w.shape) != spec.weight_shape:
        raise ShapeError(f"{op}: weight extents {w.shape} != expected {spec.weight_shape}")
    if x.shape[1] != spec.in_channels:
        raise ShapeError(f"{op}: input has {x.shape[1]} channels, spec expects {spec.in_channels}")
    if spec.has_bias and b is None:
        raise ShapeError(f"{op}: spec declares a bias but none was given")
    if b is not None and tuple(b.shape) != (spec.out_channels,):
        raise ShapeError(f"{op}: bias extents {b.shape} != ({spec.out_channels},)")


def conv3d(x: Tensor, w: Tensor, b: Tensor | None, spec: ConvSpec) -> Tensor:
    """3-D cross-correlation with stride, dilation, zero padding and groups."""
    if spec.transposed:
        raise ValueError("conv3d got a transposed spec; use transposed_conv3d")
    _check_conv(x, w, b, spec, "conv3d")
    out_sp = spec.output_spatial(x.shape[2:])
    out_shape = (x.shape[0], spec.out_channels, *out_sp)
    macs = int(np.prod(out_shape, dtype=np.int64)) * (spec.in_channels // spec.groups) * spec.taps
    _cost("conv3d", w.name, out_shape, macs)
    if _any_meta(x, w, b):
        return Tensor.meta(out_shape, x.dtype)

    xd, wd = x.data, w.data
    y = K.gather(xd, wd, spec, out_sp)
    if b is not None:
        y += b.data.reshape(1, -1, 1, 1, 1)
    in_sp = x.shape[2:]

    def vjp(g):
        dx = K.scatter(g, wd, spec, in_sp) if x.requires_grad else None
        dw = K.weight_grad(xd, g, spec) if w.requires_grad else None
        db = g.sum(axis=(0, 2, 3, 4)) if b is not None and b.requires_grad else None
        return dx, dw, db

    return emit("conv3d", y, (x, w, b), vjp)


def transposed_conv3d(x: Tensor, w: Tensor, b: Tensor | None, spec: ConvSpec) -> Tensor:
    """Adjoint of conv3d w.r.t. its input (scatter form), plus bias.

    Weights use the [in_channels, out_channels / groups, kd, kh, kw] layout.
    """
    if not spec.transposed:
        raise ValueError("transposed_conv3d needs a spec with transposed=True")
    _check_conv(x, w, b, spec, "transposed_conv3d")
    out_sp = spec.output_spatial(x.shape[2:])
    out_shape = (x.shape[0], spec.out_channels, *out_sp)
    # counted as the equivalent forward conv over the zero-dilated input
    macs = int(np.prod(out_shape, dtype=np.int64)) * (spec.in_channels // spec.groups) * spec.taps
    _cost("transposed_conv3d", w.name, out_shape, macs)
    if _any_meta(x, w, b):
        return Tensor.meta(out_shape, x.dtype)

    xd, wd = x.data, w.data
    y = K.scatter(xd, wd, spec, out_sp)
    if b is not None:
        y += b.data.reshape(1, -1, 1, 1, 1)

    def vjp(g):
        dx = K.gather(g, wd, spec, xd.shape[2:]) if x.requires_grad else None
        dw = K.weight_grad(g, xd, spec) if w.requires_grad else None
        db = g.sum(axis=(0, 2, 3, 4)) if b is not None and b.requires_grad else None
        return dx, dw, db

    return emit("transposed_conv3d", y, (x, w, b), vjp)


# --------------------------------------------------------------------------
# pooling


def channel_stats_pool(x: Tensor, kind: Literal["mean", "max"]) -> Tensor:
    """Per-voxel mean or max across channels; channel extent collapses to 1."""
    _require_5d(x, "channel_stats_pool")
    if kind not in ("mean", "max"):
        raise ValueError(f"unknown channel pool kind {kind!r}")
    out_shape = (x.shape[0], 1, *x.shape[2:])
    _cost(f"channel_{kind}", None, out_shape)
    if x.is_meta:
        return Tensor.meta(out_shape, x.dtype)
    xd = x.data
    c = xd.shape[1]
    if kind == "mean":
        y = xd.mean(axis=1, keepdims=True)

        def vjp(g):
            return (np.broadcast_to(g / c, xd.shape).copy(),)
    else:
        idx = _branch(xd.argmax(axis=1)[:, None])  # first maximal channel on ties
        y = np.take_along_axis(xd, idx, axis=1)

        def vjp(g):
            dx = np.zeros_like(xd)
            np.put_along_axis(dx, idx, g, axis=1)
            return (dx,)

    return emit(f"channel_{kind}", y, (x,), vjp)


def global_avg_pool(x: Tensor) -> Tensor:
    _require_5d(x, "global_avg_pool")
    out_shape = (x.shape[0], x.shape[1], 1, 1, 1)
    _cost("global_avg_pool", None, x.shape)
    if x.is_meta:
        return Tensor.meta(out_shape, x.dtype)
    xd = x.data
    n_vox = xd.shape[2] * xd.shape[3] * xd.shape[4]
    y = xd.reshape(*xd.shape[:2], -1).mean(axis=2).reshape(out_shape)

    def vjp(g):
        return (np.broadcast_to(g / n_vox, xd.shape).copy(),)

    return emit("global_avg_pool", y, (x,), vjp)


# --------------------------------------------------------------------------
# activations


def sigmoid(x: Tensor) -> Tensor:
    _cost("sigmoid", None, x.shape)
    if x.is_meta:
        return Tensor.meta(x.shape, x.dtype)
    xd = x.data
    # split form avoids overflow in exp for large |x|
    e = np.exp(-np.abs(xd))
    y = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(xd.dtype)

    def vjp(g):
        return (g * y * (1.0 - y),)

    return emit("sigmoid", y, (x,), vjp)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    _cost("gelu", None, x.shape)
    if x.is_meta:
        return Tensor.meta(x.shape, x.dtype)
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _SQRT_HALF))
    y = (xd * cdf).astype(xd.dtype)

    def vjp(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
        return ((g * (cdf + xd * pdf)).astype(xd.dtype),)

    return emit("gelu", y, (x,), vjp)


def leaky_relu(x: Tensor, alpha: float = LEAKY_SLOPE) -> Tensor:
    _cost("leaky_relu", None, x.shape)
    if x.is_meta:
        return Tensor.meta(x.shape, x.dtype)
    xd = x.data
    pos = _branch(xd >= 0)
    y = np.where(pos, xd, alpha * xd).astype(xd.dtype)

    def vjp(g):
        return (np.where(pos, g, alpha * g).astype(g.dtype),)

    return emit("leaky_relu", y, (x,), vjp)


def activation(x: Tensor, kind: str, alpha: float = LEAKY_SLOPE) -> Tensor:
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "gelu":
        return gelu(x)
    if kind == "leaky_relu":
        return leaky_relu(x, alpha)
    raise ValueError(f"unknown activation {kind!r}")


# --------------------------------------------------------------------------
# normalization


def _check_affine(x: Tensor, *params: Tensor | None, op: str) -> None:
    for p in params:
        if p is not None and tuple(p.shape) != (x.shape[1],):
            raise ShapeError(f"{op}: parameter extents {p.shape} do not match {x.shape[1]} channels")


def layer_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    """Channels-first layer norm: each voxel's channel vector is standardized."""
    _require_5d(x, "layer_norm")
    _check_affine(x, weight, bias, op="layer_norm")
    _cost("layer_norm", weight.name, x.shape)
    if _any_meta(x, weight, bias):
        return Tensor.meta(x.shape, x.dtype)
    xd = x.data
    c = xd.shape[1]
    mu = xd.mean(axis=1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    wv = weight.data.reshape(1, -1, 1, 1, 1)
    y = xhat * wv + bias.data.reshape(1, -1, 1, 1, 1)

    def vjp(g):
        dxhat = g * wv
        dx = inv / c * (c * dxhat - dxhat.sum(axis=1, keepdims=True)
                        - xhat * (dxhat * xhat).sum(axis=1, keepdims=True))
        dw = (g * xhat).sum(axis=(0, 2, 3, 4))
        db = g.sum(axis=(0, 2, 3, 4))
        return dx, dw, db

    return emit("layer_norm", y, (x, weight, bias), vjp)


def batch_norm(
    x: Tensor,
    weight: Tensor,
    bias: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Batch norm over (N, D, H, W) per channel.

    In training mode the running statistics are updated in place
    (unbiased variance, exponential averaging with ``momentum``).
    """
    _require_5d(x, "batch_norm")
    _check_affine(x, weight, bias, running_mean, running_var, op="batch_norm")
    _cost("batch_norm", weight.name, x.shape)
    if _any_meta(x, weight, bias):
        return Tensor.meta(x.shape, x.dtype)
    xd = x.data
    wv = weight.data.reshape(1, -1, 1, 1, 1)
    bv = bias.data.reshape(1, -1, 1, 1, 1)
    axes = (0, 2, 3, 4)

    if not training:
        inv = (1.0 / np.sqrt(running_var.data + eps)).reshape(1, -1, 1, 1, 1)
        xhat = (xd - running_mean.data.reshape(1, -1, 1, 1, 1)) * inv
        y = xhat * wv + bv

        def vjp(g):
            return g * wv * inv, (g * xhat).sum(axis=axes), g.sum(axis=axes), None, None

        return emit("batch_norm", y, (x, weight, bias, running_mean, running_var), vjp)

    m = xd.shape[0] * xd.shape[2] * xd.shape[3] * xd.shape[4]
    mu = xd.mean(axis=axes, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * wv + bv

    unbiased = var.reshape(-1) * (m / max(m - 1, 1))
    running_mean.data = ((1 - momentum) * running_mean.data + momentum * mu.reshape(-1)).astype(
        running_mean.dtype)
    running_var.data = ((1 - momentum) * running_var.data + momentum * unbiased).astype(
        running_var.dtype)

    def vjp(g):
        dxhat = g * wv
        dx = inv / m * (m * dxhat - dxhat.sum(axis=axes, keepdims=True)
                        - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
        return dx, (g * xhat).sum(axis=axes), g.sum(axis=axes), None, None

    return emit("batch_norm", y, (x, weight, bias, running_mean, running_var), vjp)


def normalize(x: Tensor, kind: str, params, mode: str = "eval") -> Tensor:
    """Dispatch to layer or batch norm; ``params`` has weight/bias (+ running stats)."""
    if kind == "layer_norm":
        return layer_norm(x, params.weight, params.bias)
    if kind == "batch_norm":
        return batch_norm(x, params.weight, params.bias, params.running_mean,
                          params.running_var, training=(mode == "train"))
    raise ValueError(f"unknown normalization {kind!r}")


# --------------------------------------------------------------------------
# structural and elementwise


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != b.ndim or a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels: extents {a.shape} and {b.shape} differ off the channel axis")
    ca = a.shape[1]
    out_shape = (a.shape[0], ca + b.shape[1], *a.shape[2:])
    if _any_meta(a, b):
        return Tensor.meta(out_shape, a.dtype)
    y = np.concatenate([a.data, b.data], axis=1)

    def vjp(g):
        return g[:, :ca], g[:, ca:]

    return emit("concat_channels", y, (a, b), vjp)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start < stop <= x.shape[1]:
        raise ShapeError(f"slice_channels: [{start}, {stop}) outside {x.shape[1]} channels")
    out_shape = (x.shape[0], stop - start, *x.shape[2:])
    if x.is_meta:
        return Tensor.meta(out_shape, x.dtype)
    xd = x.data
    y = xd[:, start:stop].copy()

    def vjp(g):
        dx = np.zeros_like(xd)
        dx[:, start:stop] = g
        return (dx,)

    return emit("slice_channels", y, (x,), vjp)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    if a.shape == b.shape:
        return a.shape
    if a.ndim == b.ndim:
        if all(sb in (1, sa) for sa, sb in zip(a.shape, b.shape)):
            return a.shape
        if all(sa in (1, sb) for sa, sb in zip(a.shape, b.shape)):
            return b.shape
    raise ShapeError(f"{op}: extents {a.shape} and {b.shape} are not broadcast-compatible")


def elementwise(a: Tensor, b: Tensor, kind: Literal["add", "mul"]) -> Tensor:
    """Add or multiply; one operand may broadcast along size-1 axes of the other."""
    if kind not in ("add", "mul"):
        raise ValueError(f"unknown elementwise kind {kind!r}")
    out_shape = _broadcast_shape(a, b, kind)
    _cost(kind, None, out_shape)
    if _any_meta(a, b):
        return Tensor.meta(out_shape, a.dtype)
    ad, bd = a.data, b.data
    if kind == "add":
        y = ad + bd

        def vjp(g):
            return _unbroadcast(g, ad.shape), _unbroadcast(g, bd.shape)
    else:
        y = ad * bd

        def vjp(g):
            da = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
            db = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
            return da, db

    return emit(kind, y, (a, b), vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    return elementwise(a, b, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    return elementwise(a, b, "mul")


def scale(x: Tensor, factor: float) -> Tensor:
    _cost("scale", None, x.shape)
    if x.is_meta:
        return Tensor.meta(x.shape, x.dtype)
    y = x.data * x.dtype.type(factor)

    def vjp(g):
        return (g * factor,)

    return emit("scale", y, (x,), vjp)


def dropout(x: Tensor, rate: float, mode: str = "eval", seed: int = 0) -> Tensor:
    """Inverted dropout; the keep-mask is a pure function of ``seed``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if mode != "train" or rate == 0.0 or x.is_meta:
        return x
    keep = np.random.default_rng(seed).random(x.shape) >= rate
    factor = x.dtype.type(1.0 / (1.0 - rate))
    y = np.where(keep, x.data * factor, 0).astype(x.dtype)

    def vjp(g):
        return (np.where(keep, g * factor, 0).astype(g.dtype),)

    return emit("dropout", y, (x,), vjp)


def reduce_sum(x: Tensor) -> Tensor:
    if x.is_meta:
        return Tensor.meta((1,), x.dtype)
    xd = x.data
    y = np.array([xd.sum()], dtype=xd.dtype)

    def vjp(g):
        return (np.full(xd.shape, g[0], dtype=xd.dtype),)

    return emit("sum", y, (x,), vjp)


def reduce_mean(x: Tensor) -> Tensor:
    return scale(reduce_sum(x), 1.0 / x.size)


def weighted_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    """sum(x * weights) for a constant weight array; a cheap random projection for gradchecks."""
    if weights.shape != x.shape:
        raise ShapeError(f"weighted_sum: weights {weights.shape} vs value {x.shape}")
    xd = x.data
    wd = weights.astype(xd.dtype)
    y = np.array([(xd * wd).sum()], dtype=xd.dtype)

    def vjp(g):
        return (g[0] * wd,)

    return emit("weighted_sum", y, (x,), vjp)
