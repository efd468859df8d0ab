"""Convolution geometry and the raw array kernels behind conv3d.

Three kernels cover both convolution flavours:

* ``gather``  - the forward convolution (cross-correlation),
* ``scatter`` - its adjoint with respect to the input (= transposed conv),
* ``weight_grad`` - its adjoint with respect to the weights.

Depthwise convolutions run a per-tap loop over the valid (non-padding)
region only; dense convolutions go through an im2col buffer and a single
matmul per group.  Taps that touch only padding are skipped, which matters
for the dilated 7^3 kernels on small feature maps.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

Triple = tuple[int, int, int]


class ShapeError(ValueError):
    """Raised when tensor extents do not fit an operation."""


class InvalidSpecError(ValueError):
    """Raised for a convolution spec that cannot produce any output."""


def _triple(v, name: str) -> Triple:
    if isinstance(v, (int, np.integer)):
        return (int(v),) * 3
    t = tuple(int(a) for a in v)
    if len(t) != 3:
        raise InvalidSpecError(f"{name} needs 3 entries, got {t}")
    return t  # type: ignore[return-value]


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: Triple = (1, 1, 1)
    stride: Triple = (1, 1, 1)
    dilation: Triple = (1, 1, 1)
    padding: Triple | None = None
    groups: int = 1
    has_bias: bool = True
    transposed: bool = False
    _pad: Triple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        for name in ("kernel", "stride", "dilation"):
            object.__setattr__(self, name, _triple(getattr(self, name), name))
        if self.padding is None:
            # shape-preserving "same" padding: p = d*(k-1)/2
            pad = tuple(d * (k - 1) // 2 for k, d in zip(self.kernel, self.dilation))
        else:
            pad = _triple(self.padding, "padding")
        object.__setattr__(self, "padding", pad)
        object.__setattr__(self, "_pad", pad)
        if min(self.kernel) < 1 or min(self.stride) < 1 or min(self.dilation) < 1:
            raise InvalidSpecError(f"kernel/stride/dilation must be positive: {self}")
        if min(pad) < 0:
            raise InvalidSpecError(f"padding must be non-negative: {pad}")
        if self.in_channels < 1 or self.out_channels < 1 or self.groups < 1:
            raise InvalidSpecError(f"channels and groups must be positive: {self}")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise InvalidSpecError(
                f"groups={self.groups} must divide in_channels={self.in_channels} "
                f"and out_channels={self.out_channels}"
            )

    @property
    def depthwise(self) -> bool:
        return self.groups == self.in_channels == self.out_channels

    @property
    def pointwise(self) -> bool:
        return self.kernel == (1, 1, 1) and self.stride == (1, 1, 1) and self.padding == (0, 0, 0)

    @property
    def taps(self) -> int:
        return self.kernel[0] * self.kernel[1] * self.kernel[2]

    @property
    def weight_shape(self) -> tuple[int, ...]:
        if self.transposed:
            return (self.in_channels, self.out_channels // self.groups, *self.kernel)
        return (self.out_channels, self.in_channels // self.groups, *self.kernel)

    @property
    def effective_kernel(self) -> Triple:
        return tuple(d * (k - 1) + 1 for k, d in zip(self.kernel, self.dilation))  # type: ignore[return-value]

    def output_spatial(self, spatial: Sequence[int]) -> Triple:
        if len(spatial) != 3:
            raise ShapeError(f"expected 3 spatial extents, got {tuple(spatial)}")
        out = []
        for axis, (n, k, s, d, p) in enumerate(
            zip(spatial, self.kernel, self.stride, self.dilation, self.padding)
        ):
            if self.transposed:
                o = (n - 1) * s - 2 * p + d * (k - 1) + 1
            else:
                o = (n + 2 * p - d * (k - 1) - 1) // s + 1
            if o < 1:
                raise InvalidSpecError(
                    f"spec {self} yields empty output along axis {axis} for input extent {n}"
                )
            out.append(o)
        return tuple(out)  # type: ignore[return-value]

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "kernel": list(self.kernel),
            "stride": list(self.stride),
            "dilation": list(self.dilation),
            "padding": list(self.padding),
            "groups": self.groups,
            "has_bias": self.has_bias,
            "transposed": self.transposed,
        }


# --------------------------------------------------------------------------
# tap geometry


def _axis_taps(n_in: int, n_out: int, k: int, s: int, d: int, p: int):
    """Valid (tap, out_lo, out_hi, in_lo) ranges along one axis.

    Output index o reads input index o*s + t*d - p; only in-bounds reads are kept.
    """
    taps = []
    for t in range(k):
        off = t * d - p
        lo = (-off + s - 1) // s if off < 0 else 0
        last = n_in - 1 - off
        hi = min(n_out, last // s + 1) if last >= 0 else 0
        if lo < hi:
            taps.append((t, lo, hi, lo * s + off))
    return taps


def _tap_slices(spec: ConvSpec, conv_in: Triple, conv_out: Triple):
    """Yield (tap triple, out slices, in slices) for every tap hitting real data.

    ``conv_in``/``conv_out`` are the spatial extents of the *forward* convolution
    (for a transposed spec the roles are already swapped by the caller).
    """
    per_axis = [
        _axis_taps(conv_in[a], conv_out[a], spec.kernel[a], spec.stride[a],
                   spec.dilation[a], spec.padding[a])
        for a in range(3)
    ]
    for td, ld, hd, id_ in per_axis[0]:
        for th, lh, hh, ih in per_axis[1]:
            for tw, lw, hw, iw in per_axis[2]:
                sd, sh, sw = spec.stride
                out_sl = (slice(ld, hd), slice(lh, hh), slice(lw, hw))
                in_sl = (
                    slice(id_, id_ + sd * (hd - ld - 1) + 1, sd),
                    slice(ih, ih + sh * (hh - lh - 1) + 1, sh),
                    slice(iw, iw + sw * (hw - lw - 1) + 1, sw),
                )
                yield (td, th, tw), out_sl, in_sl


def _forward_geometry(spec: ConvSpec):
    """Channel counts of the forward (gather-direction) convolution."""
    if spec.transposed:
        return spec.out_channels, spec.in_channels
    return spec.in_channels, spec.out_channels


# --------------------------------------------------------------------------
# kernels. ``w`` always has the forward-conv layout
# [c_out_fwd, c_in_fwd / groups, kd, kh, kw]; a transposed weight
# [in_T, out_T / groups, k...] is exactly that layout with in_T = c_out_fwd.


def gather(x: np.ndarray, w: np.ndarray, spec: ConvSpec, out_spatial: Triple) -> np.ndarray:
    """Forward convolution without bias: y[n, o, p] = sum_{i,t} w[o, i, t] x[n, i, p*s + t*d - pad]."""
    n = x.shape[0]
    c_in, c_out = _forward_geometry(spec)
    g = spec.groups
    in_spatial = x.shape[2:]
    if spec.pointwise:
        xg = x.reshape(n, g, c_in // g, -1)
        wg = w.reshape(g, c_out // g, c_in // g)
        y = np.matmul(wg[None], xg)
        return y.reshape(n, c_out, *out_spatial)

    y = np.zeros((n, c_out, *out_spatial), dtype=x.dtype)
    if spec.depthwise:
        for (td, th, tw), osl, isl in _tap_slices(spec, in_spatial, out_spatial):
            wt = w[:, 0, td, th, tw].reshape(1, -1, 1, 1, 1)
            y[(slice(None), slice(None), *osl)] += wt * x[(slice(None), slice(None), *isl)]
        return y

    cols = im2col(x, spec, out_spatial)  # [n, g, cin_g * K, P]
    wg = w.reshape(g, c_out // g, -1)
    y = np.matmul(wg[None], cols)
    return y.reshape(n, c_out, *out_spatial)


def im2col(x: np.ndarray, spec: ConvSpec, out_spatial: Triple) -> np.ndarray:
    n = x.shape[0]
    c_in, _ = _forward_geometry(spec)
    g = spec.groups
    kd, kh, kw = spec.kernel
    cols = np.zeros((n, c_in, kd, kh, kw, *out_spatial), dtype=x.dtype)
    for (td, th, tw), osl, isl in _tap_slices(spec, x.shape[2:], out_spatial):
        cols[(slice(None), slice(None), td, th, tw, *osl)] = x[(slice(None), slice(None), *isl)]
    p = out_spatial[0] * out_spatial[1] * out_spatial[2]
    return cols.reshape(n, g, (c_in // g) * kd * kh * kw, p)


def scatter(dy: np.ndarray, w: np.ndarray, spec: ConvSpec, in_spatial: Triple) -> np.ndarray:
    """Adjoint of :func:`gather` with respect to its input."""
    n = dy.shape[0]
    c_in, c_out = _forward_geometry(spec)
    g = spec.groups
    out_spatial = dy.shape[2:]
    if spec.pointwise:
        dyg = dy.reshape(n, g, c_out // g, -1)
        wg = w.reshape(g, c_out // g, c_in // g)
        dx = np.matmul(np.swapaxes(wg, 1, 2)[None], dyg)
        return dx.reshape(n, c_in, *in_spatial)

    dx = np.zeros((n, c_in, *in_spatial), dtype=dy.dtype)
    if spec.depthwise:
        for (td, th, tw), osl, isl in _tap_slices(spec, in_spatial, out_spatial):
            wt = w[:, 0, td, th, tw].reshape(1, -1, 1, 1, 1)
            dx[(slice(None), slice(None), *isl)] += wt * dy[(slice(None), slice(None), *osl)]
        return dx

    kd, kh, kw = spec.kernel
    dyg = dy.reshape(n, g, c_out // g, -1)
    wg = w.reshape(g, c_out // g, -1)
    dcols = np.matmul(np.swapaxes(wg, 1, 2)[None], dyg)
    dcols = dcols.reshape(n, c_in, kd, kh, kw, *out_spatial)
    for (td, th, tw), osl, isl in _tap_slices(spec, in_spatial, out_spatial):
        dx[(slice(None), slice(None), *isl)] += dcols[(slice(None), slice(None), td, th, tw, *osl)]
    return dx


def weight_grad(x: np.ndarray, dy: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Adjoint of :func:`gather` with respect to its weights (forward-conv layout)."""
    n = x.shape[0]
    c_in, c_out = _forward_geometry(spec)
    g = spec.groups
    out_spatial = dy.shape[2:]
    kd, kh, kw = spec.kernel
    if spec.pointwise:
        xg = x.reshape(n, g, c_in // g, -1)
        dyg = dy.reshape(n, g, c_out // g, -1)
        dw = np.matmul(dyg, np.swapaxes(xg, 2, 3)).sum(axis=0)
        return dw.reshape(c_out, c_in // g, 1, 1, 1)

    if spec.depthwise:
        dw = np.zeros((c_out, 1, kd, kh, kw), dtype=dy.dtype)
        for (td, th, tw), osl, isl in _tap_slices(spec, x.shape[2:], out_spatial):
            prod = dy[(slice(None), slice(None), *osl)] * x[(slice(None), slice(None), *isl)]
            dw[:, 0, td, th, tw] = prod.sum(axis=(0, 2, 3, 4))
        return dw

    cols = im2col(x, spec, out_spatial)
    dyg = dy.reshape(n, g, c_out // g, -1)
    dw = np.matmul(dyg, np.swapaxes(cols, 2, 3)).sum(axis=0)
    return dw.reshape(c_out, c_in // g, kd, kh, kw)
