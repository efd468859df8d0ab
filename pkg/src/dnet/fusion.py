"""Dynamic Feature Fusion of two equally shaped feature maps."""

from __future__ import annotations

from dataclasses import dataclass

from .core import ShapeError, Tensor, add, concat_channels, global_avg_pool, mul, sigmoid
from .nn import Conv, Init, ParamTree, pointwise


@dataclass
class DFFWeights(ParamTree):
    channel_gate: Conv  # 2C -> 2C
    reduce: Conv  # 2C -> C
    spatial_gate_a: Conv  # C -> 1, reads f1
    spatial_gate_b: Conv  # C -> 1, reads f2

    @classmethod
    def init(cls, channels: int, init: Init) -> "DFFWeights":
        c2 = 2 * channels
        return cls(
            channel_gate=init.conv(pointwise(c2, c2)),
            reduce=init.conv(pointwise(c2, channels)),
            spatial_gate_a=init.conv(pointwise(channels, 1)),
            spatial_gate_b=init.conv(pointwise(channels, 1)),
        )


def dff_forward(f1: Tensor, f2: Tensor, w: DFFWeights, trace: dict | None = None) -> Tensor:
    """Fuse ``f1`` and ``f2`` back down to C channels.

    The concatenation is reweighted by a global channel gate before the 2C->C
    reduction, and the result is scaled by a single-channel spatial saliency map.
    In the decoder ``f1`` is the skip (encoder) map and ``f2`` the upsampled one.
    """
    if f1.shape != f2.shape:
        raise ShapeError(f"dff: inputs differ, {f1.shape} vs {f2.shape}")
    f = concat_channels(f1, f2)
    w_ch = sigmoid(w.channel_gate(global_avg_pool(f)))
    f_ch = w.reduce(mul(f, w_ch))
    w_sp = sigmoid(add(w.spatial_gate_a(f1), w.spatial_gate_b(f2)))
    if trace is not None:
        trace.update(w_ch=w_ch, w_sp=w_sp, f_ch=f_ch)
    out = mul(f_ch, w_sp)
    assert out.shape == f1.shape
    return out
