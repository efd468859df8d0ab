"""Dynamic Large Kernel and the blocks built around it.

A DLK projects C channels down to C/2, runs a 5^3 depthwise conv and then a
7^3 depthwise conv with dilation 3 on top of it, and lets two sigmoid gates
pick between the two scales: a spatial gate computed from channel-wise
mean/max statistics, and a channel gate from global average pooling.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

from .analysis import compute_erf
from .core import (
    ConvSpec,
    Tensor,
    add,
    channel_stats_pool,
    concat_channels,
    gelu,
    global_avg_pool,
    mul,
    sigmoid,
    slice_channels,
)
from .nn import Conv, Init, LayerNorm, ParamTree, depthwise, pointwise

CombineMode = Literal["split_calibrate", "literal_sum"]
COMBINE_MODES = ("split_calibrate", "literal_sum")

SMALL_KERNEL = (5, 1)
LARGE_KERNEL = (7, 3)
GATE_KERNEL = 7


@dataclass
class DLKWeights(ParamTree):
    project: Conv
    dw5: Conv
    dw7: Conv
    spatial_gate: Conv
    channel_gate: Conv

    @classmethod
    def init(cls, channels: int, init: Init) -> "DLKWeights":
        if channels % 2:
            raise ValueError(f"DLK needs an even channel count, got {channels}")
        half = channels // 2
        return cls(
            project=init.conv(pointwise(channels, half)),
            dw5=init.conv(depthwise(half, *SMALL_KERNEL)),
            dw7=init.conv(depthwise(half, *LARGE_KERNEL)),
            spatial_gate=init.conv(ConvSpec(2, 2, kernel=GATE_KERNEL)),
            channel_gate=init.conv(pointwise(channels, channels)),
        )


def dlk_forward(
    x: Tensor,
    w: DLKWeights,
    combine_mode: CombineMode = "split_calibrate",
    trace: dict | None = None,
) -> Tensor:
    """Multi-scale large-kernel features, gated spatially and per channel, plus x.

    ``split_calibrate`` scales the 5^3 branch by the first spatial gate and the
    dilated branch by the second; ``literal_sum`` applies both gates to the
    concatenated features and sums.  Gates are stored in ``trace`` if given.
    """
    c = x.shape[1]
    if c % 2:
        raise ValueError(f"DLK needs an even channel count, got {c}")
    half = c // 2
    proj = w.project(x)
    x1 = w.dw5(proj)
    x2 = w.dw7(x1)
    assert x1.shape[2:] == x.shape[2:] and x2.shape[2:] == x.shape[2:]
    x_sp = concat_channels(x1, x2)

    stats = concat_channels(channel_stats_pool(x_sp, "mean"), channel_stats_pool(x_sp, "max"))
    gates = sigmoid(w.spatial_gate(stats))
    w1 = slice_channels(gates, 0, 1)
    w2 = slice_channels(gates, 1, 2)
    if combine_mode == "split_calibrate":
        x_ch = concat_channels(mul(x1, w1), mul(x2, w2))
    elif combine_mode == "literal_sum":
        x_ch = add(mul(x_sp, w1), mul(x_sp, w2))
    else:
        raise ValueError(f"unknown combine mode {combine_mode!r}")

    w_ch = sigmoid(w.channel_gate(global_avg_pool(x_ch)))
    if trace is not None:
        trace.update(w1=w1, w2=w2, w_ch=w_ch, x1=x1, x2=x2, x_ch=x_ch)
    assert x_ch.shape[1] == 2 * half
    return add(mul(x_ch, w_ch), x)


def dlk_erf() -> int:
    """Receptive field of the 5^3 -> dilated 7^3 cascade."""
    return compute_erf([(SMALL_KERNEL[0], SMALL_KERNEL[1], 1), (LARGE_KERNEL[0], LARGE_KERNEL[1], 1)])


@dataclass
class DLKModuleWeights(ParamTree):
    pre_linear: Conv
    dlk: DLKWeights
    post_linear: Conv

    @classmethod
    def init(cls, channels: int, init: Init) -> "DLKModuleWeights":
        return cls(init.conv(pointwise(channels, channels)), DLKWeights.init(channels, init),
                   init.conv(pointwise(channels, channels)))


def dlk_module_forward(x: Tensor, w: DLKModuleWeights, combine_mode: CombineMode = "split_calibrate") -> Tensor:
    h = gelu(w.pre_linear(x))
    h = dlk_forward(h, w.dlk, combine_mode)
    return add(w.post_linear(h), x)


@dataclass
class MLPWeights(ParamTree):
    expand: Conv
    contract: Conv

    @property
    def ratio(self) -> int:
        return self.expand.spec.out_channels // self.expand.spec.in_channels

    @classmethod
    def init(cls, channels: int, ratio: int, init: Init) -> "MLPWeights":
        if ratio < 1:
            raise ValueError(f"MLP ratio must be positive, got {ratio}")
        hidden = ratio * channels
        return cls(init.conv(pointwise(channels, hidden)), init.conv(pointwise(hidden, channels)))


def mlp_forward(x: Tensor, w: MLPWeights) -> Tensor:
    return w.contract(gelu(w.expand(x)))


@dataclass
class DLKBlockWeights(ParamTree):
    ln1: LayerNorm
    dlk_module: DLKModuleWeights
    ln2: LayerNorm
    mlp: MLPWeights

    @classmethod
    def init(cls, channels: int, mlp_ratio: int, init: Init) -> "DLKBlockWeights":
        return cls(init.layer_norm(channels), DLKModuleWeights.init(channels, init),
                   init.layer_norm(channels), MLPWeights.init(channels, mlp_ratio, init))


def dlk_block_forward(x: Tensor, w: DLKBlockWeights, combine_mode: CombineMode = "split_calibrate") -> Tensor:
    """Pre-norm residual pair: DLK module, then MLP."""
    x = add(dlk_module_forward(w.ln1(x), w.dlk_module, combine_mode), x)
    return add(mlp_forward(w.ln2(x), w.mlp), x)
