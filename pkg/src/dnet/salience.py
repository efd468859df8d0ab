"""Full-resolution Salience layer and its Channel Mixer body."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

from .core import ShapeError, Tensor, add, dropout, gelu
from .dlk_blocks import DLKWeights, dlk_forward
from .fusion import DFFWeights, dff_forward
from .nn import BatchNorm, Conv, ConvBNAct, Init, ParamTree, depthwise, pointwise

SalienceBody = Literal["mixer", "convblock", "dlk"]
SALIENCE_BODIES = ("mixer", "convblock", "dlk", "none")


@dataclass
class ChannelMixerWeights(ParamTree):
    bn: BatchNorm
    expand: Conv
    dw3: Conv
    contract: Conv
    dropout_rates: tuple[float, float] = (0.0, 0.0)
    path_key = "mixer"

    @property
    def expansion(self) -> int:
        return self.expand.spec.out_channels // self.expand.spec.in_channels

    @classmethod
    def init(cls, channels: int, init: Init, expansion: int = 4,
             dropout_rates: tuple[float, float] = (0.0, 0.0)) -> "ChannelMixerWeights":
        if expansion < 1:
            raise ValueError(f"expansion must be positive, got {expansion}")
        hidden = expansion * channels
        return cls(init.batch_norm(channels), init.conv(pointwise(channels, hidden)),
                   init.conv(depthwise(hidden, 3)), init.conv(pointwise(hidden, channels)),
                   tuple(dropout_rates))


def channel_mixer_forward(x: Tensor, w: ChannelMixerWeights, mode: str = "eval", seed: int = 0) -> Tensor:
    h = w.expand(w.bn(x, mode))
    h = dropout(gelu(w.dw3(h)), w.dropout_rates[0], mode, seed)
    h = dropout(w.contract(h), w.dropout_rates[1], mode, seed + 1)
    return add(h, x)


@dataclass
class ConvBlockBody(ParamTree):
    conv1: ConvBNAct
    conv2: ConvBNAct
    path_key = "convblock"

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        return self.conv2(self.conv1(x, mode), mode)


@dataclass
class DLKBody(ParamTree):
    dlk1: DLKWeights
    dlk2: DLKWeights
    path_key = "dlk"

    def __call__(self, x: Tensor, combine_mode) -> Tensor:
        return dlk_forward(dlk_forward(x, self.dlk1, combine_mode), self.dlk2, combine_mode)


@dataclass
class SalienceWeights(ParamTree):
    projection: ConvBNAct
    body: ChannelMixerWeights | ConvBlockBody | DLKBody
    dff: DFFWeights
    refine1: ConvBNAct
    refine2: ConvBNAct
    head: Conv

    @classmethod
    def init(cls, in_channels: int, channels: int, num_classes: int, init: Init,
             body: SalienceBody = "mixer", expansion: int = 4,
             dropout_rates: tuple[float, float] = (0.0, 0.0)) -> "SalienceWeights":
        projection = init.conv_bn_act(in_channels, channels)
        if body == "mixer":
            b = ChannelMixerWeights.init(channels, init, expansion, dropout_rates)
        elif body == "convblock":
            b = ConvBlockBody(init.conv_bn_act(channels, channels), init.conv_bn_act(channels, channels))
        elif body == "dlk":
            b = DLKBody(DLKWeights.init(channels, init), DLKWeights.init(channels, init))
        else:
            raise ValueError(f"unknown salience body {body!r}")
        return cls(
            projection=projection,
            body=b,
            dff=DFFWeights.init(channels, init),
            refine1=init.conv_bn_act(channels, channels),
            refine2=init.conv_bn_act(channels, channels),
            head=init.conv(pointwise(channels, num_classes)),
        )


def salience_forward(
    image: Tensor,
    decoder_out: Tensor,
    w: SalienceWeights,
    mode: str = "eval",
    seed: int = 0,
    combine_mode="split_calibrate",
) -> Tensor:
    """Low-level features from the raw image fused with the decoder output; returns logits."""
    if image.shape[0] != decoder_out.shape[0] or image.shape[2:] != decoder_out.shape[2:]:
        raise ShapeError(
            f"salience: image {image.shape} and decoder output {decoder_out.shape} differ in resolution"
        )
    x = w.projection(image, mode)
    if isinstance(w.body, ChannelMixerWeights):
        x = channel_mixer_forward(x, w.body, mode, seed)
    elif isinstance(w.body, ConvBlockBody):
        x = w.body(x, mode)
    else:
        x = w.body(x, combine_mode)
    x = dff_forward(x, decoder_out, w.dff)
    x = w.refine2(w.refine1(x, mode), mode)
    return w.head(x)
