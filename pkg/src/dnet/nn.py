"""Parameter containers: convolutions, norms, and dataclass trees of them.

Every weight container is a dataclass deriving from :class:`ParamTree`;
walking its fields yields dotted parameter paths such as
``encoder.stage1.block2.mlp.expand.weight``.
"""

from __future__ import annotations

import copy
import dataclasses
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .core import ConvSpec, Tensor, batch_norm, conv3d, layer_norm, leaky_relu, transposed_conv3d
from .core.ops import LEAKY_SLOPE

BUFFER_NAMES = frozenset({"running_mean", "running_var"})


class ParamTree:
    """Mixin for dataclasses whose fields hold tensors or nested trees."""

    def named_tensors(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            name = getattr(value, "path_key", None) or f.name
            yield from _walk(value, f"{prefix}{name}", f.metadata.get("item", "item"))

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for path, t in self.named_tensors(prefix):
            if path.rsplit(".", 1)[-1] not in BUFFER_NAMES:
                yield path, t

    def state(self) -> dict[str, Tensor]:
        return dict(self.named_tensors())

    def astype(self, dtype):
        """Deep copy with every tensor cast to ``dtype``."""
        clone = copy.deepcopy(self)
        for _, t in clone.named_tensors():
            if t.data is not None:
                t.data = t.data.astype(dtype)
            t.dtype = np.dtype(dtype)
        return clone

    def fill_(self, value: float = 0.0):
        for _, t in self.named_tensors():
            t.data = np.full(t.shape, value, dtype=t.dtype)
        return self


def _walk(value, path: str, item: str):
    if value is None:
        return
    if isinstance(value, Tensor):
        yield path, value
    elif isinstance(value, ParamTree):
        yield from value.named_tensors(path + ".")
    elif isinstance(value, (list, tuple)):
        for k, v in enumerate(value):
            if isinstance(v, (Tensor, ParamTree)):
                key = getattr(v, "path_key", None) or f"{item}{k + 1}"
                yield from _walk(v, f"{path}.{key}", item)


def items(name: str):
    """Field metadata naming list entries ``name1``, ``name2``, ..."""
    return dataclasses.field(metadata={"item": name})


# --------------------------------------------------------------------------
# leaf containers


@dataclass
class Conv(ParamTree):
    spec: ConvSpec
    weight: Tensor
    bias: Tensor | None = None

    def __call__(self, x: Tensor) -> Tensor:
        if self.spec.transposed:
            return transposed_conv3d(x, self.weight, self.bias, self.spec)
        return conv3d(x, self.weight, self.bias, self.spec)


@dataclass
class LayerNorm(ParamTree):
    weight: Tensor
    bias: Tensor

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.weight, self.bias)


@dataclass
class BatchNorm(ParamTree):
    weight: Tensor
    bias: Tensor
    running_mean: Tensor
    running_var: Tensor

    def __call__(self, x: Tensor, mode: str = "eval") -> Tensor:
        return batch_norm(x, self.weight, self.bias, self.running_mean, self.running_var,
                          training=(mode == "train"))


@dataclass
class ConvBNAct(ParamTree):
    """conv (no bias) -> batch norm -> leaky ReLU."""

    conv: Conv
    bn: BatchNorm

    def __call__(self, x: Tensor, mode: str = "eval") -> Tensor:
        return leaky_relu(self.bn(self.conv(x), mode), LEAKY_SLOPE)


# --------------------------------------------------------------------------
# initialization


class Init:
    """Seeded parameter factory.

    Conv weights are He-uniform over the fan-in, biases zero, norm scales one
    and shifts zero.  With ``meta=True`` only extents are produced.
    """

    def __init__(self, seed: int = 0, dtype=np.float32, meta: bool = False):
        self.rng = np.random.Generator(np.random.PCG64(seed))
        self.dtype = np.dtype(dtype)
        self.meta = meta

    def _tensor(self, shape, values=None) -> Tensor:
        if self.meta:
            return Tensor.meta(shape, self.dtype, requires_grad=True)
        return Tensor(values.astype(self.dtype), requires_grad=True)

    def _buffer(self, shape, fill: float) -> Tensor:
        if self.meta:
            return Tensor.meta(shape, self.dtype)
        return Tensor(np.full(shape, fill, dtype=self.dtype))

    def conv(self, spec: ConvSpec) -> Conv:
        shape = spec.weight_shape
        fan_in = shape[1] * spec.taps
        bound = np.sqrt(6.0 / fan_in)
        w = None if self.meta else self.rng.uniform(-bound, bound, size=shape)
        b = None
        if spec.has_bias:
            b = self._tensor((spec.out_channels,), None if self.meta else np.zeros(spec.out_channels))
        return Conv(spec, self._tensor(shape, w), b)

    def layer_norm(self, c: int) -> LayerNorm:
        return LayerNorm(self._tensor((c,), None if self.meta else np.ones(c)),
                         self._tensor((c,), None if self.meta else np.zeros(c)))

    def batch_norm(self, c: int) -> BatchNorm:
        return BatchNorm(self._tensor((c,), None if self.meta else np.ones(c)),
                         self._tensor((c,), None if self.meta else np.zeros(c)),
                         self._buffer((c,), 0.0), self._buffer((c,), 1.0))

    def conv_bn_act(self, cin: int, cout: int, kernel: int = 3) -> ConvBNAct:
        return ConvBNAct(self.conv(ConvSpec(cin, cout, kernel=kernel, has_bias=False)),
                         self.batch_norm(cout))


def pointwise(cin: int, cout: int, bias: bool = True) -> ConvSpec:
    return ConvSpec(cin, cout, kernel=1, has_bias=bias)


def depthwise(c: int, kernel: int, dilation: int = 1) -> ConvSpec:
    return ConvSpec(c, c, kernel=kernel, dilation=dilation, groups=c)
