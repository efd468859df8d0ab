"""D-Net, DLK-Net and DLK-NETR assembled from the block modules.

Parameter paths (dot separated, 1-based indices)::

    stem.conv.weight, stem.bn.{weight,bias,running_mean,running_var}
    encoder.stage{i}.block{j}.{ln1,ln2}.{weight,bias}
    encoder.stage{i}.block{j}.dlk_module.{pre_linear,post_linear}.{weight,bias}
    encoder.stage{i}.block{j}.dlk_module.dlk.{project,dw5,dw7,spatial_gate,channel_gate}.{weight,bias}
    encoder.stage{i}.block{j}.mlp.{expand,contract}.{weight,bias}
    encoder.stage{i}.downsample.{weight,bias}
    bottleneck.block{j}.*
    decoder.stage{i}.upsample.*                       (i counts down from num_stages)
    decoder.stage{i}.dff.{channel_gate,reduce,spatial_gate_a,spatial_gate_b}.*
    decoder.stage{i}.block{j}.*
    decoder_stem.{weight,bias}
    salience.{projection,mixer|convblock|dlk,dff,refine1,refine2,head}.*   (D-Net)
    head.{weight,bias}                                                    (DLK-Net, DLK-NETR)

DLK-NETR replaces the DFF decoder with ``decoder.stage{i}.{skip,upsample,merge}``
plus ``image_block`` and ``final_merge`` at full resolution.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np

from .core import ConvSpec, ShapeError, Tensor, add, concat_channels, leaky_relu
from .dlk_blocks import COMBINE_MODES, DLKBlockWeights, dlk_block_forward
from .fusion import DFFWeights, dff_forward
from .nn import BatchNorm, Conv, ConvBNAct, Init, ParamTree, items, pointwise
from .salience import SALIENCE_BODIES, SalienceWeights, salience_forward

Variant = Literal["dnet", "dlknet", "dlknetr"]
VARIANTS = ("dnet", "dlknet", "dlknetr")


class ConfigError(ValueError):
    pass


class DivisibilityError(ShapeError):
    pass


@dataclass
class ModelConfig:
    variant: Variant = "dnet"
    base_width: int = 48
    in_channels: int = 1
    num_classes: int = 16
    num_stages: int = 4
    blocks_per_stage: int = 2
    mlp_ratio: int = 4
    combine_mode: str = "split_calibrate"
    salience_body: str = "mixer"
    dropout_rates: tuple[float, float] = (0.0, 0.0)
    mixer_expansion: int = 4
    init_seed: int = 0

    def __post_init__(self):
        self.dropout_rates = tuple(float(r) for r in self.dropout_rates)
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.base_width < 2 or self.base_width % 2:
            raise ConfigError(f"base_width must be a positive even integer, got {self.base_width}")
        for name in ("in_channels", "num_classes", "num_stages", "blocks_per_stage",
                     "mlp_ratio", "mixer_expansion"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.combine_mode not in COMBINE_MODES:
            raise ConfigError(f"combine_mode must be one of {COMBINE_MODES}")
        if self.salience_body not in SALIENCE_BODIES:
            raise ConfigError(f"salience_body must be one of {SALIENCE_BODIES}")
        if len(self.dropout_rates) != 2 or not all(0 <= r < 1 for r in self.dropout_rates):
            raise ConfigError(f"dropout_rates must be two probabilities in [0, 1): {self.dropout_rates}")
        if self.variant != "dnet":
            self.salience_body = "none"

    @property
    def input_multiple(self) -> int:
        return 2 ** (self.num_stages + 1)

    def stage_channels(self, i: int) -> int:
        """Channels carried by the DLK blocks of encoder stage ``i`` (1-based)."""
        return self.base_width * 2 ** (i - 1)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["dropout_rates"] = list(self.dropout_rates)
        return d

    def to_json(self, path: str | Path | None = None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            Path(path).write_text(text + "\n")
        return text

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path: str | Path) -> "ModelConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


# --------------------------------------------------------------------------
# weight containers


@dataclass
class Stem(ParamTree):
    conv: Conv
    bn: BatchNorm

    def __call__(self, x, mode):
        return leaky_relu(self.bn(self.conv(x), mode))


@dataclass
class EncoderStage(ParamTree):
    blocks: list[DLKBlockWeights] = items("block")
    downsample: Conv = None


@dataclass
class DecoderStage(ParamTree):
    level: int
    upsample: Conv
    dff: DFFWeights
    blocks: list[DLKBlockWeights] = items("block")

    @property
    def path_key(self):
        return f"stage{self.level}"


@dataclass
class ResConvBlock(ParamTree):
    """x + lrelu(bn(conv3(x)))."""

    body: ConvBNAct

    def __call__(self, x, mode):
        return add(self.body(x, mode), x)


@dataclass
class NetrDecoderStage(ParamTree):
    level: int
    skip: ResConvBlock
    upsample: Conv
    merge: ConvBNAct

    @property
    def path_key(self):
        return f"stage{self.level}"


@dataclass
class Model(ParamTree):
    config: ModelConfig
    stem: Stem
    encoder: list[EncoderStage] = items("stage")
    bottleneck: list[DLKBlockWeights] = items("block")
    decoder: list = items("stage")
    decoder_stem: Conv = None
    image_block: ConvBNAct | None = None
    final_merge: ConvBNAct | None = None
    salience: SalienceWeights | None = None
    head: Conv | None = None

    def __post_init__(self):
        for path, t in self.named_tensors():
            t.name = path


def _blocks(c: int, n: int, cfg: ModelConfig, init: Init) -> list[DLKBlockWeights]:
    return [DLKBlockWeights.init(c, cfg.mlp_ratio, init) for _ in range(n)]


def _up(cin: int, cout: int) -> ConvSpec:
    return ConvSpec(cin, cout, kernel=2, stride=2, padding=0, transposed=True)


def build_model(config: ModelConfig, seed: int | None = None, dtype=np.float32, meta: bool = False) -> Model:
    """Instantiate every parameter of ``config`` with seeded initialization.

    ``meta=True`` builds extents only (no memory), enough for complexity accounting.
    """
    cfg = config
    init = Init(cfg.init_seed if seed is None else seed, dtype=dtype, meta=meta)
    C, S, B = cfg.base_width, cfg.num_stages, cfg.blocks_per_stage

    stem = Stem(init.conv(ConvSpec(cfg.in_channels, C, kernel=7, stride=2, has_bias=False)),
                init.batch_norm(C))
    encoder = []
    for i in range(1, S + 1):
        c = cfg.stage_channels(i)
        encoder.append(EncoderStage(_blocks(c, B, cfg, init),
                                    init.conv(ConvSpec(c, 2 * c, kernel=3, stride=2))))
    bottleneck = _blocks(C * 2 ** S, B, cfg, init)

    kwargs = {}
    if cfg.variant in ("dnet", "dlknet"):
        decoder = [
            DecoderStage(i, init.conv(_up(2 * cfg.stage_channels(i), cfg.stage_channels(i))),
                         DFFWeights.init(cfg.stage_channels(i), init),
                         _blocks(cfg.stage_channels(i), B, cfg, init))
            for i in range(S, 0, -1)
        ]
        decoder_stem = init.conv(_up(C, C))
        if cfg.salience_body != "none":
            kwargs["salience"] = SalienceWeights.init(
                cfg.in_channels, C, cfg.num_classes, init, cfg.salience_body,
                cfg.mixer_expansion, cfg.dropout_rates)
        else:
            kwargs["head"] = init.conv(pointwise(C, cfg.num_classes))
    else:
        decoder = []
        for i in range(S, 0, -1):
            c = cfg.stage_channels(i)
            decoder.append(NetrDecoderStage(i, ResConvBlock(init.conv_bn_act(c, c)),
                                            init.conv(_up(2 * c, c)), init.conv_bn_act(2 * c, c)))
        decoder_stem = init.conv(_up(C, C))
        kwargs["image_block"] = init.conv_bn_act(cfg.in_channels, C)
        kwargs["final_merge"] = init.conv_bn_act(2 * C, C)
        kwargs["head"] = init.conv(pointwise(C, cfg.num_classes))

    return Model(cfg, stem, encoder, bottleneck, decoder, decoder_stem, **kwargs)


# --------------------------------------------------------------------------
# forward


def check_input(model: Model, x: Tensor) -> None:
    cfg = model.config
    if x.ndim != 5 or x.shape[1] != cfg.in_channels:
        raise ShapeError(f"expected input [N, {cfg.in_channels}, D, H, W], got {x.shape}")
    m = cfg.input_multiple
    bad = [n for n in x.shape[2:] if n % m]
    if bad:
        raise DivisibilityError(
            f"every spatial extent must be a multiple of {m} (stem + {cfg.num_stages} downsamples); "
            f"got {x.shape[2:]}"
        )


def encode(model: Model, image: Tensor, mode: str = "eval", trace: dict | None = None):
    """Stem, encoder stages and bottleneck; returns (bottleneck features, skips)."""
    cfg = model.config
    cm = cfg.combine_mode
    x = model.stem(image, mode)
    skips = []
    for i, stage in enumerate(model.encoder, start=1):
        for blk in stage.blocks:
            x = dlk_block_forward(x, blk, cm)
        skips.append(x)
        x = stage.downsample(x)
        expect = (image.shape[0], cfg.base_width * 2 ** i, *(n // 2 ** (i + 1) for n in image.shape[2:]))
        assert x.shape == expect, f"encoder stage {i}: {x.shape} != {expect}"
        if trace is not None:
            trace[f"encoder.stage{i}"] = x.shape
    for blk in model.bottleneck:
        x = dlk_block_forward(x, blk, cm)
    if trace is not None:
        trace["bottleneck"] = x.shape
    return x, skips


def model_forward(model: Model, image: Tensor, mode: str = "eval", seed: int = 0,
                  trace: dict | None = None) -> Tensor:
    """Full-resolution logits [N, num_classes, D, H, W]."""
    check_input(model, image)
    cfg = model.config
    cm = cfg.combine_mode
    x, skips = encode(model, image, mode, trace)

    if cfg.variant == "dlknetr":
        for stage, skip in zip(model.decoder, reversed(skips)):
            up = stage.upsample(x)
            x = stage.merge(concat_channels(stage.skip(skip, mode), up), mode)
        up = model.decoder_stem(x)
        x = model.final_merge(concat_channels(model.image_block(image, mode), up), mode)
        return model.head(x)

    for stage, skip in zip(model.decoder, reversed(skips)):
        x = dff_forward(skip, stage.upsample(x), stage.dff)
        for blk in stage.blocks:
            x = dlk_block_forward(x, blk, cm)
        if trace is not None:
            trace[f"decoder.stage{stage.level}"] = x.shape
    x = model.decoder_stem(x)
    if trace is not None:
        trace["decoder_stem"] = x.shape
    if model.salience is not None:
        return salience_forward(image, x, model.salience, mode, seed, cm)
    return model.head(x)


# --------------------------------------------------------------------------
# weight store


def weight_store(model: Model) -> dict[str, np.ndarray]:
    return {path: t.numpy() for path, t in model.named_tensors()}


def load_weights(model: Model, store: dict[str, np.ndarray], force: bool = False) -> Model:
    """Copy ``store`` into ``model`` after checking paths and extents."""
    from .checkpoint import CheckpointError

    own = model.state()
    missing = [p for p in own if p not in store]
    extra = [p for p in store if p not in own]
    if missing or extra:
        raise CheckpointError(f"parameter paths differ: missing={missing} extra={extra}")
    mismatched = [p for p, t in own.items() if tuple(store[p].shape) != t.shape]
    if mismatched and not force:
        theirs = structure_hash((p, store[p].shape) for p in store)
        ours = structure_hash((p, t.shape) for p, t in own.items())
        first = mismatched[0]
        raise CheckpointError(
            f"structure hash mismatch (checkpoint {theirs}, model {ours}): "
            f"{len(mismatched)} tensors differ in extents, first {first} "
            f"{tuple(store[first].shape)} vs {own[first].shape}"
        )
    for p, t in own.items():
        if p not in mismatched:
            t.assign(store[p])
    return model


def structure_hash(entries) -> str:
    """Digest of ordered (path, extents) pairs; stands in for the config hash."""
    h = hashlib.sha256()
    for path, shape in entries:
        h.update(path.encode())
        h.update(np.asarray(shape, dtype="<u4").tobytes())
    return h.hexdigest()[:16]
