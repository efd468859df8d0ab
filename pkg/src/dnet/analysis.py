"""Analytical complexity accounting: receptive field, parameters, FLOPs."""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

# published complexity figures at 96^3 (Params in M, FLOPs in G)
REFERENCE_PARAMS_M = {"dnet": 39.28, "dlknet": 39.12, "dlknetr": 45.89}
REFERENCE_FLOPS_G_96 = {"dnet": 200.13, "dlknet": 62.37, "dlknetr": 336.75}
# D-Net at 96x160x160, and the salience-body ablation at the same size
REFERENCE_FLOPS_G_96x160x160 = {"dnet": 555.91}
REFERENCE_SALIENCE_PARAMS_M = {"none": 39.12, "convblock": 39.32, "dlk": 39.28, "mixer": 39.28}


def _as_triple(v) -> tuple[int, int, int]:
    if isinstance(v, (int, np.integer)):
        return (int(v),) * 3
    t = tuple(int(a) for a in v)
    if len(t) != 3:
        raise ValueError(f"expected a scalar or 3 values, got {v!r}")
    return t  # type: ignore[return-value]


def compute_erf(layers: Sequence[tuple]) -> int | tuple[int, int, int]:
    """Receptive field of a conv cascade given (kernel, dilation, stride) per layer.

    R_i = R_{i-1} + (k_eff_i - 1) * j_i with k_eff = d*(k-1)+1, j_i the product
    of strides before layer i, and R_0 = 1.  Scalar layer specs give an int;
    if any entry is per-axis the result is a (D, H, W) tuple.
    """
    if not layers:
        raise ValueError("compute_erf needs at least one layer")
    per_axis = any(not isinstance(v, (int, np.integer)) for layer in layers for v in layer)
    erf = [1, 1, 1]
    jump = [1, 1, 1]
    for kernel, dilation, stride in layers:
        k, d, s = _as_triple(kernel), _as_triple(dilation), _as_triple(stride)
        for a in range(3):
            erf[a] += d[a] * (k[a] - 1) * jump[a]
            jump[a] *= s[a]
    return tuple(erf) if per_axis else erf[0]


# --------------------------------------------------------------------------
# parameters


@dataclass
class ParamCount:
    total: int
    trainable: int
    per_path: dict[str, int]

    def group(self, depth: int = 1) -> dict[str, int]:
        """Sum counts by the first ``depth`` path components."""
        out: dict[str, int] = OrderedDict()
        for path, n in self.per_path.items():
            key = ".".join(path.split(".")[:depth])
            out[key] = out.get(key, 0) + n
        return out


def count_params(model) -> ParamCount:
    """Exact element counts; ``total`` includes batch-norm running statistics."""
    per_path = OrderedDict((p, t.size) for p, t in model.named_tensors())
    trainable = sum(t.size for _, t in model.named_parameters())
    return ParamCount(sum(per_path.values()), trainable, per_path)


def param_breakdown(model) -> "OrderedDict[str, int]":
    """Trainable parameters split by architectural component."""
    from .nn import BUFFER_NAMES

    buckets: "OrderedDict[str, int]" = OrderedDict(
        (k, 0) for k in ("stem", "dlk_blocks.mlp", "dlk_blocks.dlk_module", "dlk_blocks.norms",
                         "downsample", "upsample", "dff", "netr_decoder", "salience", "head",
                         "bias_total")
    )
    for path, t in model.named_tensors():
        parts = path.split(".")
        if parts[-1] in BUFFER_NAMES:
            continue
        n = t.size
        if parts[-1] == "bias" and ".ln" not in path and ".bn" not in path:
            buckets["bias_total"] += n
        if parts[0] == "stem":
            key = "stem"
        elif parts[0] == "salience":
            key = "salience"
        elif parts[0] in ("head",):
            key = "head"
        elif ".mlp." in path:
            key = "dlk_blocks.mlp"
        elif ".dlk_module." in path:
            key = "dlk_blocks.dlk_module"
        elif ".ln1." in path or ".ln2." in path:
            key = "dlk_blocks.norms"
        elif "downsample" in parts:
            key = "downsample"
        elif ".dff." in path:
            key = "dff"
        elif "upsample" in parts or parts[0] == "decoder_stem":
            key = "upsample"
        else:
            key = "netr_decoder"
        buckets[key] += n
    return buckets


# --------------------------------------------------------------------------
# FLOPs


@dataclass
class LayerCost:
    path: str
    op: str
    param_count: int
    macs: int
    flops_x1: int
    flops_x2: int
    output_shape: tuple[int, ...]


@dataclass
class FlopReport:
    input_extents: tuple[int, ...]
    layers: list[LayerCost] = field(default_factory=list)
    conv_macs: int = 0
    other_ops: int = 0
    params: int = 0
    notes: list[str] = field(default_factory=list)

    @property
    def total_macs(self) -> int:
        return sum(l.macs for l in self.layers)

    @property
    def flops_x1(self) -> int:
        return sum(l.flops_x1 for l in self.layers)

    @property
    def flops_x2(self) -> int:
        return sum(l.flops_x2 for l in self.layers)

    def to_dict(self) -> dict:
        return {
            "input_extents": list(self.input_extents),
            "params": self.params,
            "conv_macs": self.conv_macs,
            "other_ops": self.other_ops,
            "flops_x1": self.flops_x1,
            "flops_x2": self.flops_x2,
            "notes": self.notes,
            "layers": [dict(asdict(l), output_shape=list(l.output_shape)) for l in self.layers],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


_CONV_OPS = ("conv3d", "transposed_conv3d")


def count_flops(model, input_extents: Sequence[int]) -> FlopReport:
    """Per-layer MACs from a shape-only forward pass.

    Convolutions: out_voxels * out_ch * in_ch/groups * k^3 MACs.  Transposed
    convs use the same formula, i.e. the equivalent forward conv over the
    zero-dilated input, so inserted zeros are counted.
    Norms, activations, pooling and elementwise ops count one op per output
    element and are not doubled under the x2 convention.
    """
    from .core import Tensor, cost_log
    from .models import build_model, check_input, model_forward

    extents = tuple(int(v) for v in input_extents)
    if len(extents) == 3:
        extents = (1, model.config.in_channels, *extents)
    meta_model = build_model(model.config, meta=True)
    x = Tensor.meta(extents)
    check_input(meta_model, x)
    with cost_log() as log:
        model_forward(meta_model, x, mode="eval")

    sizes = {p: t.size for p, t in meta_model.named_tensors()}
    report = FlopReport(extents, params=count_params(meta_model).trainable)
    anonymous: "OrderedDict[str, list[int]]" = OrderedDict()
    for rec in log.records:
        if rec.op in _CONV_OPS:
            base = rec.name.rsplit(".", 1)[0]
            pc = sizes.get(f"{base}.weight", 0) + sizes.get(f"{base}.bias", 0)
            report.layers.append(LayerCost(base, rec.op, pc, rec.macs, rec.macs, 2 * rec.macs,
                                           rec.output_shape))
            report.conv_macs += rec.macs
        elif rec.name != rec.op:
            base = rec.name.rsplit(".", 1)[0]
            pc = sizes.get(f"{base}.weight", 0) + sizes.get(f"{base}.bias", 0)
            report.layers.append(LayerCost(base, rec.op, pc, rec.elements, rec.elements,
                                           rec.elements, rec.output_shape))
            report.other_ops += rec.elements
        else:
            acc = anonymous.setdefault(rec.op, [0, 0])
            acc[0] += rec.elements
            acc[1] += 1
            report.other_ops += rec.elements
    for op, (elements, calls) in anonymous.items():
        report.layers.append(LayerCost(f"<{op} x{calls}>", op, 0, elements, elements, elements, ()))
    report.notes = [
        "conv MACs = out_voxels*out_ch*(in_ch/groups)*k^3, transposed convs included",
        "non-conv ops count 1 op per output element in every convention",
        "flops_x1 counts a MAC as one FLOP, flops_x2 as two",
    ]
    return report


def flop_ratio(model, extents_a, extents_b) -> float:
    return count_flops(model, extents_a).flops_x1 / count_flops(model, extents_b).flops_x1


def closest_convention(report: FlopReport, target_g: float) -> tuple[str, float]:
    """Pick the MAC convention whose total lands nearer a published GFLOP figure."""
    x1, x2 = report.flops_x1 / 1e9, report.flops_x2 / 1e9
    return ("x1", x1) if abs(x1 - target_g) <= abs(x2 - target_g) else ("x2", x2)


# --------------------------------------------------------------------------
# reports


def summarize(model, input_dims: Sequence[int] = (96, 96, 96)) -> dict:
    from .dlk_blocks import dlk_erf

    pc = count_params(model)
    report = count_flops(model, input_dims)
    cfg = model.config
    target_p = REFERENCE_PARAMS_M.get(cfg.variant)
    out = {
        "config": cfg.to_dict(),
        "params_total": pc.total,
        "params_trainable": pc.trainable,
        "params_by_component": dict(param_breakdown(model)),
        "params_by_top_level": pc.group(1),
        "input_extents": list(report.input_extents),
        "conv_macs": report.conv_macs,
        "other_ops": report.other_ops,
        "flops_x1": report.flops_x1,
        "flops_x2": report.flops_x2,
        "dlk_erf": dlk_erf(),
    }
    if target_p is not None and _is_reference_config(cfg):
        out["reference_params_M"] = target_p
        out["params_rel_diff"] = pc.trainable / 1e6 / target_p - 1
        if tuple(input_dims) == (96, 96, 96):
            conv, val = closest_convention(report, REFERENCE_FLOPS_G_96[cfg.variant])
            out["reference_flops_G"] = REFERENCE_FLOPS_G_96[cfg.variant]
            out["flops_convention"] = conv
            out["flops_rel_diff"] = val / REFERENCE_FLOPS_G_96[cfg.variant] - 1
    return out


def _is_reference_config(cfg) -> bool:
    return (cfg.base_width, cfg.num_stages, cfg.blocks_per_stage, cfg.mlp_ratio,
            cfg.in_channels, cfg.num_classes) == (48, 4, 2, 4, 1, 16)


def format_summary(summary: dict) -> str:
    rows = [
        ("variant", summary["config"]["variant"]),
        ("params (trainable)", f"{summary['params_trainable']:,}"),
        ("params (stored)", f"{summary['params_total']:,}"),
    ]
    for k, v in summary["params_by_component"].items():
        rows.append((f"  {k}", f"{v:,}"))
    rows += [
        ("input extents", "x".join(map(str, summary["input_extents"]))),
        ("conv MACs", f"{summary['conv_macs']:,}"),
        ("other ops", f"{summary['other_ops']:,}"),
        ("FLOPs (MAC=1)", f"{summary['flops_x1'] / 1e9:.2f} G"),
        ("FLOPs (MAC=2)", f"{summary['flops_x2'] / 1e9:.2f} G"),
        ("DLK ERF", str(summary["dlk_erf"])),
    ]
    if "reference_params_M" in summary:
        rows.append(("reference params", f"{summary['reference_params_M']} M ({summary['params_rel_diff']:+.2%})"))
    if "reference_flops_G" in summary:
        rows.append(("reference FLOPs", f"{summary['reference_flops_G']} G "
                                    f"({summary['flops_convention']}, {summary['flops_rel_diff']:+.2%})"))
    width = max(len(k) for k, _ in rows)
    return "\n".join(f"{k:<{width}}  {v}" for k, v in rows)


def format_flop_table(report: FlopReport) -> str:
    width = max([len(l.path) for l in report.layers] + [5])
    lines = [f"{'layer':<{width}}  {'op':<18} {'params':>10} {'MACs':>16}"]
    for l in report.layers:
        lines.append(f"{l.path:<{width}}  {l.op:<18} {l.param_count:>10,} {l.macs:>16,}")
    lines.append(f"{'total':<{width}}  {'':<18} {report.params:>10,} {report.total_macs:>16,}")
    lines.append(f"FLOPs x1 = {report.flops_x1 / 1e9:.3f} G, x2 = {report.flops_x2 / 1e9:.3f} G")
    return "\n".join(lines)
