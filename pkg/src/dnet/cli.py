"""Command-line entry point: ``dnet <subcommand> ...``.

Exit codes: 0 success, 1 runtime failure (one ``ERR:`` line on stderr), 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np


def _dims(text: str) -> tuple[int, ...]:
    try:
        dims = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if len(dims) != 3 or min(dims) < 1:
        raise argparse.ArgumentTypeError(f"expected three positive extents, got {text!r}")
    return dims


def _axis_values(text: str):
    parts = text.split("x")
    if len(parts) == 1:
        return int(parts[0])
    if len(parts) != 3:
        raise ValueError
    return tuple(int(p) for p in parts)


def _layers(text: str) -> list[tuple]:
    """``k:d:s`` per layer, comma separated; any field may be per-axis as ``5x5x3``."""
    layers = []
    for item in text.split(","):
        fields = item.split(":")
        try:
            if len(fields) != 3:
                raise ValueError
            layers.append(tuple(_axis_values(f) for f in fields))
        except ValueError:
            raise argparse.ArgumentTypeError(f"layer {item!r} is not kernel:dilation:stride")
    return layers


def _load_config(path: str | None):
    from .models import ModelConfig

    return ModelConfig() if path is None else ModelConfig.from_json(path)


def cmd_summary(args) -> int:
    from .analysis import format_summary, summarize
    from .models import build_model

    model = build_model(_load_config(args.config), meta=True)
    summary = summarize(model, args.input_dims)
    print(json.dumps(summary, indent=2) if args.json else format_summary(summary))
    return 0


def cmd_flops(args) -> int:
    from .analysis import count_flops, format_flop_table
    from .models import build_model

    report = count_flops(build_model(_load_config(args.config), meta=True), args.input_dims)
    print(report.to_json() if args.json else format_flop_table(report))
    return 0


def cmd_erf(args) -> int:
    from .analysis import compute_erf

    erf = compute_erf(args.layers)
    print(erf if isinstance(erf, int) else "x".join(map(str, erf)))
    return 0


def cmd_infer(args) -> int:
    from .checkpoint import load_checkpoint
    from .core import Tensor
    from .models import build_model, load_weights, model_forward
    from .training import argmax_labels
    from .volume import load_volume, save_volume

    model = build_model(_load_config(args.config))
    load_weights(model, load_checkpoint(args.weights), force=args.force)
    vol = load_volume(args.input)
    if vol.dtype != np.float32:
        raise ValueError(f"{args.input} holds labels, expected an f32 image volume")
    batched = vol if vol.ndim == 5 else vol[None]
    logits = model_forward(model, Tensor(batched), mode="eval").numpy()
    if args.argmax:
        out = argmax_labels(logits)[:, None].astype(np.uint16)
    else:
        out = logits
    save_volume(out if vol.ndim == 5 else out[0], args.output)
    return 0


def cmd_gradcheck(args) -> int:
    from .training import model_gradcheck

    result = model_gradcheck(_load_config(args.config), tol=args.tol, seed=args.seed,
                             max_entries=args.max_entries)
    width = max(len(g.group) for g in result.groups)
    for g in result.groups:
        print(f"{'PASS' if g.passed else 'FAIL'}  {g.group:<{width}}  rel={g.rel_error:.3e}  n={g.checked}")
    print(f"{'PASS' if result.passed else 'FAIL'}  overall pooled rel={result.pooled_error:.3e} tol={args.tol:g}")
    return 0 if result.passed else 1


def cmd_train_toy(args) -> int:
    from .checkpoint import save_checkpoint
    from .models import weight_store
    from .training import SynthSpec, train_toy

    config = _load_config(args.config)
    spec = SynthSpec.from_json(args.spec) if args.spec else SynthSpec(num_classes=config.num_classes)
    result = train_toy(config, spec, args.steps, seed=args.seed, lr0=args.lr, batch=args.batch)
    if args.out:
        save_checkpoint(weight_store(result.model), args.out)
    if args.trace:
        result.write_csv(args.trace)
    if args.json:
        Path(args.json).write_text(result.to_json())
    last = result.trace[-1] if result.trace else None
    if last is not None:
        print(f"step {last.step}: loss={last.loss:.4f} dice={last.dice:.4f} iou={last.iou:.4f}")
    print(f"validation: dice={result.val_dice:.4f} iou={result.val_iou:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dnet", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("summary", help="parameter, FLOP and receptive-field report")
    s.add_argument("--config", help="model config JSON (default: D-Net at width 48)")
    s.add_argument("--input-dims", type=_dims, default=(96, 96, 96))
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_summary)

    s = sub.add_parser("flops", help="per-layer MAC table")
    s.add_argument("--config")
    s.add_argument("--input-dims", type=_dims, default=(96, 96, 96))
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_flops)

    s = sub.add_parser("erf", help="receptive field of a conv cascade")
    s.add_argument("--layers", type=_layers, required=True, help="k:d:s,k:d:s,...")
    s.set_defaults(func=cmd_erf)

    s = sub.add_parser("infer", help="run a model on a .dvol image")
    s.add_argument("--config", required=True)
    s.add_argument("--weights", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--output", required=True)
    s.add_argument("--argmax", action="store_true", help="write u16 labels (ties go to the lowest class)")
    s.add_argument("--force", action="store_true", help="load weights despite extent mismatches")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("gradcheck", help="finite-difference check of every parameter group")
    s.add_argument("--config", required=True)
    s.add_argument("--tol", type=float, default=1e-3)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--max-entries", type=int, default=4, help="sampled entries per tensor")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("train-toy", help="train on synthetic spheres")
    s.add_argument("--config", required=True)
    s.add_argument("--spec", help="SynthSpec JSON")
    s.add_argument("--steps", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--lr", type=float, default=0.05)
    s.add_argument("--batch", type=int, default=2)
    s.add_argument("--out", help="checkpoint path (.dnw)")
    s.add_argument("--trace", help="metric trace CSV")
    s.add_argument("--json", help="metric trace JSON")
    s.set_defaults(func=cmd_train_toy)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # every runtime failure maps to exit 1
        msg = " ".join(str(exc).split())
        print(f"ERR: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
