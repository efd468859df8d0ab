"""Losses, poly-decayed SGD, overlap metrics, synthetic data and a toy training loop."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .core import NonFiniteError, Tape, Tensor, add, backward, scale
from .core.tensor import emit
from .models import Model, ModelConfig, build_model, model_forward


class LabelError(ValueError):
    pass


class DivergenceError(FloatingPointError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value} at step {step}")
        self.step = step


@dataclass
class LossConfig:
    lambda_dice: float = 0.5
    lambda_ce: float = 0.5
    smooth: float = 1e-5
    class_weights: Sequence[float] | None = None

    def __post_init__(self):
        if self.lambda_dice < 0 or self.lambda_ce < 0 or self.lambda_dice + self.lambda_ce <= 0:
            raise ValueError("loss weights must be non-negative with a positive sum")


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _one_hot(labels: np.ndarray, k: int, dtype) -> np.ndarray:
    return np.moveaxis(np.eye(k, dtype=dtype)[labels], -1, 1)


def _check_labels(logits: Tensor, labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    n, k = logits.shape[:2]
    if labels.shape != (n, *logits.shape[2:]):
        raise LabelError(f"labels {labels.shape} do not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise LabelError(f"label values must lie in [0, {k}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    if k < 2:
        raise LabelError("need at least two classes (background + foreground)")
    return labels.astype(np.int64)


def _softmax_vjp(p: np.ndarray, dp: np.ndarray) -> np.ndarray:
    return p * (dp - (p * dp).sum(axis=1, keepdims=True))


def _dice_terms(p, y, smooth):
    axes = (0, 2, 3, 4)
    inter = (p * y).sum(axis=axes)[1:]
    denom = p.sum(axis=axes)[1:] + y.sum(axis=axes)[1:] + smooth
    return inter, denom, (2 * inter + smooth) / denom


def dice_loss(logits: Tensor, labels, cfg: LossConfig = LossConfig()) -> Tensor:
    """1 - mean soft Dice over foreground classes, summed over batch and voxels."""
    labels = _check_labels(logits, labels)
    z = logits.numpy()
    k = z.shape[1]
    p = softmax(z)
    y = _one_hot(labels, k, z.dtype)
    inter, denom, dice = _dice_terms(p, y, cfg.smooth)
    loss = np.array([1.0 - dice.mean()], dtype=z.dtype)

    def vjp(g):
        # d dice_c / d p_c = (2 y denom - (2 I + s)) / denom^2 for foreground c
        dp = np.zeros_like(p)
        coef = -g[0] / (k - 1)
        num = 2 * inter + cfg.smooth
        for c in range(1, k):
            dp[:, c] = coef * (2 * y[:, c] * denom[c - 1] - num[c - 1]) / denom[c - 1] ** 2
        return (_softmax_vjp(p, dp).astype(z.dtype),)

    return emit("dice_loss", loss, (logits,), vjp)


def cross_entropy(logits: Tensor, labels, cfg: LossConfig = LossConfig()) -> Tensor:
    """Mean negative log-likelihood of the true class (weighted mean with class weights)."""
    labels = _check_labels(logits, labels)
    z = logits.numpy()
    k = z.shape[1]
    zs = z - z.max(axis=1, keepdims=True)
    logp = zs - np.log(np.exp(zs).sum(axis=1, keepdims=True))
    y = _one_hot(labels, k, z.dtype)
    if cfg.class_weights is not None:
        cw = np.asarray(cfg.class_weights, dtype=z.dtype)
        if cw.shape != (k,):
            raise LabelError(f"class_weights needs {k} entries")
        wvox = cw[labels]
    else:
        wvox = np.ones(labels.shape, dtype=z.dtype)
    total = wvox.sum()
    nll = -(y * logp).sum(axis=1)
    loss = np.array([(wvox * nll).sum() / total], dtype=z.dtype)

    def vjp(g):
        p = np.exp(logp)
        return ((g[0] / total) * wvox[:, None] * (p - y),)

    return emit("cross_entropy", loss, (logits,), vjp)


def combined_loss(logits: Tensor, labels, cfg: LossConfig = LossConfig()) -> Tensor:
    """lambda_dice * Dice + lambda_ce * CE."""
    parts = []
    if cfg.lambda_dice:
        parts.append(scale(dice_loss(logits, labels, cfg), cfg.lambda_dice))
    if cfg.lambda_ce:
        parts.append(scale(cross_entropy(logits, labels, cfg), cfg.lambda_ce))
    return parts[0] if len(parts) == 1 else add(parts[0], parts[1])


# --------------------------------------------------------------------------
# optimizer


@dataclass
class OptimState:
    lr0: float = 0.01
    momentum: float = 0.9
    max_epochs: int = 1000
    power: float = 0.9
    epoch: int = 0
    steps: int = 0
    velocity: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def lr(self, epoch: int | None = None) -> float:
        e = self.epoch if epoch is None else epoch
        frac = min(max(e / self.max_epochs, 0.0), 1.0)
        return self.lr0 * (1.0 - frac) ** self.power

    def advance_epoch(self) -> None:
        self.epoch += 1


def sgd_poly_step(state: OptimState, grads: dict[str, np.ndarray], weights: dict[str, Tensor]) -> OptimState:
    """v <- m v + g ; w <- w - lr(epoch) v, in place on ``weights``."""
    missing = [p for p in weights if p not in grads]
    if missing:
        raise KeyError(f"no gradient for trainable paths: {missing}")
    lr = state.lr()
    for path, t in weights.items():
        g = grads[path]
        v = state.velocity.get(path)
        v = g.copy() if v is None else state.momentum * v + g
        state.velocity[path] = v
        t.data = (t.data - lr * v).astype(t.dtype)
    state.steps += 1
    return state


# --------------------------------------------------------------------------
# metrics


@dataclass
class ClassMetrics:
    dice: dict[int, float]
    iou: dict[int, float]

    @property
    def mean_dice(self) -> float:
        return float(np.mean(list(self.dice.values()))) if self.dice else float("nan")

    @property
    def mean_iou(self) -> float:
        return float(np.mean(list(self.iou.values()))) if self.iou else float("nan")


def eval_metrics(pred_labels, true_labels, classes: int) -> ClassMetrics:
    """Hard Dice and IoU per foreground class; empty-vs-empty scores 1."""
    pred = np.asarray(pred_labels)
    true = np.asarray(true_labels)
    if pred.shape != true.shape:
        raise LabelError(f"prediction {pred.shape} vs ground truth {true.shape}")
    dice, iou = {}, {}
    for c in range(1, classes):
        a, b = pred == c, true == c
        inter = int(np.logical_and(a, b).sum())
        sa, sb = int(a.sum()), int(b.sum())
        union = sa + sb - inter
        dice[c] = 1.0 if sa + sb == 0 else 2 * inter / (sa + sb)
        iou[c] = 1.0 if union == 0 else inter / union
    return ClassMetrics(dice, iou)


def argmax_labels(logits: np.ndarray) -> np.ndarray:
    """Class index per voxel; ties go to the lowest index."""
    return np.argmax(logits, axis=1)


# --------------------------------------------------------------------------
# synthetic data


@dataclass
class SynthSpec:
    extents: tuple[int, int, int] = (16, 16, 16)
    num_spheres: int = 2
    radius_range: tuple[float, float] = (3.0, 5.0)
    noise_sigma: float = 0.2
    seed: int = 0
    num_classes: int = 2
    intensity: float = 1.0

    def __post_init__(self):
        self.extents = tuple(int(v) for v in self.extents)
        self.radius_range = tuple(float(v) for v in self.radius_range)
        lo, hi = self.radius_range
        if len(self.extents) != 3 or min(self.extents) < 1:
            raise ValueError(f"extents must be 3 positive integers: {self.extents}")
        if self.num_spheres < 0 or self.num_classes < 2 or self.noise_sigma < 0:
            raise ValueError("need num_spheres >= 0, num_classes >= 2, noise_sigma >= 0")
        if not 0 < lo <= hi:
            raise ValueError(f"bad radius range {self.radius_range}")
        if self.num_spheres and 2 * math.ceil(hi) + 1 > min(self.extents):
            raise ValueError(f"spheres of radius {hi} do not fit inside {self.extents}")

    @classmethod
    def from_json(cls, path: str | Path) -> "SynthSpec":
        return cls(**json.loads(Path(path).read_text()))


def sphere_mask(extents, center, radius) -> np.ndarray:
    grids = np.ogrid[tuple(slice(0, n) for n in extents)]
    dist2 = sum((g - c) ** 2 for g, c in zip(grids, center))
    return dist2 <= radius * radius


def synth_sample(spec: SynthSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    labels = np.zeros(spec.extents, dtype=np.int64)
    for _ in range(spec.num_spheres):
        r = rng.uniform(*spec.radius_range)
        rc = math.ceil(r)
        center = [int(rng.integers(rc, n - rc)) for n in spec.extents]
        cls = int(rng.integers(1, spec.num_classes))
        labels[sphere_mask(spec.extents, center, r)] = cls
    image = spec.intensity * labels + spec.noise_sigma * rng.standard_normal(spec.extents)
    return image.astype(np.float32)[None], labels


def synth_dataset(spec: SynthSpec) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Endless deterministic stream of ([1, D, H, W] image, [D, H, W] labels)."""
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    while True:
        yield synth_sample(spec, rng)


def synth_batch(stream, batch: int) -> tuple[np.ndarray, np.ndarray]:
    samples = [next(stream) for _ in range(batch)]
    return np.stack([s[0] for s in samples]), np.stack([s[1] for s in samples])


# --------------------------------------------------------------------------
# toy training


@dataclass
class TraceRow:
    step: int
    lr: float
    loss: float
    dice: float
    iou: float


@dataclass
class TrainResult:
    model: Model
    trace: list[TraceRow]
    val_dice: float = float("nan")
    val_iou: float = float("nan")

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "lr", "loss", "dice", "iou"])
            for r in self.trace:
                w.writerow([r.step, repr(r.lr), repr(r.loss), repr(r.dice), repr(r.iou)])

    def to_json(self) -> str:
        return json.dumps({"val_dice": self.val_dice, "val_iou": self.val_iou,
                           "trace": [asdict(r) for r in self.trace]}, indent=2)


def evaluate(model: Model, spec: SynthSpec, samples: int = 8, seed: int | None = None) -> ClassMetrics:
    """Eval-mode Dice/IoU pooled over a held-out synthetic set."""
    vspec = SynthSpec(**{**asdict(spec), "seed": spec.seed + 10_007 if seed is None else seed})
    stream = synth_dataset(vspec)
    preds, trues = [], []
    for _ in range(samples):
        img, lab = next(stream)
        logits = model_forward(model, Tensor(img[None]), mode="eval").numpy()
        preds.append(argmax_labels(logits)[0])
        trues.append(lab)
    return eval_metrics(np.stack(preds), np.stack(trues), model.config.num_classes)


def train_toy(
    config: ModelConfig,
    spec: SynthSpec,
    steps: int,
    seed: int = 0,
    lr0: float = 0.05,
    momentum: float = 0.9,
    batch: int = 2,
    loss_cfg: LossConfig = LossConfig(),
    val_samples: int = 8,
    model: Model | None = None,
) -> TrainResult:
    """SGD with poly decay on an endless synthetic stream; one trace row per step."""
    if spec.num_classes != config.num_classes:
        raise ValueError(f"spec has {spec.num_classes} classes, model {config.num_classes}")
    model = model or build_model(config, seed=seed)
    if steps == 0:
        return TrainResult(model, [])
    stream = synth_dataset(SynthSpec(**{**asdict(spec), "seed": spec.seed + seed}))
    weights = dict(model.named_parameters())
    state = OptimState(lr0=lr0, momentum=momentum, max_epochs=steps)
    trace = []
    for step in range(steps):
        img, lab = synth_batch(stream, batch)
        with Tape() as tape:
            try:
                logits = model_forward(model, Tensor(img), mode="train", seed=seed + step)
                loss = combined_loss(logits, lab, loss_cfg)
            except NonFiniteError as exc:
                raise DivergenceError(step, float("nan")) from exc
        value = loss.item()
        if not math.isfinite(value):
            raise DivergenceError(step, value)
        grads = backward(tape, loss)
        m = eval_metrics(argmax_labels(logits.numpy()), lab, config.num_classes)
        trace.append(TraceRow(step, state.lr(), value, m.mean_dice, m.mean_iou))
        sgd_poly_step(state, {p: grads[t] for p, t in weights.items()}, weights)
        state.advance_epoch()
    result = TrainResult(model, trace)
    if val_samples:
        vm = evaluate(model, spec, val_samples)
        result.val_dice, result.val_iou = vm.mean_dice, vm.mean_iou
    return result


# --------------------------------------------------------------------------
# end-to-end gradient check


@dataclass
class GroupCheck:
    group: str
    rel_error: float
    checked: int
    passed: bool


@dataclass
class ModelGradCheck:
    groups: list[GroupCheck]
    pooled_error: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.pooled_error < self.tol and all(g.passed for g in self.groups)


def model_gradcheck(
    config: ModelConfig,
    tol: float = 1e-3,
    seed: int = 0,
    h: float = 1e-3,
    max_entries: int | None = 4,
    uniform: int | None = None,
    batch: int = 2,
    extents: Sequence[int] | None = None,
    group_depth: int = 2,
) -> ModelGradCheck:
    """Finite-difference check of combined_loss w.r.t. the parameters, in float64.

    Train-mode forward (batch statistics).  Entries are either ``max_entries``
    per tensor or, with ``uniform``, that many drawn uniformly over the whole
    parameter vector.  Errors are pooled per group of ``group_depth`` path
    parts and over everything checked.
    """
    from .core import check_gradients, pooled_error, uniform_entries

    model = build_model(config, seed=seed, dtype=np.float64)
    m = config.input_multiple
    ext = tuple(extents) if extents is not None else (m, m, m)
    rng = np.random.Generator(np.random.PCG64(seed))
    image = Tensor(rng.standard_normal((batch, config.in_channels, *ext)))
    labels = rng.integers(0, config.num_classes, (batch, *ext))
    params = dict(model.named_parameters())

    def loss_fn():
        return combined_loss(model_forward(model, image, mode="train", seed=seed), labels)

    chosen = uniform_entries(params, uniform, seed) if uniform else None
    results = check_gradients(loss_fn, params, h=h, tol=tol, max_entries=max_entries,
                              seed=seed, entries=chosen)
    by_group: dict[str, list] = {}
    for r in results:
        by_group.setdefault(".".join(r.name.split(".")[:group_depth]), []).append(r)
    groups = []
    for key, rs in by_group.items():
        err = pooled_error(rs)
        groups.append(GroupCheck(key, err, sum(r.checked for r in rs), err < tol))
    return ModelGradCheck(groups, pooled_error(results), tol)
