"""Central finite-difference verification of taped gradients."""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .ops import branch_log, frozen_branches
from .tensor import Tape, Tensor, backward, no_tape


@dataclass
class GradCheckResult:
    name: str
    rel_error: float
    max_abs_error: float
    checked: int
    passed: bool
    straddled: int = 0
    analytic: np.ndarray = field(default=None, repr=False)
    numeric: np.ndarray = field(default=None, repr=False)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """||a - n|| / max(||a||, ||n||), with a floor for all-zero gradients."""
    diff = np.linalg.norm(analytic - numeric)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(diff / scale)


def _decisions(loss_fn) -> tuple[float, list[np.ndarray]]:
    with branch_log() as log:
        value = loss_fn().item()
    return value, [d.copy() for d in log]


def _same(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def uniform_entries(tensors: Mapping[str, Tensor], n: int, seed: int = 0) -> dict[str, np.ndarray]:
    """``n`` flat indices drawn uniformly over all entries of all tensors, grouped by name."""
    names = list(tensors)
    sizes = np.array([tensors[k].size for k in names])
    total = int(sizes.sum())
    picks = np.sort(np.random.default_rng(seed).choice(total, size=min(n, total), replace=False))
    bounds = np.concatenate([[0], np.cumsum(sizes)])
    owner = np.searchsorted(bounds, picks, side="right") - 1
    return {names[j]: picks[owner == j] - bounds[j] for j in np.unique(owner)}


def pooled_error(results: list[GradCheckResult]) -> float:
    """Relative error of the concatenated gradient vector over all checked entries."""
    a = np.concatenate([r.analytic for r in results])
    n = np.concatenate([r.numeric for r in results])
    return relative_error(a, n)


def check_gradients(
    loss_fn: Callable[[], Tensor],
    tensors: Mapping[str, Tensor],
    h: float = 1e-3,
    tol: float = 1e-3,
    max_entries: int | None = None,
    seed: int = 0,
    freeze_branches: bool = True,
    entries: Mapping[str, np.ndarray] | None = None,
) -> list[GradCheckResult]:
    """Compare backward() against central differences for each named tensor.

    ``loss_fn`` must rebuild the scalar loss from the current values of
    ``tensors``; it should be run on float64 values.  With ``max_entries``
    set, a seeded random subset of each tensor's entries is checked;
    ``entries`` (flat indices per name) overrides that choice.

    Piecewise ops (leaky_relu sign, channel-max winner) are pinned to the
    decisions taken at the unperturbed point, so the stencil differentiates
    the smooth piece the analytic gradient belongs to.  ``straddled`` counts
    stencils that would have crossed a branch boundary without pinning.
    """
    for t in tensors.values():
        t.requires_grad = True
    with Tape() as tape:
        loss = loss_fn()
    grads = backward(tape, loss)
    with no_tape():
        _, base = _decisions(loss_fn)
    pin = (lambda: frozen_branches(base)) if freeze_branches else contextlib.nullcontext
    rng = np.random.default_rng(seed)
    results = []
    for name, t in tensors.items():
        analytic_full = grads[t].reshape(-1)
        t.data = np.ascontiguousarray(t.data)
        flat = t.data.reshape(-1)
        if entries is not None:
            idx = np.asarray(entries.get(name, ()), dtype=np.int64)
            if idx.size == 0:
                continue
        elif max_entries is None or flat.size <= max_entries:
            idx = np.arange(flat.size)
        else:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        numeric = np.empty(idx.size)
        straddled = 0
        with no_tape():
            for k, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + h
                with pin():
                    up, d_up = _decisions(loss_fn)
                flat[i] = orig - h
                with pin():
                    down, d_down = _decisions(loss_fn)
                flat[i] = orig
                if not freeze_branches and not (_same(d_up, base) and _same(d_down, base)):
                    straddled += 1
                numeric[k] = (up - down) / (2 * h)
        analytic = analytic_full[idx].astype(np.float64)
        rel = relative_error(analytic, numeric)
        results.append(GradCheckResult(name, rel, float(np.abs(analytic - numeric).max()),
                                       int(idx.size), rel < tol, straddled, analytic, numeric))
    return results
