"""Dense tensors and a tape-based reverse-mode engine."""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class NotOnTapeError(KeyError):
    """A gradient was requested for a value the tape never saw."""


class Tensor:
    """N-dimensional float array with optional gradient tracking.

    A tensor whose ``data`` is ``None`` is a *meta* tensor: it carries only
    extents and flows through every op without computing values.  Complexity
    accounting runs full-size models this way.
    """

    __slots__ = ("data", "_shape", "dtype", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if dtype is None:
            floating = isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64)
            dtype = data.dtype if floating else DEFAULT_DTYPE
        arr = np.asarray(data, dtype=dtype)
        if any(n < 1 for n in arr.shape):
            raise ValueError(f"every extent must be >= 1, got {arr.shape}")
        self.data: np.ndarray | None = arr
        self._shape = arr.shape
        self.dtype = arr.dtype
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def meta(cls, shape: Sequence[int], dtype=DEFAULT_DTYPE, requires_grad=False, name=None) -> "Tensor":
        shape = tuple(int(s) for s in shape)
        if any(n < 1 for n in shape):
            raise ValueError(f"every extent must be >= 1, got {shape}")
        t = cls.__new__(cls)
        t.data = None
        t._shape = shape
        t.dtype = np.dtype(dtype)
        t.requires_grad = requires_grad
        t.name = name
        return t

    @property
    def is_meta(self) -> bool:
        return self.data is None

    @property
    def shape(self) -> tuple[int, ...]:
        return self._shape

    @property
    def size(self) -> int:
        return int(np.prod(self._shape, dtype=np.int64))

    @property
    def ndim(self) -> int:
        return len(self._shape)

    def numpy(self) -> np.ndarray:
        if self.data is None:
            raise ValueError("meta tensor has no values")
        return self.data

    def item(self) -> float:
        return float(self.numpy().reshape(-1)[0]) if self.size == 1 else float("nan")

    def astype(self, dtype) -> "Tensor":
        if self.is_meta:
            return Tensor.meta(self.shape, dtype, self.requires_grad, self.name)
        return Tensor(self.data.astype(dtype), self.requires_grad, self.name, dtype=dtype)

    def assign(self, values: np.ndarray) -> None:
        values = np.asarray(values)
        if values.shape != self._shape:
            raise ValueError(f"cannot assign {values.shape} into {self._shape}")
        self.data = values.astype(self.dtype, copy=True)

    def __repr__(self) -> str:
        kind = "meta" if self.is_meta else str(self.dtype)
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, {kind}, requires_grad={self.requires_grad})"

    # operator sugar; the real work lives in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)


def check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    return arr


# --------------------------------------------------------------------------
# tape


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor | None, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Records differentiable operations executed while it is active."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._seen: set[int] = set()

    def record(self, node: Node) -> None:
        self.nodes.append(node)
        self._seen.add(id(node.output))
        for t in node.inputs:
            if t is not None:
                self._seen.add(id(t))

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._seen

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)


_ACTIVE: list[Tape] = []


def active_tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


@contextlib.contextmanager
def no_tape():
    saved = list(_ACTIVE)
    _ACTIVE.clear()
    try:
        yield
    finally:
        _ACTIVE.extend(saved)


def emit(op: str, data: np.ndarray, inputs: Iterable[Tensor | None], vjp) -> Tensor:
    """Wrap an op result and record it when any input is tracked."""
    inputs = tuple(inputs)
    check_finite(data, op)
    tape = active_tape()
    tracked = tape is not None and any(t is not None and t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=tracked, dtype=data.dtype)
    if tracked:
        tape.record(Node(op, inputs, out, vjp))
    return out


class Gradients:
    """Gradient slots keyed by tensor identity."""

    def __init__(self, tape: Tape, grads: dict[int, np.ndarray]):
        self._tape = tape
        self._grads = grads

    def __getitem__(self, t: Tensor) -> np.ndarray:
        if t not in self._tape:
            raise NotOnTapeError(f"{t!r} was not recorded on the tape")
        g = self._grads.get(id(t))
        if g is None:
            if t.is_meta:
                raise ValueError("meta tensors carry no gradient")
            return np.zeros(t.shape, dtype=t.dtype)
        return g

    def get(self, t: Tensor, default=None):
        try:
            return self[t]
        except NotOnTapeError:
            return default


def backward(tape: Tape, loss: Tensor) -> Gradients:
    """Replay ``tape`` in reverse from a scalar ``loss``."""
    if loss not in tape:
        raise NotOnTapeError("loss was not produced by a taped operation")
    if loss.size != 1:
        raise ValueError(f"loss must be a scalar, got extents {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    for node in reversed(tape.nodes):
        g = grads.get(id(node.output))
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.vjp(g)):
            if t is None or gi is None or not t.requires_grad:
                continue
            if gi.shape != t.shape:
                raise AssertionError(f"{node.op}: gradient {gi.shape} vs value {t.shape}")
            slot = grads.get(id(t))
            grads[id(t)] = gi if slot is None else slot + gi
    return Gradients(tape, grads)
