"""Dense rank-4 tensors, learnable parameters and the define-by-run tape."""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand dimensions do not line up."""


class Tensor:
    """A rank-4 (N, C, H, W) array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if arr.ndim != 4:
            raise ShapeError(f"tensors are rank-4 (N, C, H, W), got shape {arr.shape}")
        if 0 in arr.shape:
            raise ShapeError(f"tensor dims must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, tensor has dims {self.dims}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(dims={self.dims}, dtype={self.dtype}, requires_grad={self.requires_grad})"


def flat_index(dims: Sequence[int], n: int, c: int, h: int, w: int) -> int:
    N, C, H, W = dims
    if not (0 <= n < N and 0 <= c < C and 0 <= h < H and 0 <= w < W):
        raise IndexError(f"index ({n}, {c}, {h}, {w}) out of range for dims {tuple(dims)}")
    return ((n * C + c) * H + h) * W + w


class Parameter:
    """A named learnable tensor; its gradient lives on ``value.grad``."""

    def __init__(self, name: str, value):
        self.name = name
        self.value = Tensor(value, requires_grad=True)
        self.zero_grad()

    @property
    def data(self) -> np.ndarray:
        return self.value.data

    @property
    def grad(self) -> np.ndarray:
        return self.value.grad

    @property
    def dims(self):
        return self.value.dims

    @property
    def size(self) -> int:
        return self.value.data.size

    def zero_grad(self) -> None:
        self.value.grad = np.zeros_like(self.value.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, dims={self.dims})"


BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of executed primitives.

    Use as a context manager; every primitive executed inside the block with
    at least one gradient-requiring input is appended.  ``backward`` replays
    the record in exact reverse order.
    """

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], BackwardFn]] = []

    def record(self, out: Tensor, inputs: Sequence[Tensor], backward: BackwardFn) -> None:
        self.nodes.append((out, tuple(inputs), backward))

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _stack().pop()
        assert popped is self

    def backward(self, loss: Tensor, seed: np.ndarray | None = None) -> None:
        if not loss.requires_grad:
            raise ValueError("loss does not depend on any gradient-requiring tensor")
        if seed is None:
            if loss.data.size != 1:
                raise ShapeError(f"backward without a seed needs a scalar loss, got dims {loss.dims}")
            seed = np.ones_like(loss.data)
        loss.grad = seed if loss.grad is None else loss.grad + seed
        for out, inputs, fn in reversed(self.nodes):
            if out.grad is None:
                continue
            grads = fn(out.grad)
            for inp, g in zip(inputs, grads):
                if g is None or not inp.requires_grad:
                    continue
                inp.grad = g if inp.grad is None else inp.grad + g


_local = threading.local()


def _stack() -> list[Tape]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def current_tape() -> Tape | None:
    stack = _stack()
    return stack[-1] if stack else None


@contextmanager
def no_tape() -> Iterator[None]:
    """Suspend recording (inference and finite-difference probes)."""
    stack = _stack()
    saved = list(stack)
    stack.clear()
    try:
        yield
    finally:
        stack.extend(saved)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, Parameter):
        return x.value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def emit(data: np.ndarray, inputs: Sequence[Tensor], backward: BackwardFn) -> Tensor:
    """Wrap ``data`` as an op output and register it on the active tape."""
    out = Tensor(data)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, backward)
    return out
