"""Dense float64 tensors with a reverse-mode tape.

Every op that touches a tensor requiring gradients appends one node to the
thread-local tape: the output, its inputs and a closure mapping the output
gradient to input gradients. ``backward`` replays the tape in reverse and then
clears it, so one forward pass supports exactly one backward pass.
"""

import threading
from collections.abc import Callable, Sequence
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from scanloop.common.exceptions import (
    ContractError,
    DimensionError,
    NonFiniteError,
    StaleTapeError,
)

BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    """Immutable float64 array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_generation")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"Tensor {name or '<anonymous>'} holds non-finite values")
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._generation: tuple[int, int] | None = None

    # ── Introspection ──

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        """Flat view of the values (row-major)."""
        return self.data.ravel()

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() needs a single value, tensor has shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    # ── Operators ──

    def __add__(self, other) -> "Tensor":
        return add(self, other)

    def __radd__(self, other) -> "Tensor":
        return add(as_tensor(other), self)

    def __sub__(self, other) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other) -> "Tensor":
        return sub(as_tensor(other), self)

    def __mul__(self, other) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other) -> "Tensor":
        return mul(as_tensor(other), self)

    def __truediv__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            raise ContractError("Tensor division is only defined by a Python scalar")
        return mul(self, 1.0 / float(other))

    def __neg__(self) -> "Tensor":
        return mul(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


# ── Tape ──


@dataclass
class _Node:
    output: Tensor
    inputs: tuple[Tensor, ...]
    backward: BackwardFn


class Tape:
    """Ordered record of differentiable ops for a single worker."""

    _ids = iter(range(1, 1 << 62))

    def __init__(self):
        self.id = next(Tape._ids)
        self.generation = 0
        self.nodes: list[_Node] = []

    def record(self, output: Tensor, inputs: tuple[Tensor, ...], backward: BackwardFn) -> None:
        output._generation = (self.id, self.generation)
        self.nodes.append(_Node(output, inputs, backward))

    def clear(self) -> None:
        self.nodes = []
        self.generation += 1

    def __len__(self) -> int:
        return len(self.nodes)


_state = threading.local()


def current_tape() -> Tape:
    tape = getattr(_state, "tape", None)
    if tape is None:
        tape = Tape()
        _state.tape = tape
    return tape


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate without recording anything on the tape."""
    previous = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


@contextmanager
def fresh_tape() -> Iterator[Tape]:
    """Run with an empty tape, discarding whatever was recorded before."""
    tape = current_tape()
    tape.clear()
    try:
        yield tape
    finally:
        tape.clear()


def make_result(data: np.ndarray, inputs: Sequence[Tensor], backward: BackwardFn) -> Tensor:
    """Wrap an op output and record it when any input needs gradients."""
    inputs = tuple(inputs)
    requires = grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=requires)
    if requires:
        current_tape().record(out, inputs, backward)
    return out


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad ancestor of a scalar loss."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = current_tape()
    if loss._generation != (tape.id, tape.generation):
        raise StaleTapeError()

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    touched: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.nodes):
        g = grads.get(id(node.output))
        if g is None:
            continue
        for tensor, tg in zip(node.inputs, node.backward(g)):
            if tg is None or not tensor.requires_grad:
                continue
            key = id(tensor)
            if key in grads:
                grads[key] = grads[key] + tg
            else:
                grads[key] = np.array(tg, dtype=np.float64)
                touched[key] = tensor

    for key, tensor in touched.items():
        g = grads[key].reshape(tensor.shape)
        tensor.grad = g if tensor.grad is None else tensor.grad + g
    tape.clear()


# ── Broadcasting (row / column vectors and scalars only) ──


def _check_broadcast(a: tuple[int, ...], b: tuple[int, ...]) -> None:
    if a == b:
        return
    if int(np.prod(a)) == 1 or int(np.prod(b)) == 1:
        return
    if len(a) == 2 and len(b) == 2:
        for x, y in ((a, b), (b, a)):
            # row vector (1, m) or column vector (n, 1) against (n, m)
            if (y[0] == 1 and y[1] == x[1]) or (y[1] == 1 and y[0] == x[0]):
                return
    if len(a) == 2 and len(b) == 1 and b[0] == a[1]:
        return
    if len(b) == 2 and len(a) == 1 and a[0] == b[1]:
        return
    raise DimensionError(f"Cannot broadcast shapes {a} and {b}")


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    return make_result(
        a.data + b.data,
        (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    return make_result(
        a.data - b.data,
        (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    return make_result(
        a.data * b.data,
        (a, b),
        lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)),
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} @ {b.shape} do not conform")
    return make_result(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"transpose needs a matrix, got shape {x.shape}")
    return make_result(x.data.T, (x,), lambda g: (g.T,))
