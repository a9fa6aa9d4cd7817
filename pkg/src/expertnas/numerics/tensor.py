"""Dense float64 tensors and the reverse-mode tape.

Tensors wrap C-contiguous (row-major) numpy arrays. Operations in
:mod:`expertnas.numerics.ops` record a node on the innermost active
:class:`Tape` whenever one of their inputs requires a gradient; calling
:func:`backward` replays the recorded nodes in exact reverse order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for an operation."""


class ContractError(RuntimeError):
    """A precondition of an operation was violated."""


class NonFiniteError(FloatingPointError):
    """NaN or Inf appeared where finite values are required."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64, copy=True, order="C")
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @classmethod
    def wrap(cls, arr: np.ndarray, requires_grad: bool = False, name: str | None = None) -> "Tensor":
        """Build a tensor around ``arr`` without copying when it is already float64 and contiguous."""
        t = cls.__new__(cls)
        t.data = np.ascontiguousarray(arr, dtype=np.float64)
        t.requires_grad = requires_grad
        t.grad = None
        t.name = name
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def check_finite(self, where: str) -> None:
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteError(f"non-finite values in {where}")

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # operator sugar; imported lazily to keep the module graph acyclic
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    # maps the output gradient to one gradient (or None) per input
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_ACTIVE: list["Tape"] = []


class Tape:
    """Ordered record of primitive operations.

    Use as a context manager; nested tapes are allowed and only the
    innermost one records.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _ACTIVE.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self.nodes)


def current_tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


class no_grad:
    """Suspend recording: ops inside run without touching any tape."""

    def __enter__(self):
        _ACTIVE.append(None)  # type: ignore[arg-type]
        return self

    def __exit__(self, *exc):
        _ACTIVE.pop()


def record(op: str, inputs: tuple[Tensor, ...], out_data: np.ndarray,
           backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    """Create the output tensor of a primitive and record it if needed."""
    tape = current_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor.wrap(out_data, requires_grad=needs)
    if needs:
        tape.nodes.append(Node(op, inputs, out, backward_fn))
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``.grad`` of every tensor reachable from ``loss`` on ``tape``.

    Gradients accumulate into existing ``.grad`` buffers, so callers reset
    parameters between steps.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not tape.nodes:
        raise ContractError("backward called on an empty tape")
    seed = np.ones_like(loss.data)
    loss.grad = seed if loss.grad is None else loss.grad + seed
    for node in reversed(tape.nodes):
        g = node.output.grad
        if g is None:
            continue
        grads = node.backward(g)
        for inp, gi in zip(node.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            if gi.shape != inp.data.shape:
                raise ShapeError(f"{node.op}: gradient shape {gi.shape} != input shape {inp.data.shape}")
            inp.grad = gi if inp.grad is None else inp.grad + gi
