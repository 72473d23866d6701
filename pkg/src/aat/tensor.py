"""Dense tensors and the tape that records differentiable operations.

A :class:`Tensor` is a thin wrapper over a numpy array. Operations in
:mod:`aat.ops` append a :class:`Node` to the innermost active :class:`Tape`
whenever one of their inputs requires a gradient; :meth:`Tape.backward` then
walks the record in reverse to build a gradient table.

Only tensors that require gradients are referenced by a node, so frozen
weights (for example a teacher network) never appear in a record even when
they take part in the forward computation.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an operation."""


class NumericError(FloatingPointError):
    """Raised when a non-finite value enters a computation."""


class ContractError(RuntimeError):
    """Raised when a caller violates an operation's preconditions."""


_DEFAULT_DTYPE = [np.dtype(np.float32)]


def default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE[-1]


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype new tensors are created with.

    ``with precision(np.float64): ...`` is how gradient checks are run.
    """
    _DEFAULT_DTYPE.append(np.dtype(dtype))
    try:
        yield
    finally:
        _DEFAULT_DTYPE.pop()


class Tensor:
    """An n-dimensional float array that can take part in differentiation.

    Args:
        data: Array-like payload. Integer and boolean inputs are converted to
            the current default float dtype; float32/float64 arrays keep theirs.
        requires_grad: Mark the tensor as a differentiation target.
        name: Optional label, used by checkpoints and error messages.
    """

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(default_dtype())
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> Tensor:
        return Tensor(self.data, name=self.name)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; the real work lives in aat.ops.
    def __add__(self, other):
        from aat import ops

        return ops.add(self, _as_tensor(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        from aat import ops

        return ops.add(self, ops.scale(_as_tensor(other, self.dtype), -1.0))

    def __rsub__(self, other):
        from aat import ops

        return ops.add(_as_tensor(other, self.dtype), ops.scale(self, -1.0))

    def __neg__(self):
        from aat import ops

        return ops.scale(self, -1.0)

    def __mul__(self, other):
        from aat import ops

        if np.isscalar(other):
            return ops.scale(self, float(other))
        return ops.mul(self, _as_tensor(other, self.dtype))

    __rmul__ = __mul__

    def __matmul__(self, other):
        from aat import ops

        return ops.matmul(self, other)

    def sum(self, axis=None):
        from aat import ops

        return ops.sum(self, axis=axis)

    def mean(self, axis=None):
        from aat import ops

        return ops.mean(self, axis=axis)

    def relu(self):
        from aat import ops

        return ops.relu(self)

    def reshape(self, *shape):
        from aat import ops

        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


@dataclass(eq=False)
class Node:
    """One executed primitive: its name, differentiable parents and output."""

    op: str
    parents: tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn


@dataclass(eq=False)
class Tape:
    """Ordered record of the primitives executed while the tape is active.

    Use as a context manager::

        with Tape() as tape:
            loss = ops.sum(ops.scale(x, 2.0))
        grads = tape.backward(loss)
    """

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> Tape:
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Reverse-mode pass from a scalar ``loss``.

        Returns a table mapping every tensor that requires a gradient and
        appears in the record (plus ``loss`` itself) to its gradient, and
        stores the same array on ``tensor.grad``. Tensors the loss does not
        depend on receive zeros.
        """
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[Tensor, np.ndarray] = {loss: np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.get(node.output)
            if g is None:
                continue
            parent_grads = node.backward(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None:
                    continue
                if pg.shape != parent.shape:
                    raise ShapeError(
                        f"{node.op}: gradient shape {pg.shape} does not match input shape {parent.shape}"
                    )
                prev = grads.get(parent)
                grads[parent] = pg if prev is None else prev + pg
        for node in self.nodes:
            for t in node.parents + (node.output,):
                if t not in grads:
                    grads[t] = np.zeros_like(t.data)
        for t, g in grads.items():
            if t.requires_grad:
                t.grad = g
        return grads


_TAPES: list[Tape] = []


def active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


@contextlib.contextmanager
def no_record() -> Iterator[None]:
    """Suspend recording, e.g. for teacher inference or EMA updates."""
    saved = list(_TAPES)
    _TAPES.clear()
    try:
        yield
    finally:
        _TAPES.extend(saved)


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    return tape.backward(loss)
