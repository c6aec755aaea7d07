"""Dense tensors with tape-based reverse-mode differentiation.

Operations record themselves on the innermost active :class:`Tape` when at
least one input requires a gradient. Outside a tape nothing is recorded, so
inference builds no graph::

    with Tape() as tape:
        loss = (x * x).sum()
    tape.backward(loss)
    x.grad  # == 2 * x.data
"""
from __future__ import annotations

import threading
import weakref
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ShapeError, UsageError

DEFAULT_DTYPE = np.float32

_state = threading.local()


def _tape_stack() -> list:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """N-dimensional float array with an optional gradient buffer.

    Args:
        data: Anything ``np.asarray`` accepts. Always copied.
        requires_grad: Whether backward should populate ``grad``.
        dtype: float32 for normal use; float64 is accepted for
            finite-difference verification.
    """

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64) else DEFAULT_DTYPE
        self.data = np.array(data, dtype=dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._node: Optional[Node] = None

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.grad = None
        t.requires_grad = False
        t._node = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data.copy())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # arithmetic: same-shape tensors or Python scalars, no broadcasting

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, -other if not isinstance(other, Tensor) else neg(other))

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise UsageError("division is only defined by a scalar")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def sum(self) -> "Tensor":
        return tensor_sum(self)

    def mean(self) -> "Tensor":
        return tensor_mean(self)


class Node:
    """One recorded operation: its inputs, output and backward rule.

    The output is held weakly so ``output -> node -> output`` is not a
    reference cycle; the graph is freed as soon as the last tensor goes.
    """

    __slots__ = ("name", "inputs", "_output", "backward")

    def __init__(self, name: str, inputs: Sequence[Tensor], output: Tensor,
                 backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]):
        self.name = name
        self.inputs = tuple(inputs)
        self._output = weakref.ref(output)
        self.backward = backward

    @property
    def output(self) -> Optional[Tensor]:
        """The op's result, or ``None`` once nothing else references it."""
        return self._output()


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended in execution order, which is a topological order by
    construction. A tape is meant to be used from a single thread.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tapes must be exited in LIFO order")
        stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)


def make_result(name: str, data: np.ndarray, inputs: Sequence[Tensor],
                backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> Tensor:
    """Wrap ``data`` as an op output and record it when gradients are needed.

    ``backward_fn`` receives d(loss)/d(output) and returns one gradient per
    input (``None`` for inputs that take no gradient).
    """
    out = Tensor._wrap(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = Node(name, inputs, out, backward_fn)
        tape.nodes.append(out._node)
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf on ``tape``.

    Leaves that take part in the tape but not in ``loss`` end up with a zero
    gradient rather than ``None``.
    """
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    for node in tape.nodes:
        for t in node.inputs:
            if t.requires_grad and t._node is None and t.grad is None:
                t.grad = np.zeros_like(t.data)
    if loss._node is None:
        if loss.requires_grad:
            loss.grad = (loss.grad if loss.grad is not None else 0) + np.ones_like(loss.data)
        return

    pending = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        out = node.output
        # a collected output cannot lie on the path to a live loss
        g = pending.pop(id(out), None) if out is not None else None
        if g is None:
            continue
        grads = node.backward(g)
        for t, gi in zip(node.inputs, grads):
            if gi is None or not t.requires_grad:
                continue
            if gi.shape != t.shape:
                raise ShapeError(node.name, f"backward produced gradient of shape {gi.shape} for input {t.shape}")
            if t._node is None:
                t.grad = t.grad + gi if t.grad is not None else gi.astype(t.dtype, copy=True)
            else:
                key = id(t)
                pending[key] = pending[key] + gi if key in pending else gi


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        for i, (x, y) in enumerate(zip(a.shape, b.shape)):
            if x != y:
                raise ShapeError(op, f"operand shapes {a.shape} and {b.shape} differ", dim=i)
        raise ShapeError(op, f"operand ranks differ: {a.shape} vs {b.shape}")


def add(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _check_same_shape("add", a, b)
        return make_result("add", a.data + b.data, (a, b), lambda g: (g, g))
    return make_result("add", (a.data + float(b)).astype(a.dtype, copy=False), (a,), lambda g: (g,))


def neg(a: Tensor) -> Tensor:
    return make_result("neg", -a.data, (a,), lambda g: (-g,))


def mul(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _check_same_shape("mul", a, b)
        ad, bd = a.data, b.data
        return make_result("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))
    s = float(b)
    return make_result("mul", (a.data * s).astype(a.dtype, copy=False), (a,),
                       lambda g: ((g * s).astype(g.dtype, copy=False),))


def tensor_sum(a: Tensor) -> Tensor:
    shape, dtype = a.shape, a.dtype
    return make_result("sum", np.asarray(a.data.sum(), dtype=dtype), (a,),
                       lambda g: (np.full(shape, g, dtype=dtype),))


def tensor_mean(a: Tensor) -> Tensor:
    shape, dtype, n = a.shape, a.dtype, a.size
    return make_result("mean", np.asarray(a.data.mean(), dtype=dtype), (a,),
                       lambda g: (np.full(shape, g / n, dtype=dtype),))
