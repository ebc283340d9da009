"""Reverse-mode autodiff tensor on top of float64 numpy storage.

The graph is a per-forward-pass tape: each op links its output to its
operand tensors plus a closure computing operand gradients from the output
gradient. ``backward`` walks the tape once in reverse topological order,
accumulates gradients into every tensor that requires them, then frees the
tape. Re-running backward through a freed region is an error.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from ..errors import GraphError

_grad_enabled = True


class no_grad:
    """Context manager disabling tape construction (inference fast path)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def grad_enabled() -> bool:
    return _grad_enabled


def as_array(values, shape: Optional[Sequence[int]] = None) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if shape is not None:
        arr = arr.reshape(tuple(shape))
    return arr


class Tensor:
    """N-dimensional float64 array with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_freed")

    def __init__(self, values, requires_grad: bool = False,
                 _parents: tuple = (), _backward: Optional[Callable] = None):
        self.data = as_array(values)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward
        self._freed = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise GraphError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """Same values, no graph link: gradients never flow through."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Small conveniences used in loss code; the full op set lives in functional.
    def __add__(self, other):
        from . import functional as F
        return F.add(self, _coerce(other))

    def __sub__(self, other):
        from . import functional as F
        return F.sub(self, _coerce(other))

    def __mul__(self, other):
        from . import functional as F
        return F.mul(self, _coerce(other))

    def __neg__(self):
        from . import functional as F
        return F.neg(self)


def _coerce(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


class Parameter(Tensor):
    """Trainable leaf tensor with a unique name used for checkpointing."""

    __slots__ = ("name",)

    def __init__(self, values, name: str):
        super().__init__(values, requires_grad=True)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.data.shape})"


def make_output(values: np.ndarray, parents: Iterable[Tensor],
                backward: Callable) -> Tensor:
    """Create an op output, attaching the tape entry only when needed."""
    parents = tuple(parents)
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(values)
    return Tensor(values, requires_grad=True, _parents=parents, _backward=backward)


def _toposort(root: Tensor) -> list:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        if node._freed:
            raise GraphError("backward through a freed graph region; "
                             "graphs are single-use tapes")
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate .grad of every requires_grad tensor reachable from loss.

    The loss must be scalar. The tape is freed afterwards; calling backward
    a second time on the same graph raises GraphError.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if loss._freed:
        raise GraphError("repeated backward on the same graph without reset")
    if not loss.requires_grad:
        raise GraphError("loss does not require grad; nothing to differentiate")

    order = _toposort(loss)
    flowing: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}

    for node in reversed(order):
        gout = flowing.pop(id(node), None)
        if gout is None:
            continue
        if node.grad is None:
            node.grad = gout.copy()
        else:
            node.grad = node.grad + gout
        if node._backward is None:
            continue
        parent_grads = node._backward(gout)
        for parent, g in zip(node._parents, parent_grads):
            if g is None or not parent.requires_grad:
                continue
            acc = flowing.get(id(parent))
            flowing[id(parent)] = g if acc is None else acc + g

    # Free the tape: this graph can never be walked again.
    for node in order:
        if node._backward is not None:
            node._backward = None
            node._parents = ()
            node._freed = True
    loss._freed = True
