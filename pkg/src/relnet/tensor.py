"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a contiguous numpy array.  Operations that involve a
tensor with ``requires_grad=True`` record a closure computing the
vector-Jacobian product for each parent; :meth:`Tensor.backward` walks the
recorded graph in reverse topological order.

Precision is global: 32-bit floats by default, switchable to 64-bit (use
:func:`default_dtype` as a context manager around gradient checks).
"""

from __future__ import annotations

import contextlib
import os
from typing import Callable, Iterator, Sequence

import numpy as np

_DTYPE = np.dtype(np.float32)
DEBUG = os.environ.get("RELNET_DEBUG", "") not in ("", "0")


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


def get_default_dtype() -> np.dtype:
    return _DTYPE


def set_default_dtype(dtype) -> None:
    global _DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _DTYPE = dtype


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """Temporarily switch the global tensor precision."""
    previous = _DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """N-dimensional array with optional gradient tracking.

    ``grad`` is ``None`` until a backward pass reaches the tensor; afterwards
    it has the same shape as ``data`` and accumulates across passes until
    :meth:`zero_grad` is called.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_consumed")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        dtype = np.dtype(dtype) if dtype is not None else _DTYPE
        self.data = np.ascontiguousarray(np.asarray(data, dtype=dtype))
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self._consumed = False

    # -- construction helpers -------------------------------------------------

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: BackwardFn) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.ascontiguousarray(data)
        out.grad = None
        out.name = None
        out._consumed = False
        if DEBUG and not np.all(np.isfinite(out.data)):
            if all(np.all(np.isfinite(p.data)) for p in parents):
                raise FloatingPointError("non-finite values produced from finite inputs")
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    # -- array-like surface ---------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def zero_grad(self) -> None:
        self.grad = None

    # -- autodiff -------------------------------------------------------------

    def backward(self, retain_graph: bool = False) -> None:
        """Accumulate d(self)/d(leaf) into ``grad`` of every reachable tensor.

        The graph is released afterwards unless ``retain_graph`` is set; a
        second call on a released graph raises ``RuntimeError``.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward() requires a scalar, got shape {self.shape}")
        if self._consumed:
            raise RuntimeError("graph already released; call backward(retain_graph=True) to reuse it")
        if not self.requires_grad:
            return

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        pending: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node.grad is not None:
                node.grad = node.grad + g
            else:
                # leaves are user-visible; interior arrays may alias a child's
                node.grad = g.copy() if node._backward is None else g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.data.shape:
                    raise ShapeError(f"gradient shape {pg.shape} does not match {parent.data.shape}")
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg

        if not retain_graph:
            for node in order:
                if node._backward is not None:
                    node._backward = None
                    node._parents = ()
                    node._consumed = True

    # -- elementary arithmetic -------------------------------------------------

    def __add__(self, other) -> "Tensor":
        other = _lift(other, self.dtype)
        a, b = self, other
        return Tensor._from_op(
            a.data + b.data, (a, b),
            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        )

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        return Tensor._from_op(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other) -> "Tensor":
        other = _lift(other, self.dtype)
        a, b = self, other
        return Tensor._from_op(
            a.data - b.data, (a, b),
            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        )

    def __rsub__(self, other) -> "Tensor":
        return _lift(other, self.dtype) - self

    def __mul__(self, other) -> "Tensor":
        other = _lift(other, self.dtype)
        a, b = self, other
        return Tensor._from_op(
            a.data * b.data, (a, b),
            lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        )

    __rmul__ = __mul__

    def __matmul__(self, other) -> "Tensor":
        other = _lift(other, self.dtype)
        a, b = self, other
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul expects [n,k] @ [k,m], got {a.shape} @ {b.shape}")
        return Tensor._from_op(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))

    def square(self) -> "Tensor":
        a = self
        return Tensor._from_op(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))

    def sum(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        a = self
        out = a.data.sum(axis=axis, keepdims=keepdims)

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape).copy(),)

        return Tensor._from_op(np.asarray(out, dtype=a.dtype), (a,), backward)

    def mean(self) -> "Tensor":
        return self.sum() * (1.0 / self.size)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        return Tensor._from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))

    def flatten(self) -> "Tensor":
        """Collapse all but the leading axis."""
        return self.reshape(self.shape[0], -1)

    @property
    def T(self) -> "Tensor":
        a = self
        return Tensor._from_op(a.data.T, (a,), lambda g: (g.T,))

    def take(self, index) -> "Tensor":
        """Gather rows along axis 0; the gradient scatter-adds back."""
        a = self
        index = np.asarray(index, dtype=np.intp)

        def backward(g):
            out = np.zeros_like(a.data)
            np.add.at(out, index, g)
            return (out,)

        return Tensor._from_op(a.data[index], (a,), backward)

    def __getitem__(self, key) -> "Tensor":
        a = self

        def backward(g):
            out = np.zeros_like(a.data)
            out[key] = g
            return (out,)

        return Tensor._from_op(np.array(a.data[key]), (a,), backward)


def _lift(value, dtype) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value, dtype=dtype)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def as_tensor(value, requires_grad: bool = False) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, requires_grad=requires_grad)
