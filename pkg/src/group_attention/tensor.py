"""Dense tensors with tape-based reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array. Every primitive that receives at least
one tensor with ``requires_grad`` set returns a tensor remembering its parents
and a closure mapping the output gradient to input gradients. Calling
:func:`backward` on a scalar linearizes that graph into a :class:`Tape`
(topological order) and replays it in reverse.

Model state is float32. Float64 inputs stay float64 so the gradient checker can
run the exact same graph in double precision.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np

_FLOATS = (np.dtype(np.float32), np.dtype(np.float64))


class ShapeError(ValueError):
    """Operand shapes are not conformable for a primitive."""


def _shape_error(op: str, *shapes) -> ShapeError:
    parts = " and ".join(str(tuple(s)) for s in shapes)
    return ShapeError(f"{op}: incompatible shapes {parts}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is not None:
            arr = np.array(data, dtype=dtype)
        elif isinstance(data, np.ndarray) and data.dtype in _FLOATS:
            arr = data
        else:
            arr = np.array(data, dtype=np.float32)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(as_tensor(other, like=self), -1.0))

    def __rsub__(self, other):
        return add(as_tensor(other, like=self), mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        backward(self)


def as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out.op = op
    return out


class Tape:
    """Primitive applications leading to a root, in topological order.

    Every node appears exactly once and after all of its inputs.
    """

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def record(cls, root: Tensor) -> "Tape":
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
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)

    def replay(self, root: Tensor) -> None:
        root.grad = np.ones_like(root.data)
        # intermediate gradients are released as soon as they have been propagated
        for node in reversed(self.nodes):
            if node._backward is None or node.grad is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                g = np.asarray(g, dtype=parent.dtype)
                if g.shape != parent.shape:
                    raise _shape_error(f"backward of {node.op}", g.shape, parent.shape)
                parent.grad = g.copy() if parent.grad is None else parent.grad + g
            if node is not root:
                node.grad = None


def backward(loss: Tensor, tape: Optional[Tape] = None) -> Tape:
    """Populate ``grad`` on every tensor with ``requires_grad`` in the ancestry of ``loss``."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape is None:
        tape = Tape.record(loss)
    tape.replay(loss)
    return tape


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --- primitives -------------------------------------------------------------


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    try:
        out = a.data + b.data
    except ValueError:
        raise _shape_error("add", a.shape, b.shape) from None
    sa, sb = a.shape, b.shape
    return _result(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        c = np.asarray(b, dtype=a.dtype)
        return _result(a.data * c, (a,), lambda g: (g * c,), "scale")
    try:
        out = a.data * b.data
    except ValueError:
        raise _shape_error("mul", a.shape, b.shape) from None
    ad, bd = a.data, b.data
    return _result(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
        "mul",
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``(m, k) @ (k, n)``, ``(m, k) @ (k,)`` or ``(k,) @ (k, n)``."""
    if a.ndim not in (1, 2) or b.ndim not in (1, 2) or (a.ndim == 1 and b.ndim == 1):
        raise _shape_error("matmul", a.shape, b.shape)
    if a.shape[-1] != b.shape[0]:
        raise _shape_error("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data

    def grad_fn(g):
        if ad.ndim == 2 and bd.ndim == 2:
            return g @ bd.T, ad.T @ g
        if bd.ndim == 1:
            return np.outer(g, bd), ad.T @ g
        return bd @ g, np.outer(ad, g)

    return _result(ad @ bd, (a, b), grad_fn, "matmul")


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {a.shape}")
    return _result(a.data.T, (a,), lambda g: (g.T,), "transpose")


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise _shape_error("reshape", src, shape) from None
    return _result(out, (a,), lambda g: (g.reshape(src),), "reshape")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,), "relu")


def dot(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 1 or a.shape != b.shape:
        raise _shape_error("dot", a.shape, b.shape)
    ad, bd = a.data, b.data
    return _result(np.asarray(ad @ bd), (a, b), lambda g: (g * bd, g * ad), "dot")


def rowdot(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise inner products of two ``(n, d)`` matrices."""
    if a.ndim != 2 or a.shape != b.shape:
        raise _shape_error("rowdot", a.shape, b.shape)
    ad, bd = a.data, b.data
    out = np.einsum("ij,ij->i", ad, bd)
    return _result(out, (a, b), lambda g: (g[:, None] * bd, g[:, None] * ad), "rowdot")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise ValueError("concat of an empty list")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise _shape_error("concat", *(t.shape for t in tensors)) from None
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _result(out, tuple(tensors), lambda g: tuple(np.split(g, cuts, axis=axis)), "concat")


def weighted_sum(w: Tensor, x: Tensor) -> Tensor:
    """``sum_i w[i] * x[i]`` for weights ``(n,)`` and rows ``(n, d)``."""
    if w.ndim != 1 or x.ndim != 2 or w.shape[0] != x.shape[0]:
        raise _shape_error("weighted_sum", w.shape, x.shape)
    wd, xd = w.data, x.data
    return _result(wd @ xd, (w, x), lambda g: (xd @ g, np.outer(wd, g)), "weighted_sum")


def total(a: Tensor) -> Tensor:
    return _result(np.asarray(a.data.sum(), dtype=a.dtype), (a,), lambda g: (np.broadcast_to(g, a.shape),), "sum")


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    return _result(
        np.asarray(a.data.mean(), dtype=a.dtype), (a,), lambda g: (np.broadcast_to(g / n, a.shape),), "mean"
    )


def parameters_zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
