"""Dense reverse-mode automatic differentiation on top of numpy.

The graph is rebuilt on every forward pass (define-by-run).  Every primitive
returns a new :class:`Tensor` holding a closure that maps the upstream
gradient to gradients for each parent.  Nodes that do not depend on any
``requires_grad`` leaf keep no parents, so frozen sub-graphs cost nothing in
the backward pass.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_DTYPES = {32: np.float32, 64: np.float64}
_dtype = np.float32


class ShapeError(ValueError):
    """Operand shapes are incompatible for a primitive."""


class NonFiniteError(FloatingPointError):
    """A forward pass produced NaN or Inf."""


def set_precision(bits: int) -> None:
    global _dtype
    if bits not in _DTYPES:
        raise ValueError(f"precision must be 32 or 64, got {bits}")
    _dtype = _DTYPES[bits]


def get_dtype():
    return _dtype


def get_precision() -> int:
    return 64 if _dtype is np.float64 else 32


@contextlib.contextmanager
def precision(bits: int):
    """Temporarily switch the element width of newly created tensors."""
    old = get_precision()
    set_precision(bits)
    try:
        yield
    finally:
        set_precision(old)


def _check_finite(data: np.ndarray, op: str, name: str | None) -> None:
    # a sum is cheaper than isfinite(...).all(); confirm exactly before raising
    if data.size and not np.isfinite(np.add.reduce(data, axis=None)):
        if not np.isfinite(data).all():
            label = f"{op} ({name})" if name else op
            raise NonFiniteError(f"non-finite values produced by node {label}")


class Tensor:
    """An array that can take part in a differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "name", "op", "_parents", "_backward")
    # make ndarray (op) Tensor defer to the Tensor's reflected operator
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype != _dtype:
            arr = arr.astype(_dtype)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __rtruediv__(self, other):
        return div(other, self)

    def __getitem__(self, index):
        return slice_(self, index)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        grads = _backprop(self)
        for node, g in grads.items():
            if node.op == "leaf":
                node.grad = g if node.grad is None else node.grad + g


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ops that can turn finite inputs into NaN/Inf; the rest propagate what they get
_CHECKED = frozenset({"exp", "log", "div", "matmul", "softmax", "log_softmax", "cross_entropy"})


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if op in _CHECKED:
        _check_finite(data, op, None)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _broadcast_ok(a: tuple, b: tuple) -> bool:
    # leading-batch broadcasting only: the shorter shape must be a suffix
    if len(a) < len(b):
        a, b = b, a
    return a[len(a) - len(b):] == b


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))) if lead else g


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    if not _broadcast_ok(a.shape, b.shape):
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


# elementwise arithmetic

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "mul")

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "div")
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make(out, (a,), lambda g: (g / a.data,), "log")


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.data, 0)
    return _make(out, (a,), lambda g: (g * (a.data > 0),), "relu")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = stable_sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1 - out * out),), "tanh")


def stable_sigmoid(x: np.ndarray) -> np.ndarray:
    # exp(-x) may overflow to inf for very negative x; 1 / (1 + inf) is the correct limit 0
    with np.errstate(over="ignore"):
        e = np.exp(-x, out=np.empty_like(x))
    e += 1
    return np.reciprocal(e, out=e)


def ste_sigmoid(a, shift: np.ndarray, scale: float = 1.0) -> Tensor:
    """Fused straight-through step: forward ``[sigmoid(scale * (a - shift)) > 0.5]``,
    backward the gradient of ``sigmoid(scale * (a - shift))``.

    Same values as ``stop_gradient(hard - s) + s`` built from primitives, with
    one graph node instead of five.
    """
    a = as_tensor(a)
    z = a.data - shift
    if scale != 1.0:
        z = z * scale
    s = stable_sigmoid(z)
    hard = (s > 0.5).astype(s.dtype)

    def backward(g):
        d = g * s * (1 - s)
        return (d * scale if scale != 1.0 else d,)

    return _make(hard, (a,), backward, "ste_sigmoid")


def stop_gradient(a) -> Tensor:
    """Identity in the forward pass, a wall in the backward pass."""
    a = as_tensor(a)
    out = Tensor(a.data)
    out.op = "stop_gradient"
    return out


# linear algebra and shape manipulation

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _make(a.data @ b.data, (a, b), backward, "matmul")


def concat(tensors: Iterable, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, ts, backward, "concat")


def slice_(a, index) -> Tensor:
    a = as_tensor(a)
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        if _fancy(index):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return _make(np.array(out, copy=True), (a,), backward, "slice")


def _fancy(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def sum_(a, axis=None) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.data.dtype, copy=True),)

    return _make(np.asarray(a.data.sum(axis=axis)), (a,), backward, "sum")


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return sum_(a, axis) * (1.0 / n)


# probability helpers

def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), backward, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), backward, "log_softmax")


def cross_entropy(logits, targets: np.ndarray, group_size: int | None = None) -> Tensor:
    """Mean over rows of the summed per-group softmax cross-entropy.

    ``logits`` is ``[n, G * group_size]``; ``targets`` is an int array
    ``[n, G]`` of class indices inside each group, ``-1`` marking groups that
    contribute no loss for that row.  A 1-D target array means one group.
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets)
    if targets.ndim == 1:
        targets = targets[:, None]
    n, groups = targets.shape
    width = logits.shape[1] if group_size is None else group_size
    if logits.ndim != 2 or logits.shape != (n, groups * width):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    z = logits.data.reshape(n, groups, width)
    z = z - z.max(axis=2, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=2, keepdims=True))
    active = targets >= 0
    safe = np.where(active, targets, 0)
    picked = np.take_along_axis(logp, safe[:, :, None], axis=2)[:, :, 0]
    loss = -(picked * active).sum() / n

    def backward(g):
        p = np.exp(logp)
        p[np.arange(n)[:, None], np.arange(groups)[None, :], safe] -= 1
        p *= active[:, :, None]
        return ((g / n) * p.reshape(n, groups * width),)

    return _make(np.asarray(loss, dtype=logits.data.dtype), (logits,), backward, "cross_entropy")


# backward pass

def _toposort(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _backprop(loss: Tensor) -> dict[Tensor, np.ndarray]:
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    result: dict[Tensor, np.ndarray] = {}
    for node in reversed(_toposort(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            result[node] = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    return result


def grad(loss: Tensor, leaves: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of a scalar ``loss`` w.r.t. ``leaves``; zeros for unreachable leaves."""
    found = _backprop(loss)
    return [found.get(leaf, np.zeros_like(leaf.data)) for leaf in leaves]
