"""Minimal reverse-mode autodiff over numpy arrays.

Every op records its parents and a vector-Jacobian product on the output
tensor. ``backward`` walks the recorded graph in reverse topological order
and accumulates into the ``grad`` of every leaf that requires gradients.

There is no implicit broadcasting: binary ops need identical shapes, and a
vector is expanded with :func:`repeat_rows`.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

_MODES = {"verify": np.float64, "fast": np.float32}
_mode = "verify"


def set_precision(mode: str) -> None:
    """Select ``"verify"`` (float64) or ``"fast"`` (float32) globally."""
    global _mode
    if mode not in _MODES:
        raise ValueError(f"unknown precision mode {mode!r}; expected one of {sorted(_MODES)}")
    _mode = mode


def get_precision() -> str:
    return _mode


def float_dtype():
    return _MODES[_mode]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "op")

    def __init__(self, data, requires_grad: bool = False, _parents: Sequence["Tensor"] = (),
                 _vjp: Callable | None = None, op: str = ""):
        self.data = np.asarray(data, dtype=float_dtype())
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = tuple(_parents)
        self._vjp = _vjp
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def backward(self) -> None:
        backward(self)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        tag = f", op={self.op!r}" if self.op else ""
        return f"Tensor(shape={self.shape}{tag})"

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
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return index_select(self, index)

    @property
    def T(self):
        return transpose(self)

    def sum(self):
        return sum_(self)

    def mean(self):
        return mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def relu(self):
        return relu(self)


class Parameter(Tensor):
    """A named leaf tensor that always carries a gradient buffer."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: Sequence[Tensor], vjp: Callable, op: str) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, _parents=parents if needs else (),
                  _vjp=vjp if needs else None, op=op)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape} (no implicit broadcasting)")


def _topo_order(root: Tensor) -> list[Tensor]:
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


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``."""
    if loss.data.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g.astype(node.data.dtype, copy=False)
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mul")
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scale(a: Tensor, s: float) -> Tensor:
    return _make(a.data * s, (a,), lambda g: (g * s,), "scale")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-a.data))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def abs_(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def huber(a: Tensor, delta: float) -> Tensor:
    """Elementwise Huber penalty of a residual tensor."""
    r = a.data
    small = np.abs(r) <= delta
    out = np.where(small, 0.5 * r * r, delta * (np.abs(r) - 0.5 * delta))
    dr = np.where(small, r, delta * np.sign(r))
    return _make(out, (a,), lambda g: (g * dr,), "huber")


# ---------------------------------------------------------------- reductions

def sum_(a: Tensor) -> Tensor:
    return _make(a.data.sum(), (a,), lambda g: (np.full_like(a.data, g),), "sum")


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    return _make(a.data.mean(), (a,), lambda g: (np.full_like(a.data, g / n),), "mean")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    if x.ndim == 0 or x.shape[axis] == 0:
        raise DimensionError(f"softmax: empty axis {axis} for shape {x.shape}")
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    # summing in sorted order makes the result exactly permutation-equivariant
    y = e / np.sort(e, axis=axis).sum(axis=axis, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (a,), vjp, "softmax")


# ---------------------------------------------------------------- linear algebra / shape

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got {a.shape}")
    return _make(a.data.T, (a,), lambda g: (g.T,), "transpose")


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != a.data.size:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}")
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def index_select(a: Tensor, index) -> Tensor:
    """Indexing (slices or integer arrays); repeated indices accumulate in the VJP."""
    out = a.data[index]

    def vjp(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(out, (a,), vjp, "index")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    nd = ts[0].data.ndim
    ax = axis % nd
    for t in ts[1:]:
        if t.data.ndim != nd or any(t.shape[i] != ts[0].shape[i] for i in range(nd) if i != ax):
            raise DimensionError(f"concat: incompatible shapes {[t.shape for t in ts]} along axis {axis}")
    sizes = [t.shape[ax] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(ts)))

    return _make(np.concatenate([t.data for t in ts], axis=ax), ts, vjp, "concat")


def repeat_rows(v: Tensor, n: int) -> Tensor:
    """Stack a vector ``n`` times into an ``n x len(v)`` matrix."""
    if v.data.ndim != 1:
        raise DimensionError(f"repeat_rows expects a vector, got {v.shape}")
    return _make(np.tile(v.data, (n, 1)), (v,), lambda g: (g.sum(axis=0),), "repeat_rows")


def bmv(mats: np.ndarray, x: Tensor) -> Tensor:
    """Batched matrix-vector product with constant matrices: out[i] = mats[i] @ x[i]."""
    if mats.ndim != 3 or x.data.ndim != 2 or mats.shape[0] != x.shape[0] or mats.shape[2] != x.shape[1]:
        raise DimensionError(f"bmv: matrices {mats.shape} incompatible with vectors {x.shape}")
    return _make(np.einsum("nij,nj->ni", mats, x.data), (x,),
                 lambda g: (np.einsum("nij,ni->nj", mats, g),), "bmv")


def normalize_rows(x: Tensor) -> Tensor:
    norm = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True))
    y = x.data / norm

    def vjp(g):
        return ((g - y * (g * y).sum(axis=1, keepdims=True)) / norm,)

    return _make(y, (x,), vjp, "normalize_rows")


def avg_pool2(a: Tensor) -> Tensor:
    """2x2 mean pooling of an H x W x C image (odd trailing rows/cols dropped)."""
    h, w = a.shape[0] // 2, a.shape[1] // 2
    crop = a.data[: 2 * h, : 2 * w]
    out = 0.25 * (crop[0::2, 0::2] + crop[1::2, 0::2] + crop[0::2, 1::2] + crop[1::2, 1::2])

    def vjp(g):
        full = np.zeros_like(a.data)
        q = 0.25 * g
        full[0 : 2 * h : 2, 0 : 2 * w : 2] = q
        full[1 : 2 * h : 2, 0 : 2 * w : 2] = q
        full[0 : 2 * h : 2, 1 : 2 * w : 2] = q
        full[1 : 2 * h : 2, 1 : 2 * w : 2] = q
        return (full,)

    return _make(out, (a,), vjp, "avg_pool2")


def diff(a: Tensor, axis: int) -> Tensor:
    """Forward difference along ``axis`` (length shrinks by one)."""
    out = np.diff(a.data, axis=axis)

    def vjp(g):
        full = np.zeros_like(a.data)
        n = a.shape[axis]
        lo = [slice(None)] * a.data.ndim
        hi = [slice(None)] * a.data.ndim
        lo[axis] = slice(0, n - 1)
        hi[axis] = slice(1, n)
        full[tuple(hi)] += g
        full[tuple(lo)] -= g
        return (full,)

    return _make(out, (a,), vjp, "diff")


def custom(data, parents: Sequence[Tensor], vjp: Callable, op: str) -> Tensor:
    """Record a hand-differentiated op. ``vjp(g)`` returns one gradient per parent."""
    return _make(data, [as_tensor(p) for p in parents], vjp, op)
