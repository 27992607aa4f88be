"""Dense float64 tensors with reverse-mode automatic differentiation.

Small, CPU-only, and deliberately minimal: just the operations the toy
encoders and the PGD loss need. Values are stored as C-contiguous
float64 numpy arrays that are frozen after construction; every op
returns a fresh tensor and registers a vector-Jacobian closure, so
:func:`backward` can walk the graph once in reverse topological order.

Shape rules are strict. Binary elementwise ops accept equal shapes, or
a second operand whose shape is a trailing suffix of the first (the
bias/affine broadcast the encoders use). ``matmul`` is 2-D only.

Gradients flow only through tensors created with ``requires_grad=True``
(or derived from one). Non-finite values are rejected in the public
constructor; intermediate results are additionally checked when debug
checks are enabled via :func:`set_debug_checks`.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import ContractError, NonFiniteError, ShapeMismatchError

_debug_checks = False

# gelu tanh-approximation constants
_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715

LAYER_NORM_EPS = 1e-5


def set_debug_checks(enabled: bool) -> None:
    """Toggle finiteness checks on every op output (off by default)."""
    global _debug_checks
    _debug_checks = bool(enabled)


def debug_checks_enabled() -> bool:
    return _debug_checks


class Tensor:
    """Immutable dense float64 tensor, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64, order="C")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor constructed with NaN/Inf values")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Optional[Callable[[np.ndarray], tuple]] = None

    @classmethod
    def _result(cls, arr: np.ndarray, parents: tuple["Tensor", ...], vjp) -> "Tensor":
        """Internal constructor for op outputs; skips the copy."""
        out = cls.__new__(cls)
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        if _debug_checks and not np.all(np.isfinite(arr)):
            raise NonFiniteError("op produced NaN/Inf values")
        arr.flags.writeable = False
        out.data = arr
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = parents
            out._vjp = vjp
        else:
            out._parents = ()
            out._vjp = None
        return out

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
        if self.data.size != 1:
            raise ShapeMismatchError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def is_leaf(self) -> bool:
        return self._vjp is None

    # -- sugar ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def reshape(self, shape):
        return reshape(self, shape)

    def sum(self):
        return tsum(self)

    def mean(self, axis=None):
        return mean(self, axis)

    def __repr__(self):
        grad = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{grad})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _suffix_broadcast_ok(big: tuple, small: tuple) -> bool:
    return len(small) <= len(big) and big[len(big) - len(small):] == small


def _reduce_to(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient over the leading axes introduced by suffix broadcast."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    return grad


# -- elementwise binary ops ------------------------------------------------

def _binary(op_name, a, b, fwd, da, db) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape and not _suffix_broadcast_ok(a.shape, b.shape):
        raise ShapeMismatchError(
            f"{op_name}: shapes {a.shape} and {b.shape} are neither equal nor "
            f"suffix-broadcastable"
        )
    out = fwd(a.data, b.data)

    def vjp(g):
        return da(g, a.data, b.data), _reduce_to(db(g, a.data, b.data), b.shape)

    return Tensor._result(out, (a, b), vjp)


def add(a, b) -> Tensor:
    return _binary("add", a, b, lambda x, y: x + y,
                   lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b) -> Tensor:
    return _binary("sub", a, b, lambda x, y: x - y,
                   lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b) -> Tensor:
    return _binary("mul", a, b, lambda x, y: x * y,
                   lambda g, x, y: g * y, lambda g, x, y: g * x)


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return Tensor._result(a.data * c, (a,), lambda g: (g * c,))


# -- elementwise unary ops -------------------------------------------------

def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0.0  # subgradient at 0 is 0
    return Tensor._result(np.where(mask, a.data, 0.0), (a,),
                          lambda g: (g * mask,))


def gelu(a) -> Tensor:
    """gelu via the tanh approximation 0.5*x*(1 + tanh(c*(x + 0.044715*x^3)))."""
    a = _as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + _GELU_A * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def vjp(g):
        dinner = _GELU_C * (1.0 + 3.0 * _GELU_A * x ** 2)
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * dinner
        return (g * d,)

    return Tensor._result(out, (a,), vjp)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return Tensor._result(out, (a,), lambda g: (g * out,))


# -- normalization and softmax ----------------------------------------------

def layer_norm(a, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize over the last axis to zero mean / unit variance (no affine)."""
    a = _as_tensor(a)
    if a.ndim == 0:
        raise ShapeMismatchError("layer_norm needs at least one axis")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (x - mu) * inv

    def vjp(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return Tensor._result(y, (a,), vjp)


def softmax(a, axis: int) -> Tensor:
    """Softmax along ``axis`` with max-subtraction for stability."""
    a = _as_tensor(a)
    ax = axis if axis >= 0 else a.ndim + axis
    if ax < 0 or ax >= a.ndim:
        raise ShapeMismatchError(f"softmax: axis {axis} out of range for shape {a.shape}")
    if a.shape[ax] == 0:
        raise ShapeMismatchError(f"softmax over empty axis {axis} of shape {a.shape}")
    z = a.data - a.data.max(axis=ax, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=ax, keepdims=True)

    def vjp(g):
        dot_ = (g * y).sum(axis=ax, keepdims=True)
        return (y * (g - dot_),)

    return Tensor._result(y, (a,), vjp)


# -- reductions --------------------------------------------------------------

def tsum(a) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    a = _as_tensor(a)
    out = np.asarray(a.data.sum())
    return Tensor._result(out, (a,), lambda g: (np.broadcast_to(g, a.shape),))


def mean(a, axis: Optional[int] = None) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        out = np.asarray(a.data.mean())
        n = a.size
        return Tensor._result(out, (a,),
                              lambda g: (np.broadcast_to(g / n, a.shape),))
    ax = axis if axis >= 0 else a.ndim + axis
    n = a.shape[ax]
    out = a.data.mean(axis=ax)

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g / n, ax), a.shape),)

    return Tensor._result(out, (a,), vjp)


# -- structural ops ----------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape) if isinstance(shape, Iterable) else (shape,)
    out = a.data.reshape(shape).copy()
    return Tensor._result(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ShapeMismatchError(f"transpose expects a matrix, got shape {a.shape}")
    return Tensor._result(a.data.T.copy(), (a,), lambda g: (g.T,))


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ShapeMismatchError("concat of zero tensors")
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(
            np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(parts))
        )

    return Tensor._result(out, tuple(parts), vjp)


def narrow(a, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice [start, stop) along ``axis``."""
    a = _as_tensor(a)
    ax = axis if axis >= 0 else a.ndim + axis
    if not (0 <= start <= stop <= a.shape[ax]):
        raise ShapeMismatchError(
            f"narrow: [{start}, {stop}) invalid for axis {axis} of shape {a.shape}")
    idx = [slice(None)] * a.ndim
    idx[ax] = slice(start, stop)
    idx = tuple(idx)
    out = a.data[idx].copy()

    def vjp(g):
        full = np.zeros(a.shape)
        full[idx] = g
        return (full,)

    return Tensor._result(out, (a,), vjp)


def take_flat(a, indices: np.ndarray) -> Tensor:
    """Gather from the row-major flattening of ``a``; returns a 1-D tensor."""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    out = a.data.reshape(-1)[idx]

    def vjp(g):
        flat = np.zeros(a.size)
        np.add.at(flat, idx, g)
        return (flat.reshape(a.shape),)

    return Tensor._result(out, (a,), vjp)


def gather_rows(a, rows: np.ndarray) -> Tensor:
    """Select rows of a matrix by index (embedding-table lookup)."""
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ShapeMismatchError(f"gather_rows expects a matrix, got shape {a.shape}")
    idx = np.asarray(rows, dtype=np.intp)
    out = a.data[idx]

    def vjp(g):
        full = np.zeros(a.shape)
        np.add.at(full, idx, g)
        return (full,)

    return Tensor._result(out, (a,), vjp)


# -- matrix product ----------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(
            f"matmul: shapes {a.shape} and {b.shape} do not compose")
    out = a.data @ b.data

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor._result(out, (a, b), vjp)


# -- distances, products, normalization --------------------------------------

def l2_dist_sq(a, b) -> Tensor:
    """Sum of squared elementwise differences, as a scalar tensor."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape("l2_dist_sq", a, b)
    d = a.data - b.data
    out = np.asarray((d * d).sum())

    def vjp(g):
        gd = 2.0 * g * d
        return gd, -gd

    return Tensor._result(out, (a, b), vjp)


def dot(a, b) -> Tensor:
    """Inner product of two vectors, as a scalar tensor."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 1 or b.ndim != 1:
        raise ShapeMismatchError(f"dot expects vectors, got {a.shape} and {b.shape}")
    _check_same_shape("dot", a, b)
    out = np.asarray(a.data @ b.data)

    def vjp(g):
        return g * b.data, g * a.data

    return Tensor._result(out, (a, b), vjp)


def l2_normalize(a) -> Tensor:
    """Vector scaled to unit L2 norm. Zero vectors are rejected."""
    a = _as_tensor(a)
    if a.ndim != 1:
        raise ShapeMismatchError(f"l2_normalize expects a vector, got shape {a.shape}")
    n = float(np.sqrt((a.data * a.data).sum()))
    if n == 0.0:
        raise NonFiniteError("l2_normalize of a zero vector")
    y = a.data / n

    def vjp(g):
        return ((g - y * (y @ g)) / n,)

    return Tensor._result(y, (a,), vjp)


# -- sign (outside the graph) -------------------------------------------------

def sign(a) -> Tensor:
    """Elementwise -1/0/+1; never tracked (used only for the PGD step)."""
    a = _as_tensor(a)
    return Tensor(np.sign(a.data))


# -- reverse pass --------------------------------------------------------------

def _topo_order(loss: Tensor) -> list[Tensor]:
    """Reverse post-order over the grad-tracked subgraph reachable from loss."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss: Tensor, leaves: Optional[Sequence[Tensor]] = None) -> dict:
    """Accumulate d(loss)/d(leaf) for every grad-tracked leaf.

    Returns a dict keyed by leaf tensor (object identity) whose values
    are gradient tensors of matching shape. Leaves passed explicitly but
    not reachable from the loss get zero gradients.
    """
    if loss.data.size != 1:
        raise ShapeMismatchError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("backward: loss is not reachable from any grad-tracked input")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    result: dict[Tensor, Tensor] = {}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            result[node] = Tensor(g)
            continue
        parent_grads = node._vjp(g)
        for parent, pg in zip(node._parents, parent_grads):
            if not parent.requires_grad or pg is None:
                continue
            pg = np.asarray(pg, dtype=np.float64)
            if _debug_checks and not np.all(np.isfinite(pg)):
                raise NonFiniteError("backward produced NaN/Inf gradients")
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else acc + pg
    if leaves is not None:
        for leaf in leaves:
            if leaf not in result:
                result[leaf] = Tensor(np.zeros(leaf.shape))
    return result
