"""Reverse-mode automatic differentiation over dense float64 arrays.

Minimal tape-based engine in the micrograd style: every operation
produces a :class:`Tensor` that records its parents and a closure
computing vector-Jacobian products.  :func:`backward` runs an iterative
(non-recursive) topological sort, so rollout graphs hundreds of steps
deep never hit the interpreter's recursion limit.

Conventions:

* all data is float64; gradients have the shape of their tensor;
* ``backward(loss)`` computes gradients of exactly that scalar — it
  first clears the gradients of every node reachable from ``loss``, so
  two backward passes over one graph never mix (callers that want sums
  accumulate outside the engine);
* elementwise ops broadcast like numpy, with gradients summed back to
  the operand shape;
* boolean masks and other non-differentiable arguments are plain numpy
  arrays, never tensors.

Every operation's gradient is validated against central finite
differences in the test suite.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ShapeError

__all__ = [
    "Tensor", "backward",
    "add", "sub", "mul", "neg", "scale", "matmul",
    "concat", "stack", "split", "reshape", "transpose",
    "gather_rows", "mean_over_rows", "asum",
    "tanh", "exp", "log", "leaky_relu",
    "l1_norm", "l2_norm", "l2_norm_rows",
    "where_mask", "masked_softmax", "batch_norm", "RunningStats",
    "detach",
]

Array = np.ndarray


def _as_array(x) -> Array:
    return np.asarray(x, dtype=np.float64)


class Tensor:
    """A float64 array plus the recorded operation that produced it."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.grad: Array | None = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[Array], tuple[Array | None, ...]] | None = None

    @classmethod
    def _from_op(cls, data: Array, parents: tuple["Tensor", ...],
                 vjp: Callable[[Array], tuple[Array | None, ...]],
                 op: str) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.grad = None
        t.requires_grad = True
        t.op = op
        t._parents = parents
        t._vjp = vjp
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = "+grad" if self.requires_grad else "const"
        return f"Tensor(shape={self.data.shape}, op={self.op}, {flag})"

    # Operator sugar (tests and small expressions; core code calls the
    # module-level functions).
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: Array, parents: tuple[Tensor, ...],
          vjp: Callable[[Array], tuple[Array | None, ...]], op: str) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor._from_op(data, parents, vjp, op)
    return Tensor(data)


def _toposort(root: Tensor) -> list[Tensor]:
    """Parents-before-children ordering of the grad-requiring subgraph,
    computed iteratively."""
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
    """Populate ``.grad`` with d(loss)/d(node) for every grad-requiring
    node reachable from the scalar ``loss``.

    Gradients of reachable nodes are cleared first, so each call stands
    alone even when several losses share a forward graph.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not require grad; nothing to differentiate")
    order = _toposort(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._vjp is None or node.grad is None:
            continue
        grads = node._vjp(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None or not parent.requires_grad:
                continue
            parent.grad = g if parent.grad is None else parent.grad + g


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# Arithmetic
# ---------------------------------------------------------------------------

def add(x, y) -> Tensor:
    x, y = _lift(x), _lift(y)
    data = x.data + y.data

    def vjp(g: Array):
        return (_unbroadcast(g, x.data.shape), _unbroadcast(g, y.data.shape))

    return _node(data, (x, y), vjp, "add")


def sub(x, y) -> Tensor:
    x, y = _lift(x), _lift(y)
    data = x.data - y.data

    def vjp(g: Array):
        return (_unbroadcast(g, x.data.shape), _unbroadcast(-g, y.data.shape))

    return _node(data, (x, y), vjp, "sub")


def mul(x, y) -> Tensor:
    x, y = _lift(x), _lift(y)
    data = x.data * y.data
    xd, yd = x.data, y.data

    def vjp(g: Array):
        return (_unbroadcast(g * yd, xd.shape), _unbroadcast(g * xd, yd.shape))

    return _node(data, (x, y), vjp, "mul")


def neg(x) -> Tensor:
    x = _lift(x)

    def vjp(g: Array):
        return (-g,)

    return _node(-x.data, (x,), vjp, "neg")


def scale(x, c: float) -> Tensor:
    """Multiply by a python scalar constant (no gradient to ``c``)."""
    x = _lift(x)
    c = float(c)

    def vjp(g: Array):
        return (g * c,)

    return _node(x.data * c, (x,), vjp, "scale")


def matmul(x, y) -> Tensor:
    """``numpy.matmul`` semantics, including 1-D operands and batched
    stacks with broadcasting."""
    x, y = _lift(x), _lift(y)
    if x.ndim == 0 or y.ndim == 0:
        raise ShapeError("matmul operands must be at least 1-D")
    x1, y1 = x.ndim == 1, y.ndim == 1
    xd = x.data[None, :] if x1 else x.data
    yd = y.data[:, None] if y1 else y.data
    try:
        full = np.matmul(xd, yd)
    except ValueError as exc:
        raise ShapeError(f"matmul {x.data.shape} @ {y.data.shape}: {exc}") from None
    data = full
    if x1:
        data = data[..., 0, :]
    if y1:
        data = data[..., 0]

    def vjp(g: Array):
        gf = g
        if y1:
            gf = gf[..., None]
        if x1:
            gf = gf[..., None, :]
        gx = np.matmul(gf, np.swapaxes(yd, -1, -2))
        gy = np.matmul(np.swapaxes(xd, -1, -2), gf)
        gx = _unbroadcast(gx, xd.shape)
        gy = _unbroadcast(gy, yd.shape)
        if x1:
            gx = gx[0]
        if y1:
            gy = gy[:, 0]
        return (gx, gy)

    return _node(data, (x, y), vjp, "matmul")


# ---------------------------------------------------------------------------
# Shape surgery
# ---------------------------------------------------------------------------

def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [_lift(t) for t in tensors]
    if not ts:
        raise ShapeError("concat needs at least one tensor")
    data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g: Array):
        idx = [slice(None)] * g.ndim
        outs = []
        for i in range(len(ts)):
            idx[axis] = slice(offsets[i], offsets[i + 1])
            outs.append(g[tuple(idx)])
        return tuple(outs)

    return _node(data, tuple(ts), vjp, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [_lift(t) for t in tensors]
    if not ts:
        raise ShapeError("stack needs at least one tensor")
    data = np.stack([t.data for t in ts], axis=axis)

    def vjp(g: Array):
        parts = np.moveaxis(g, axis, 0)
        return tuple(parts[i] for i in range(len(ts)))

    return _node(data, tuple(ts), vjp, "stack")


def split(x: Tensor, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    """Split into consecutive pieces of the given sizes along ``axis``."""
    x = _lift(x)
    if sum(sizes) != x.data.shape[axis]:
        raise ShapeError(
            f"split sizes {list(sizes)} do not cover axis {axis} of {x.data.shape}")
    offsets = np.cumsum([0] + list(sizes))
    outs: list[Tensor] = []
    for i in range(len(sizes)):
        idx = [slice(None)] * x.data.ndim
        idx[axis] = slice(offsets[i], offsets[i + 1])
        idx = tuple(idx)
        piece = x.data[idx]

        def vjp(g: Array, idx=idx):
            z = np.zeros_like(x.data)
            z[idx] = g
            return (z,)

        outs.append(_node(piece, (x,), vjp, "split"))
    return outs


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    x = _lift(x)
    old = x.data.shape

    def vjp(g: Array):
        return (g.reshape(old),)

    return _node(x.data.reshape(shape), (x,), vjp, "reshape")


def transpose(x: Tensor) -> Tensor:
    """Matrix transpose of a 2-D tensor."""
    x = _lift(x)
    if x.ndim != 2:
        raise ShapeError(f"transpose needs a matrix, got {x.data.shape}")

    def vjp(g: Array):
        return (g.T,)

    return _node(x.data.T, (x,), vjp, "transpose")


def gather_rows(x: Tensor, idx) -> Tensor:
    """Select rows of a matrix: ``x[idx]``.  An integer index yields one
    row; an index array yields a row stack.  The backward pass
    scatter-adds, so repeated indices accumulate."""
    x = _lift(x)
    if x.ndim < 1:
        raise ShapeError("gather_rows needs at least a 1-D tensor")
    scalar = np.isscalar(idx) or (isinstance(idx, np.ndarray) and idx.ndim == 0)
    index = np.asarray(idx, dtype=np.int64)

    def vjp(g: Array):
        z = np.zeros_like(x.data)
        np.add.at(z, index, g)
        return (z,)

    return _node(x.data[int(index)] if scalar else x.data[index], (x,), vjp, "gather_rows")


def mean_over_rows(x: Tensor) -> Tensor:
    """Mean over axis 0 of a matrix: ``(N, d) -> (d,)``."""
    x = _lift(x)
    if x.ndim != 2:
        raise ShapeError(f"mean_over_rows needs a matrix, got {x.data.shape}")
    n = x.data.shape[0]

    def vjp(g: Array):
        return (np.broadcast_to(g / n, x.data.shape),)

    return _node(x.data.mean(axis=0), (x,), vjp, "mean_over_rows")


def asum(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    x = _lift(x)
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g: Array):
        if axis is None:
            return (np.broadcast_to(g, x.data.shape).copy(),)
        ge = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(ge, x.data.shape).copy(),)

    return _node(data, (x,), vjp, "asum")


# ---------------------------------------------------------------------------
# Nonlinearities
# ---------------------------------------------------------------------------

def tanh(x) -> Tensor:
    x = _lift(x)
    out = np.tanh(x.data)

    def vjp(g: Array):
        return ((1.0 - out * out) * g,)

    return _node(out, (x,), vjp, "tanh")


def exp(x) -> Tensor:
    x = _lift(x)
    out = np.exp(x.data)

    def vjp(g: Array):
        return (out * g,)

    return _node(out, (x,), vjp, "exp")


def log(x) -> Tensor:
    """Natural log; the caller guarantees positive input."""
    x = _lift(x)
    xd = x.data

    def vjp(g: Array):
        return (g / xd,)

    return _node(np.log(xd), (x,), vjp, "log")


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    x = _lift(x)
    pos = x.data > 0

    def vjp(g: Array):
        return (np.where(pos, g, slope * g),)

    return _node(np.where(pos, x.data, slope * x.data), (x,), vjp, "leaky_relu")


# ---------------------------------------------------------------------------
# Norms
# ---------------------------------------------------------------------------

def l1_norm(x) -> Tensor:
    """Sum of absolute values (scalar).  Subgradient 0 at exact zeros."""
    x = _lift(x)
    xd = x.data

    def vjp(g: Array):
        return (np.sign(xd) * g,)

    return _node(np.abs(xd).sum(), (x,), vjp, "l1_norm")


def l2_norm(x) -> Tensor:
    """Euclidean norm of the flattened tensor (scalar).  Gradient at the
    origin is defined as 0."""
    x = _lift(x)
    xd = x.data
    n = float(np.sqrt((xd * xd).sum()))

    def vjp(g: Array):
        if n == 0.0:
            return (np.zeros_like(xd),)
        return ((xd / n) * g,)

    return _node(np.float64(n), (x,), vjp, "l2_norm")


def l2_norm_rows(x: Tensor) -> Tensor:
    """Row-wise Euclidean norms of a matrix: ``(N, d) -> (N,)``."""
    x = _lift(x)
    if x.ndim != 2:
        raise ShapeError(f"l2_norm_rows needs a matrix, got {x.data.shape}")
    xd = x.data
    norms = np.sqrt((xd * xd).sum(axis=1))

    def vjp(g: Array):
        safe = np.where(norms == 0.0, 1.0, norms)
        out = (xd / safe[:, None]) * g[:, None]
        out[norms == 0.0] = 0.0
        return (out,)

    return _node(norms, (x,), vjp, "l2_norm_rows")


# ---------------------------------------------------------------------------
# Masking, softmax, batch norm
# ---------------------------------------------------------------------------

def where_mask(x: Tensor, valid: Array, fill: float) -> Tensor:
    """Replace entries where ``valid`` is False with the constant
    ``fill``; gradient flows only through valid entries."""
    x = _lift(x)
    valid = np.asarray(valid, dtype=bool)
    data = np.where(valid, x.data, fill)

    def vjp(g: Array):
        return (_unbroadcast(np.where(valid, g, 0.0), x.data.shape),)

    return _node(data, (x,), vjp, "where_mask")


def masked_softmax(x: Tensor, valid: Array | None = None, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` restricted to entries where ``valid`` is
    True; masked entries come out exactly 0.

    The max over valid entries is subtracted before exponentiation, so
    arbitrarily large logits are safe.  Every slice along ``axis`` must
    contain at least one valid entry.
    """
    x = _lift(x)
    xd = x.data
    if valid is None:
        v = np.ones_like(xd, dtype=bool)
    else:
        v = np.broadcast_to(np.asarray(valid, dtype=bool), xd.shape)
    if not v.any(axis=axis).all():
        raise ValueError("masked_softmax: some slice has no valid entry")
    shifted = np.where(v, xd, -np.inf)
    m = shifted.max(axis=axis, keepdims=True)
    e = np.exp(np.where(v, xd - m, 0.0)) * v
    p = e / e.sum(axis=axis, keepdims=True)

    def vjp(g: Array):
        inner = (g * p).sum(axis=axis, keepdims=True)
        return (p * (g - inner),)

    return _node(p, (x,), vjp, "masked_softmax")


class RunningStats:
    """Exponential-moving-average mean/variance buffers for batch norm."""

    def __init__(self, features: int):
        self.mean = np.zeros(features)
        self.var = np.ones(features)

    def copy_from(self, other: "RunningStats") -> None:
        self.mean = other.mean.copy()
        self.var = other.var.copy()

    def state(self) -> dict[str, Array]:
        return {"mean": self.mean, "var": self.var}


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor,
               running: RunningStats | None = None,
               training: bool = True,
               update_running: bool = False,
               momentum: float = 0.1,
               eps: float = 1e-5) -> Tensor:
    """Per-feature batch normalization over the rows of a matrix.

    Training mode normalizes with the batch's biased variance (and can
    fold the batch statistics into ``running`` with the given momentum,
    using the unbiased variance for the update, as is conventional);
    eval mode normalizes with the running statistics.  ``gamma`` and
    ``beta`` are learnable per-feature scale and shift.
    """
    x, gamma, beta = _lift(x), _lift(gamma), _lift(beta)
    if x.ndim != 2:
        raise ShapeError(f"batch_norm needs a (rows, features) matrix, got {x.data.shape}")
    rows, feats = x.data.shape
    if gamma.data.shape != (feats,) or beta.data.shape != (feats,):
        raise ShapeError(
            f"gamma/beta must be ({feats},), got {gamma.data.shape}/{beta.data.shape}")

    if training:
        mu = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        if update_running:
            if running is None:
                raise ValueError("update_running=True needs a RunningStats")
            unbiased = var * (rows / (rows - 1)) if rows > 1 else var
            running.mean = (1.0 - momentum) * running.mean + momentum * mu
            running.var = (1.0 - momentum) * running.var + momentum * unbiased
    else:
        if running is None:
            raise ValueError("eval mode needs a RunningStats")
        mu = running.mean
        var = running.var

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out = gamma.data * xhat + beta.data
    gd = gamma.data

    if training:
        def vjp(g: Array):
            dxhat = g * gd
            dx = inv_std * (dxhat - dxhat.mean(axis=0)
                            - xhat * (dxhat * xhat).mean(axis=0))
            return (dx, (g * xhat).sum(axis=0), g.sum(axis=0))
    else:
        def vjp(g: Array):
            return (g * gd * inv_std, (g * xhat).sum(axis=0), g.sum(axis=0))

    return _node(out, (x, gamma, beta), vjp, "batch_norm")


def detach(x: Tensor) -> Tensor:
    """A constant view of ``x``: same data, no graph connection."""
    return Tensor(x.data)
