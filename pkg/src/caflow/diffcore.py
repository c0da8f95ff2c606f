"""Minimal reverse-mode automatic differentiation over numpy arrays.

A :class:`Tensor` wraps an ``ndarray``. Operations on tensors that require
gradients record their parents and a vector-Jacobian rule; :func:`backward`
walks the resulting DAG once in reverse topological order and accumulates
gradients into every node that requires them.

Arrays keep the dtype they were created with, so the precision profile is
chosen by the caller (float64 for gradient checks, float32 for training).
"""

import numpy as np

from . import kernels
from .errors import ContractError, DomainError, ShapeError

__all__ = [
    "Tensor", "tensor", "parameter", "backward",
    "add", "sub", "mul", "div", "neg", "matmul", "sum", "mean",
    "relu", "tanh", "exp", "log", "square", "sqrt", "softmax",
    "concat", "stack", "take", "reshape", "transpose", "dropout",
    "mse", "layer_norm", "maximum0", "logsumexp", "log_softmax",
]


class Tensor:
    """Array value plus the bookkeeping needed for reverse-mode AD."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _vjp=None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._vjp = _vjp
        self.name = name

    # -- introspection -------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    __hash__ = object.__hash__

    # -- operators -----------------------------------------------------------

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return _getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def tensor(data, dtype=np.float64, requires_grad=False, name=None):
    """Build a tensor from array-like ``data`` with an explicit dtype."""
    return Tensor(np.array(data, dtype=dtype), requires_grad=requires_grad, name=name)


def parameter(data, name=None):
    """A leaf tensor that requires gradients."""
    return Tensor(np.asarray(data), requires_grad=True, name=name)


def _lift(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float64
    return Tensor(np.asarray(x, dtype=dtype))


def _node(data, parents, vjp):
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _vjp=vjp)
    return Tensor(data)


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# -- elementwise arithmetic ----------------------------------------------------


def add(a, b):
    """Elementwise sum with numpy broadcasting (covers row-vector bias adds)."""
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b):
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b):
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    _check_broadcast(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def vjp(g):
        gb = -g * out / bd
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(gb, bd.shape)

    return _node(out, (a, b), vjp)


def neg(a):
    return _node(-a.data, (a,), lambda g: (-g,))


# -- linear algebra ------------------------------------------------------------


def matmul(a, b):
    """Batched matrix product ``a @ b`` over the last two axes."""
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None
    ad, bd = a.data, b.data

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(ad, -1, -2), g) if b.requires_grad else None
        return (None if ga is None else _unbroadcast(ga, ad.shape),
                None if gb is None else _unbroadcast(gb, bd.shape))

    return _node(out, (a, b), vjp)


# -- reductions ----------------------------------------------------------------


def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))
    return _node(out, (x,), lambda g: (_expand_reduced(g, shape, axis, keepdims),))


def mean(x, axis=None, keepdims=False):
    shape = x.shape
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        count = int(np.prod([shape[ax] for ax in axes]))
    out = np.asarray(x.data.mean(axis=axis, keepdims=keepdims))
    scale = 1.0 / count
    return _node(out, (x,), lambda g: (_expand_reduced(g * scale, shape, axis, keepdims),))


# -- pointwise nonlinearities --------------------------------------------------


def relu(x):
    pos = x.data > 0
    return _node(x.data * pos, (x,), lambda g: (g * pos,))


maximum0 = relu


def tanh(x):
    out = np.tanh(x.data)
    return _node(out, (x,), lambda g: (g * (1 - out * out),))


def exp(x):
    out = np.exp(x.data)
    return _node(out, (x,), lambda g: (g * out,))


def log(x):
    if np.any(x.data <= 0):
        raise DomainError("log: input must be strictly positive")
    xd = x.data
    return _node(np.log(xd), (x,), lambda g: (g / xd,))


def square(x):
    xd = x.data
    return _node(xd * xd, (x,), lambda g: (2 * g * xd,))


def sqrt(x):
    if np.any(x.data < 0):
        raise DomainError("sqrt: input must be non-negative")
    out = np.sqrt(x.data)
    return _node(out, (x,), lambda g: (g / (2 * out),))


def softmax(x, axis=-1):
    """Numerically stable softmax along ``axis``."""
    if not -x.ndim <= axis < x.ndim:
        raise ContractError(f"softmax: axis {axis} invalid for shape {x.shape}")
    moved = np.moveaxis(x.data, axis, -1)
    lead = moved.shape
    rows = np.ascontiguousarray(moved.reshape(-1, lead[-1]))
    y_rows = kernels.softmax_rows(rows)
    out = np.moveaxis(y_rows.reshape(lead), -1, axis)

    def vjp(g):
        g_rows = np.ascontiguousarray(np.moveaxis(g, axis, -1).reshape(-1, lead[-1]))
        gx = kernels.softmax_rows_grad(y_rows, g_rows)
        return (np.moveaxis(gx.reshape(lead), -1, axis),)

    return _node(out, (x,), vjp)


def logsumexp(x, axis=-1, keepdims=False):
    """Stable ``log(sum(exp(x)))`` along ``axis``."""
    xd = x.data
    peak = np.max(xd, axis=axis, keepdims=True)
    shifted = np.exp(xd - peak)
    total = shifted.sum(axis=axis, keepdims=True)
    out = np.log(total) + peak
    weights = shifted / total

    def vjp(g):
        g = g if keepdims else np.expand_dims(g, axis)
        return (g * weights,)

    return _node(out if keepdims else np.squeeze(out, axis=axis), (x,), vjp)


def log_softmax(x, axis=-1):
    return x - logsumexp(x, axis=axis, keepdims=True)


# -- structural ops ------------------------------------------------------------


def concat(xs, axis=0):
    xs = [_lift(x) for x in xs]
    out = np.concatenate([x.data for x in xs], axis=axis)
    bounds = np.cumsum([0] + [x.shape[axis] for x in xs])

    def vjp(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(xs)))

    return _node(out, tuple(xs), vjp)


def stack(xs, axis=0):
    xs = [_lift(x) for x in xs]
    ax = axis if axis >= 0 else axis + xs[0].ndim + 1
    return concat([reshape(x, x.shape[:ax] + (1,) + x.shape[ax:]) for x in xs], axis=ax)


def _getitem(x, index):
    shape, dtype = x.shape, x.dtype

    def vjp(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, index, g)
        return (out,)

    return _node(x.data[index], (x,), vjp)


def take(x, indices, axis=0):
    """Gather ``indices`` along ``axis``; repeated indices accumulate gradients."""
    indices = np.asarray(indices, dtype=np.intp)
    shape, dtype = x.shape, x.dtype

    def vjp(g):
        out = np.zeros(shape, dtype=dtype)
        moved = np.moveaxis(out, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        return (out,)

    return _node(np.take(x.data, indices, axis=axis), (x,), vjp)


def reshape(x, shape):
    old = x.shape
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes=None):
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


# -- composite helpers ---------------------------------------------------------


def dropout(x, p, rng, training):
    """Inverted dropout. Identity when ``training`` is false or ``p == 0``."""
    if not training or p == 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise DomainError(f"dropout: rate must lie in [0, 1), got {p}")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)
    return _node(x.data * keep, (x,), lambda g: (g * keep,))


def mse(a, b):
    """Mean of squared elementwise differences."""
    return mean(square(sub(a, b)))


def layer_norm(x, gain=None, bias=None, eps=1e-5):
    """Normalise over the last axis, then apply optional affine parameters."""
    mu = mean(x, axis=-1, keepdims=True)
    centred = sub(x, mu)
    var = mean(square(centred), axis=-1, keepdims=True)
    out = div(centred, sqrt(add(var, eps)))
    if gain is not None:
        out = mul(out, gain)
    if bias is not None:
        out = add(out, bias)
    return out


# -- backward pass -------------------------------------------------------------


def _topological(root):
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss):
    """Back-propagate from a scalar ``loss``; returns ``{leaf: gradient}``.

    Gradients are also stored on ``.grad`` of every node that requires them.
    Existing ``.grad`` values are overwritten, not accumulated across calls.
    """
    if loss.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    order = _topological(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    leaves = {}
    for node in reversed(order):
        g = node.grad
        if node._vjp is None:
            leaves[node] = g
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.array(pg, dtype=parent.dtype)
            else:
                parent.grad = parent.grad + pg
    return leaves
