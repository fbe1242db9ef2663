"""Dense tensor type with eager reverse-mode differentiation.

Values live in numpy arrays (row-major). Storage defaults to float32; float64
tensors are supported so that gradient audits can replay a forward pass in
higher precision. Every op records its parents and a closure mapping the
output gradient to input gradients; :func:`backward` walks that graph in
reverse topological order.
"""

from __future__ import annotations

import contextlib
import os

import numpy as np

from .errors import DimensionError, NumericalError, UsageError

DEFAULT_DTYPE = np.float32

_debug = os.environ.get("TADFORMER_DEBUG", "") not in ("", "0")
# op name -> (input index, scale); test hook for negative controls
_corruptions: dict[str, tuple[int, float]] = {}


def set_debug(enabled: bool) -> None:
    """Toggle the post-op NaN/Inf check."""
    global _debug
    _debug = bool(enabled)


def debug_enabled() -> bool:
    return _debug


@contextlib.contextmanager
def debug_mode(enabled=True):
    prev = _debug
    set_debug(enabled)
    try:
        yield
    finally:
        set_debug(prev)


@contextlib.contextmanager
def corrupt_backward(op: str, input_index: int = 0, scale: float = 1.5):
    """Scale the gradient an op sends to one of its inputs.

    Only meant for negative-control tests of the gradient audit.
    """
    _corruptions[op] = (input_index, scale)
    try:
        yield
    finally:
        _corruptions.pop(op, None)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "__weakref__")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = np.array(data, dtype=dtype or DEFAULT_DTYPE, copy=True, order="C")
        if self.data.ndim == 0:
            self.data = self.data.reshape(())
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.op = None

    @classmethod
    def _wrap(cls, data, requires_grad=False):
        t = cls.__new__(cls)
        t.data = data
        t.grad = None
        t.requires_grad = requires_grad
        t._parents = ()
        t._backward = None
        t.op = None
        return t

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

    @property
    def is_leaf(self):
        return not self._parents

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor._wrap(self.data)

    def astype(self, dtype):
        return Tensor(self.data, requires_grad=self.requires_grad, dtype=dtype)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def backward(self):
        backward(self)

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        from .functional import matmul

        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        return permute(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _raise_item(t):
    raise UsageError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else DEFAULT_DTYPE
    return Tensor._wrap(np.asarray(x, dtype=dtype))


def result(data, parents, op, backward_fn) -> Tensor:
    """Build an op output and attach it to the graph if any parent needs grads."""
    rg = False
    for p in parents:
        if p.requires_grad:
            rg = True
            break
    out = Tensor._wrap(data, rg)
    if rg:
        out._parents = tuple(parents)
        out._backward = backward_fn
        out.op = op
    if _debug and not np.all(np.isfinite(data)):
        raise NumericalError(f"non-finite values produced by op '{op}'")
    return out


def unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _topo(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
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


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into every requires_grad leaf.

    Intermediate gradients are recomputed on every call, so running backward
    twice on one graph without resetting doubles the leaf gradients.
    """
    if root.data.size != 1:
        raise UsageError(f"backward() needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise UsageError("backward() root is not attached to any trainable tensor")
    grads = {id(root): np.ones_like(root.data)}
    for node in reversed(_topo(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        in_grads = node._backward(g)
        corrupt = _corruptions.get(node.op)
        for i, (p, pg) in enumerate(zip(node._parents, in_grads)):
            if pg is None or not p.requires_grad:
                continue
            if corrupt is not None and corrupt[0] == i:
                pg = pg * corrupt[1]
            pg = np.asarray(pg, dtype=p.data.dtype)
            prev = grads.get(id(p))
            grads[id(p)] = pg if prev is None else prev + pg


# ---------------------------------------------------------------------------
# elementwise and shape ops


def add(a, b):
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    sa, sb = a.shape, b.shape
    return result(a.data + b.data, (a, b), "add", lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a, b):
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    sa, sb = a.shape, b.shape
    return result(a.data - b.data, (a, b), "sub", lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a, b):
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    ad, bd = a.data, b.data
    return result(
        ad * bd,
        (a, b),
        "mul",
        lambda g: (unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape)),
    )


def div(a, b):
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    ad, bd = a.data, b.data
    out = ad / bd
    return result(
        out,
        (a, b),
        "div",
        lambda g: (unbroadcast(g / bd, ad.shape), unbroadcast(-g * out / bd, bd.shape)),
    )


def neg(a):
    return result(-a.data, (a,), "neg", lambda g: (-g,))


def exp(a):
    out = np.exp(a.data)
    return result(out, (a,), "exp", lambda g: (g * out,))


def log(a):
    ad = a.data
    return result(np.log(ad), (a,), "log", lambda g: (g / ad,))


def sqrt(a):
    out = np.sqrt(a.data)
    return result(out, (a,), "sqrt", lambda g: (g * 0.5 / out,))


def square(a):
    ad = a.data
    return result(ad * ad, (a,), "square", lambda g: (2.0 * g * ad,))


def sigmoid(a):
    ad = a.data
    out = np.empty_like(ad)
    pos = ad >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-ad[pos]))
    e = np.exp(ad[~pos])
    out[~pos] = e / (1.0 + e)
    return result(out, (a,), "sigmoid", lambda g: (g * out * (1.0 - out),))


def reshape(a, shape):
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {a.shape} to {shape}") from exc
    src = a.shape
    return result(out, (a,), "reshape", lambda g: (g.reshape(src),))


def permute(a, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return result(out, (a,), "permute", lambda g: (g.transpose(inv),))


def transpose(a, ax1=-2, ax2=-1):
    axes = list(range(a.ndim))
    axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
    return permute(a, axes)


def getitem(a, idx):
    out = np.ascontiguousarray(a.data[idx])
    src, dt = a.shape, a.dtype

    def bw(g):
        full = np.zeros(src, dtype=dt)
        full[idx] = g
        return (full,)

    return result(out, (a,), "getitem", bw)


def concat(tensors, axis=0):
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"cannot concatenate shapes {[t.shape for t in tensors]} on axis {axis}") from exc
    splits = np.cumsum(sizes)[:-1]
    return result(out, tensors, "concat", lambda g: tuple(np.split(g, splits, axis=axis)))


def index_select(a, axis, index):
    """Gather entries of ``a`` along ``axis`` (indices may repeat)."""
    index = np.asarray(index, dtype=np.intp)
    out = np.take(a.data, index, axis=axis)
    src, dt = a.shape, a.dtype
    ax = axis % a.ndim

    def bw(g):
        full = np.zeros(src, dtype=dt)
        moved = np.moveaxis(full, ax, 0)
        np.add.at(moved, index, np.moveaxis(g, ax, 0))
        return (full,)

    return result(out, (a,), "index_select", bw)


def tsum(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)
    src = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return result(np.asarray(out), (a,), "sum", bw)


def mean(a, axis=None, keepdims=False):
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[i] for i in axes]))
    s = tsum(a, axis, keepdims)
    return mul(s, 1.0 / n)
