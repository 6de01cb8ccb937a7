"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable value in patkit is a :class:`Tensor` wrapping a numpy
array. Operations on tensors that require gradients record a node holding
the parents and a closure mapping the output gradient to parent gradients.
Nodes are numbered in creation order, so walking reachable nodes by
descending id is a valid reverse topological order.
"""

from __future__ import annotations

import contextlib
import itertools
import os
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

from ..errors import ContractError, DimensionError, DomainError

ArrayLike = Union[np.ndarray, float, int, Sequence]

_node_counter = itertools.count()
_default_dtype = np.dtype(np.float32)
_grad_enabled = True
_debug = os.environ.get("PATKIT_DEBUG", "") not in ("", "0")


def get_default_dtype() -> np.dtype:
    return _default_dtype


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ContractError(f"unsupported precision {dtype}; use float32 or float64")
    _default_dtype = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default float precision."""
    old = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference only)."""
    global _grad_enabled
    old = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = old


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node_id", "_parents", "_backward", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind in "fiub":
            arr = arr.astype(_default_dtype, copy=False)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node_id: Optional[int] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None

    # -- basic properties -------------------------------------------------
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
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators --------------------------------------------------------
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

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    # -- method aliases ---------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        return reduce(self, "sum", axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce(self, "mean", axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce(self, "max", axis, keepdims)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    @property
    def T(self):
        return self.swapaxes(-1, -2)

    def backward(self, params: Optional[Iterable["Tensor"]] = None):
        return backward(self, params)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple, backward_fn: Callable) -> Tensor:
    """Wrap an op result; record a graph node when any parent needs grad."""
    if _debug and data.dtype.kind == "f" and not np.all(np.isfinite(data)):
        if all(np.all(np.isfinite(p.data)) for p in parents if isinstance(p, Tensor)):
            raise DomainError("non-finite output from finite inputs")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.node_id = None
    out._parents = ()
    out._backward = None
    needs = _grad_enabled and any(isinstance(p, Tensor) and p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out.node_id = next(_node_counter)
        out._parents = parents
        out._backward = backward_fn
    return out


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _binary_shapes(a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None


# -- elementwise ---------------------------------------------------------------


def add(x, y) -> Tensor:
    x, y = as_tensor(x), as_tensor(y)
    _binary_shapes(x.data, y.data)
    xs, ys = x.shape, y.shape
    return _make(x.data + y.data, (x, y), lambda g: (unbroadcast(g, xs), unbroadcast(g, ys)))


def sub(x, y) -> Tensor:
    x, y = as_tensor(x), as_tensor(y)
    _binary_shapes(x.data, y.data)
    xs, ys = x.shape, y.shape
    return _make(x.data - y.data, (x, y), lambda g: (unbroadcast(g, xs), unbroadcast(-g, ys)))


def mul(x, y) -> Tensor:
    x, y = as_tensor(x), as_tensor(y)
    _binary_shapes(x.data, y.data)
    a, b = x.data, y.data
    return _make(a * b, (x, y), lambda g: (unbroadcast(g * b, a.shape), unbroadcast(g * a, b.shape)))


def div(x, y) -> Tensor:
    x, y = as_tensor(x), as_tensor(y)
    _binary_shapes(x.data, y.data)
    a, b = x.data, y.data
    if np.any(b == 0):
        raise DomainError("division by zero")
    out = a / b

    def back(g):
        return unbroadcast(g / b, a.shape), unbroadcast(-g * out / b, b.shape)

    return _make(out, (x, y), back)


def neg(x) -> Tensor:
    x = as_tensor(x)
    return _make(-x.data, (x,), lambda g: (-g,))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    a = x.data
    if np.any(a <= 0):
        raise DomainError("log of non-positive value")
    return _make(np.log(a), (x,), lambda g: (g / a,))


def scale(x, factor: float) -> Tensor:
    """Multiply by a python scalar without promoting precision."""
    x = as_tensor(x)
    f = x.data.dtype.type(factor)
    return _make(x.data * f, (x,), lambda g: (g * f,))


def elu(x, alpha: float = 1.0) -> Tensor:
    x = as_tensor(x)
    a = x.data
    pos = a > 0
    neg_part = np.expm1(np.minimum(a, 0))
    if alpha != 1.0:
        neg_part *= a.dtype.type(alpha)
    out = np.where(pos, a, neg_part)

    def back(g):
        # d/dx elu = 1 on the positive side, elu(x) + alpha otherwise
        return (np.where(pos, g, g * (neg_part + a.dtype.type(alpha))),)

    return _make(out, (x,), back)


# -- linear algebra --------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product with numpy batching semantics.

    A 2-D right operand is shared across the leading batch axes of ``a``;
    its gradient is computed as one flattened product rather than a stack
    of per-batch products.
    """
    a, b = as_tensor(a), as_tensor(b)
    A, B = a.data, b.data
    if A.ndim < 2 or B.ndim < 2:
        raise DimensionError(f"matmul needs >=2-D operands, got {A.shape} and {B.shape}")
    if A.shape[-1] != B.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {A.shape} @ {B.shape}")
    try:
        out = np.matmul(A, B)
    except ValueError:
        raise DimensionError(f"matmul batch dimensions differ: {A.shape} @ {B.shape}") from None

    def back(g):
        if B.ndim == 2:
            ga = g @ B.T
            gb = A.reshape(-1, A.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb
        ga = unbroadcast(g @ np.swapaxes(B, -1, -2), A.shape)
        gb = unbroadcast(np.swapaxes(A, -1, -2) @ g, B.shape)
        return ga, gb

    return _make(out, (a, b), back)


# -- reductions ------------------------------------------------------------------


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise ContractError(f"axis {ax} out of range for {ndim}-D tensor")
        out.append(ax % ndim)
    return tuple(sorted(out))


def reduce(x, kind: str, axis=None, keepdims: bool = False) -> Tensor:
    """Reduce along ``axis`` with ``kind`` in {'sum', 'mean', 'max'}.

    Max routes the whole gradient to the first maximal position.
    """
    x = as_tensor(x)
    a = x.data
    axes = _norm_axis(axis, a.ndim)
    if any(a.shape[ax] == 0 for ax in axes):
        raise ContractError("reduction over an empty axis")
    shape = a.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(shape))

    if kind == "sum":
        out = a.sum(axis=axes, keepdims=keepdims)
        return _make(out, (x,), lambda g: (np.broadcast_to(g.reshape(kept), shape).copy(),))
    if kind == "mean":
        count = int(np.prod([shape[ax] for ax in axes]))
        out = a.mean(axis=axes, keepdims=keepdims)
        inv = a.dtype.type(1.0 / count)
        return _make(out, (x,), lambda g: (np.broadcast_to(g.reshape(kept) * inv, shape).copy(),))
    if kind == "max" and len(axes) == 1:
        ax = axes[0]
        idx = np.expand_dims(np.argmax(a, axis=ax), ax)
        out = np.take_along_axis(a, idx, axis=ax)
        if not keepdims:
            out = out.squeeze(ax)

        def back(g):
            full = np.zeros_like(a)
            np.put_along_axis(full, idx, g.reshape(kept), axis=ax)
            return (full,)

        return _make(out, (x,), back)
    if kind == "max":
        # move reduced axes last and flatten them so argmax picks the first hit
        rest = tuple(i for i in range(a.ndim) if i not in axes)
        perm = rest + axes
        moved = np.transpose(a, perm)
        flat = moved.reshape(moved.shape[: len(rest)] + (-1,))
        idx = np.argmax(flat, axis=-1)
        out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
        if keepdims:
            out = out.reshape(kept)

        def back(g):
            gflat = np.zeros_like(flat)
            np.put_along_axis(gflat, idx[..., None], g.reshape(idx.shape)[..., None], axis=-1)
            gm = gflat.reshape(moved.shape)
            return (np.transpose(gm, np.argsort(perm)),)

        return _make(out, (x,), back)
    raise ContractError(f"unknown reduction {kind!r}")


# -- shape manipulation --------------------------------------------------------------


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {x.shape} into {tuple(shape)}") from None
    src = x.shape
    return _make(out, (x,), lambda g: (g.reshape(src),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)):
        raise DimensionError(f"invalid transpose axes {axes} for shape {x.shape}")
    out = np.ascontiguousarray(np.transpose(x.data, axes))
    inv = np.argsort([a % x.ndim for a in axes])
    return _make(out, (x,), lambda g: (np.ascontiguousarray(np.transpose(g, inv)),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise DimensionError("concat of an empty sequence")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise DimensionError(
            f"concat shapes disagree off axis {axis}: {[t.shape for t in ts]}"
        ) from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _make(out, tuple(ts), lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in ts], axis=axis)
    except ValueError:
        raise DimensionError(f"stack needs equal shapes: {[t.shape for t in ts]}") from None
    n = len(ts)
    return _make(out, tuple(ts), lambda g: tuple(np.moveaxis(g, axis, 0)[i] for i in range(n)))


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


def getitem(x, index) -> Tensor:
    x = as_tensor(x)
    if isinstance(index, Tensor):
        index = index.data
    out = x.data[index]
    shape, dtype = x.shape, x.dtype
    basic = _is_basic_index(index)

    def back(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out, copy=True), (x,), back)


def gather_rows(x, idx: np.ndarray) -> Tensor:
    """Select rows along axis 1: ``x[b, idx[b, j], ...]``.

    ``x`` has shape (B, N, ...) and ``idx`` integer shape (B, M).
    """
    x = as_tensor(x)
    idx = np.asarray(idx)
    if idx.ndim != 2 or idx.shape[0] != x.shape[0]:
        raise DimensionError(f"gather index {idx.shape} does not match batch of {x.shape}")
    b = np.arange(x.shape[0])[:, None]
    out = x.data[b, idx]
    shape, dtype = x.shape, x.dtype

    def back(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, (b, idx), g)
        return (full,)

    return _make(out, (x,), back)


# -- fused nonlinearities -----------------------------------------------------------


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    a = x.data
    e = a - a.max(axis=axis, keepdims=True)
    np.exp(e, out=e)
    e /= e.sum(axis=axis, keepdims=True)
    out = e

    def back(g):
        gy = g * out
        return (gy - out * gy.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), back)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    a = x.data
    shifted = a - a.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def back(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), back)


def cross_entropy(logits, labels) -> Tensor:
    """Mean softmax cross-entropy over all rows of ``logits[..., m]``.

    ``labels`` is an integer array matching ``logits.shape[:-1]``.
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    a = logits.data
    m = a.shape[-1]
    if labels.shape != a.shape[:-1]:
        raise DimensionError(f"labels {labels.shape} do not match logits {a.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= m):
        raise ContractError(f"label outside [0, {m})")
    flat = a.reshape(-1, m)
    lab = labels.reshape(-1)
    shifted = flat - flat.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    rows = flat.shape[0]
    loss = -logp[np.arange(rows), lab].mean()
    out = np.asarray(loss, dtype=a.dtype)

    def back(g):
        p = np.exp(logp)
        p[np.arange(rows), lab] -= 1
        return ((p * (g / rows)).reshape(a.shape).astype(a.dtype, copy=False),)

    return _make(out, (logits,), back)


def _axis_sum(a: np.ndarray, axes: tuple) -> np.ndarray:
    """Keepdims sum over ``axes``, one axis at a time (much faster than a joint reduce)."""
    for ax in sorted(axes):
        a = a.sum(axis=ax, keepdims=True)
    return a


def _affine_norm(x: Tensor, shape5: tuple, axes: tuple, weight, bias, eps: float) -> Tensor:
    """Normalize ``x`` viewed as ``shape5`` over ``axes`` then apply a per-channel affine.

    The channel axis is the last axis of ``x``; ``weight``/``bias`` have
    shape (c,).
    """
    weight, bias = as_tensor(weight), as_tensor(bias)
    a = x.data.reshape(shape5)
    count = int(np.prod([shape5[i] for i in axes]))
    mu = _axis_sum(a, axes) / count
    xc = a - mu
    var = _axis_sum(xc * xc, axes) / count
    inv = (1.0 / np.sqrt(var + eps)).astype(a.dtype, copy=False)
    xhat = xc
    xhat *= inv
    xhat = xhat.reshape(x.shape)
    w, b = weight.data, bias.data
    out = xhat * w
    out += b
    red = x.size // x.shape[-1]

    def back(g):
        g2 = g.reshape(red, -1)
        gw = np.einsum("rc,rc->c", g2, xhat.reshape(red, -1))
        gb = g2.sum(axis=0)
        gx = (g * w).reshape(shape5)
        xh = xhat.reshape(shape5)
        m1 = _axis_sum(gx, axes) / count
        m2 = _axis_sum(gx * xh, axes) / count
        dx = gx - m1
        dx -= xh * m2
        dx *= inv
        return dx.reshape(x.shape), gw, gb

    return _make(out.astype(a.dtype, copy=False), (x, weight, bias), back)


def group_norm(x, groups: int, weight, bias, eps: float = 1e-5) -> Tensor:
    """Group normalization with statistics over points and group channels.

    A 2-D input (N, c) is one set; higher-rank input (B, ..., c) holds B
    sets, every middle axis counting as a point axis.
    """
    x = as_tensor(x)
    c = x.shape[-1]
    if groups < 1 or c % groups:
        raise ContractError(f"channel count {c} not divisible by {groups} groups")
    batch = 1 if x.ndim == 2 else x.shape[0]
    shape5 = (batch, x.size // (batch * c), groups, c // groups)
    return _affine_norm(x, shape5, (1, 3), weight, bias, eps)


def layer_norm(x, weight, bias, eps: float = 1e-5) -> Tensor:
    """Per-point normalization over the channel axis."""
    x = as_tensor(x)
    c = x.shape[-1]
    return _affine_norm(x, (x.size // c, c), (1,), weight, bias, eps)


def dropout(x, rate: float, rng: np.random.Generator, training: bool = True) -> Tensor:
    x = as_tensor(x)
    if not training or rate <= 0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    return _make(x.data * keep, (x,), lambda g: (g * keep,))


# -- backward ---------------------------------------------------------------------


def backward(loss: Tensor, params: Optional[Iterable[Tensor]] = None) -> dict:
    """Reverse-mode sweep from a scalar ``loss``.

    Leaf tensors that require grad receive ``.grad`` (overwritten, not
    accumulated). Returns ``{tensor: gradient array}`` for ``params`` when
    given (zeros for unreachable ones), else for every reached leaf.
    The graph is kept, so calling twice yields identical gradients.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    params = list(params) if params is not None else None

    nodes: dict[int, Tensor] = {}
    leaves: dict[int, Tensor] = {}
    stack_ = [loss]
    seen = set()
    while stack_:
        t = stack_.pop()
        if id(t) in seen or not t.requires_grad:
            continue
        seen.add(id(t))
        if t._backward is None:
            leaves[id(t)] = t
        else:
            nodes[t.node_id] = t
            stack_.extend(t._parents)

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for nid in sorted(nodes, reverse=True):
        node = nodes[nid]
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not isinstance(parent, Tensor) or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg

    result = {}
    for key, leaf in leaves.items():
        g = grads.get(key)
        leaf.grad = None if g is None else np.asarray(g, dtype=leaf.dtype).reshape(leaf.shape)
        result[leaf] = leaf.grad
    if params is None:
        return result
    out = {}
    for p in params:
        g = result.get(p)
        if g is None:
            g = np.zeros_like(p.data)
            p.grad = g
        out[p] = g
    return out
