"""Reverse-mode autodiff over numpy arrays.

A :class:`Tensor` wraps an ndarray plus an optional backward closure; ops
build the graph eagerly and :func:`backward` walks it once in reverse
topological order. Node ids are assigned at construction and parents are
stored in call order, so two backward passes over the same graph
accumulate gradients in the same order and produce bit-identical results.

Training runs in float32; gradient checking builds float64 graphs.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager

import numpy as np

# Additive mask surrogate for -inf: large enough to drive masked softmax
# probabilities to exact float zero, small enough to never overflow.
NEG_INF = -1e9

_ids = itertools.count()
_grad_enabled = [True]


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for an op."""


@contextmanager
def no_grad():
    """Disable graph recording inside the block (eval-mode forward)."""
    _grad_enabled.append(False)
    try:
        yield
    finally:
        _grad_enabled.pop()


def is_grad_enabled() -> bool:
    return _grad_enabled[-1]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_id")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._backward = None
        self._op = "leaf"
        self._id = next(_ids)

    # -- construction helpers -------------------------------------------

    @staticmethod
    def _node(data: np.ndarray, parents: tuple, bwd, op: str) -> "Tensor":
        t = Tensor.__new__(Tensor)
        t.data = data
        t.requires_grad = True
        t.grad = None
        t._parents = parents
        t._backward = bwd
        t._op = op
        t._id = next(_ids)
        return t

    @staticmethod
    def _leaf(data: np.ndarray) -> "Tensor":
        t = Tensor.__new__(Tensor)
        t.data = data
        t.requires_grad = False
        t.grad = None
        t._parents = ()
        t._backward = None
        t._op = "leaf"
        t._id = next(_ids)
        return t

    # -- basic introspection --------------------------------------------

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

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor._leaf(self.data)

    # -- operators -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not a registered op")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def backward(self):
        backward(self)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor._leaf(np.asarray(x))


def _record(parents: tuple) -> bool:
    return _grad_enabled[-1] and any(p.requires_grad for p in parents)


def _result(data, parents, bwd_factory, op) -> Tensor:
    """bwd_factory is called only when the node is recorded."""
    if _record(parents):
        return Tensor._node(data, parents, bwd_factory(), op)
    return Tensor._leaf(data)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce ``grad`` back to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- backward engine -----------------------------------------------------


def backward(loss: Tensor) -> None:
    """Accumulate dLoss/dLeaf into ``.grad`` of every reachable leaf.

    Raises if ``loss`` is not scalar. Leaves with requires_grad=False are
    never visited, so frozen subgraphs allocate no gradients.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            k = id(p)
            if k in grads:
                grads[k] = grads[k] + pg
            else:
                grads[k] = pg


# -- arithmetic ops ------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeError(f"add: shapes {a.data.shape} and {b.data.shape} do not broadcast")
    data = a.data + b.data

    def bwd():
        def fn(g):
            return (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape))
        return fn

    return _result(data, (a, b), bwd, "add")


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeError(f"mul: shapes {a.data.shape} and {b.data.shape} do not broadcast")
    data = a.data * b.data

    def bwd():
        ad, bd = a.data, b.data

        def fn(g):
            return (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape))
        return fn

    return _result(data, (a, b), bwd, "mul")


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be >=2-d, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    data = np.matmul(a.data, b.data)

    def bwd():
        ad, bd = a.data, b.data

        def fn(g):
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
            gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
            return (ga, gb)
        return fn

    return _result(data, (a, b), bwd, "matmul")


# -- activations ---------------------------------------------------------


def tanh(x: Tensor) -> Tensor:
    data = np.tanh(x.data)

    def bwd():
        def fn(g):
            return (g * (1.0 - data * data),)
        return fn

    return _result(data, (x,), bwd, "tanh")


def sigmoid(x: Tensor) -> Tensor:
    data = 0.5 * (np.tanh(0.5 * x.data) + 1.0)

    def bwd():
        def fn(g):
            return (g * data * (1.0 - data),)
        return fn

    return _result(data, (x,), bwd, "sigmoid")


def relu(x: Tensor) -> Tensor:
    data = np.maximum(x.data, 0.0)

    def bwd():
        pos = x.data > 0

        def fn(g):
            return (g * pos,)
        return fn

    return _result(data, (x,), bwd, "relu")


def softmax(x: Tensor, mask: np.ndarray | None = None, axis: int = -1) -> Tensor:
    """Softmax along ``axis``; ``mask`` is an additive constant (0 or NEG_INF)."""
    z = x.data if mask is None else x.data + mask
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    data = e / e.sum(axis=axis, keepdims=True)

    def bwd():
        def fn(g):
            dot = (g * data).sum(axis=axis, keepdims=True)
            return (data * (g - dot),)
        return fn

    return _result(data, (x,), bwd, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis, then scale and shift."""
    if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise ShapeError(
            f"layer_norm: params {gamma.shape}/{beta.shape} do not match last axis of {x.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * invstd
    data = xhat * gamma.data + beta.data

    def bwd():
        gd = gamma.data

        def fn(g):
            dxhat = g * gd
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            gx = invstd * (dxhat - m1 - xhat * m2)
            lead = tuple(range(g.ndim - 1))
            return (gx, (g * xhat).sum(axis=lead), g.sum(axis=lead))
        return fn

    return _result(data, (x, gamma, beta), bwd, "layer_norm")


# -- structural ops ------------------------------------------------------


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather: out[..., :] = table[ids[...], :]."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(
            f"embedding: ids in [{ids.min()}, {ids.max()}] out of range for table {table.shape}"
        )
    data = table.data[ids]

    def bwd():
        def fn(g):
            gt = np.zeros_like(table.data)
            np.add.at(gt, ids, g)
            return (gt,)
        return fn

    return _result(data, (table,), bwd, "embedding")


def take_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows along axis 0; duplicate indices accumulate in backward."""
    idx = np.asarray(idx)
    data = x.data[idx]

    def bwd():
        def fn(g):
            gx = np.zeros_like(x.data)
            np.add.at(gx, idx, g)
            return (gx,)
        return fn

    return _result(data, (x,), bwd, "take_rows")


def select_steps(x: Tensor, idx: np.ndarray) -> Tensor:
    """Per-row gather: out[b] = x[b, idx[b]] for a (B, T, ...) tensor."""
    idx = np.asarray(idx)
    b = np.arange(x.shape[0])
    data = x.data[b, idx]

    def bwd():
        def fn(g):
            gx = np.zeros_like(x.data)
            gx[b, idx] = g
            return (gx,)
        return fn

    return _result(data, (x,), bwd, "select_steps")


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)

    def bwd():
        sizes = [t.data.shape[axis] for t in tensors]
        cuts = np.cumsum(sizes)[:-1]

        def fn(g):
            return tuple(np.split(g, cuts, axis=axis))
        return fn

    return _result(data, tuple(tensors), bwd, "concat")


def stack(tensors: list[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    data = np.stack([t.data for t in tensors], axis=axis)

    def bwd():
        def fn(g):
            return tuple(np.moveaxis(g, axis, 0)[i] for i in range(len(tensors)))
        return fn

    return _result(data, tuple(tensors), bwd, "stack")


def reshape(x: Tensor, shape) -> Tensor:
    data = x.data.reshape(shape)

    def bwd():
        orig = x.data.shape

        def fn(g):
            return (g.reshape(orig),)
        return fn

    return _result(data, (x,), bwd, "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    data = x.data.transpose(axes)

    def bwd():
        inv = np.argsort(axes)

        def fn(g):
            return (g.transpose(inv),)
        return fn

    return _result(data, (x,), bwd, "transpose")


def getitem(x: Tensor, key) -> Tensor:
    """Basic (slice/int) indexing; integer-array keys belong in take_rows."""
    data = x.data[key]

    def bwd():
        def fn(g):
            gx = np.zeros_like(x.data)
            gx[key] = g
            return (gx,)
        return fn

    return _result(data, (x,), bwd, "getitem")


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def bwd():
        def fn(g):
            if axis is None:
                return (np.broadcast_to(g, x.data.shape).copy(),)
            gg = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(gg, x.data.shape).copy(),)
        return fn

    return _result(np.asarray(data), (x,), bwd, "sum")


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else x.data.shape[axis]
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


# -- randomized / loss ops ----------------------------------------------


def dropout(x: Tensor, p: float, rng, train: bool) -> Tensor:
    """Inverted dropout; identity (the same tensor) when not training."""
    if not train or p <= 0.0:
        return x
    keep = (rng.uniform(x.data.shape) >= p).astype(x.data.dtype) / (1.0 - p)
    data = x.data * keep

    def bwd():
        def fn(g):
            return (g * keep,)
        return fn

    return _result(data, (x,), bwd, "dropout")


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log softmax probability of the target class.

    ``logits`` is (B, C) or (C,); ``targets`` an int vector or scalar.
    """
    squeeze = logits.ndim == 1
    z = logits.data.reshape(1, -1) if squeeze else logits.data
    t = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    if z.ndim != 2 or t.shape != (z.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {t.shape}")
    if t.size and (t.min() < 0 or t.max() >= z.shape[1]):
        raise ValueError(f"cross_entropy: target out of range for {z.shape[1]} classes")
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    rows = np.arange(z.shape[0])
    data = np.asarray((lse - z[rows, t]).mean(), dtype=logits.dtype)

    def bwd():
        def fn(g):
            p = np.exp(z - m)
            p /= p.sum(axis=1, keepdims=True)
            p[rows, t] -= 1.0
            gx = p * (g / z.shape[0])
            return (gx[0] if squeeze else gx,)
        return fn

    return _result(data, (logits,), bwd, "cross_entropy")


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean squared error; target may be a constant array or a Tensor."""
    tgt = _wrap(target)
    if pred.shape != tgt.shape:
        raise ShapeError(f"mse_loss: shapes {pred.shape} and {tgt.shape} differ")
    diff = pred.data - tgt.data
    data = np.asarray((diff * diff).mean(), dtype=pred.dtype)

    def bwd():
        def fn(g):
            gp = g * 2.0 * diff / diff.size
            return (gp, -gp)
        return fn

    return _result(data, (pred, tgt), bwd, "mse_loss")
