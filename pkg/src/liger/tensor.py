"""Dense tensors with a dynamic reverse-mode tape, backed by numpy.

Row-major float32/float64 arrays only. The tape is rebuilt on every forward
pass and consumed by `backward`; running inside `no_grad()` skips tape
construction entirely, which is what the decode path uses.
"""

from __future__ import annotations

import contextlib
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

_FLOAT_DTYPES = (np.float32, np.float64)

_grad_enabled = True
_nan_checks = False


@contextlib.contextmanager
def no_grad():
    """Disable tape construction inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


def set_nan_checks(on: bool) -> None:
    """Debug mode: raise on NaN in any op output instead of propagating silently."""
    global _nan_checks
    _nan_checks = on


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    elif arr.dtype not in _FLOAT_DTYPES:
        arr = arr.astype(np.float32)
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        if self.data.dtype not in _FLOAT_DTYPES:
            raise ContractError(f"tensors are float32/float64, got {self.data.dtype}")
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None

    # -- bookkeeping ---------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def astype(self, dtype) -> "Tensor":
        return _unary(self, self.data.astype(dtype), lambda g: g.astype(self.dtype))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    # -- operators -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_coerce(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)

    # -- autodiff -------------------------------------------------------

    def backward(self) -> None:
        backward(self)


def _coerce(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _check_same_dtype(a: Tensor, b: Tensor) -> None:
    if a.dtype != b.dtype:
        raise DimensionError(f"dtype mismatch: {a.dtype} vs {b.dtype}")


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    if _nan_checks and np.isnan(data).any():
        raise ContractError("NaN produced by tensor operation")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    requires = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = requires
    if requires:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _unary(x: Tensor, data: np.ndarray, dgrad) -> Tensor:
    def backward_fn(g):
        return (dgrad(g),)

    return _node(data, (x,), backward_fn)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def backward(loss: Tensor) -> None:
    """Populate .grad on every grad-enabled tensor reachable from `loss`.

    The tape is consumed: parent links are dropped so the graph can be
    collected even when leaves are long-lived parameters.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not require grad; no tape to walk")

    # iterative topological order (graphs from long recurrences are deep)
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        fn = node._backward
        if fn is None:
            continue
        grads = fn(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.zeros_like(parent.data)
            parent.grad += g
        node._parents = ()
        node._backward = None


# -- arithmetic ---------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    b = _coerce(b, a.dtype)
    _check_same_dtype(a, b)

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), backward_fn)


def sub(a: Tensor, b) -> Tensor:
    b = _coerce(b, a.dtype)
    _check_same_dtype(a, b)

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.data - b.data, (a, b), backward_fn)


def mul(a: Tensor, b) -> Tensor:
    b = _coerce(b, a.dtype)
    _check_same_dtype(a, b)

    def backward_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(a.data * b.data, (a, b), backward_fn)


def div(a: Tensor, b) -> Tensor:
    b = _coerce(b, a.dtype)
    _check_same_dtype(a, b)
    inv = 1.0 / b.data

    def backward_fn(g):
        return (
            _unbroadcast(g * inv, a.shape),
            _unbroadcast(-g * a.data * inv * inv, b.shape),
        )

    return _node(a.data * inv, (a, b), backward_fn)


def neg(x: Tensor) -> Tensor:
    return _unary(x, -x.data, lambda g: -g)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with broadcasting over leading dims."""
    if not isinstance(b, Tensor):
        b = _coerce(b, a.dtype)
    _check_same_dtype(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands must have ndim >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as e:  # batch dims not broadcastable
        raise DimensionError(f"matmul batch dims incompatible: {a.shape} @ {b.shape}") from e

    def backward_fn(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(data, (a, b), backward_fn)


# -- pointwise nonlinearities --------------------------------------------


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _unary(x, y, lambda g: g * y)


def log(x: Tensor) -> Tensor:
    return _unary(x, np.log(x.data), lambda g: g / x.data)


def powf(x: Tensor, e: float) -> Tensor:
    y = np.power(x.data, e)
    return _unary(x, y, lambda g: g * e * np.power(x.data, e - 1.0))


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    y = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))), np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
    y = y.astype(d.dtype)
    return _unary(x, y, lambda g: g * y * (1.0 - y))


def softplus(x: Tensor) -> Tensor:
    # ln(1 + e^x) in its overflow-free branch form; derivative is sigmoid
    d = x.data
    y = np.maximum(d, 0) + np.log1p(np.exp(-np.abs(d)))
    sig = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))), np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
    return _unary(x, y.astype(d.dtype), lambda g: g * sig)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _unary(x, np.where(mask, x.data, 0), lambda g: g * mask)


def silu(x: Tensor) -> Tensor:
    d = x.data
    s = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))), np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
    y = d * s
    return _unary(x, y.astype(d.dtype), lambda g: g * (s + y * (1.0 - s)))


# -- reductions -----------------------------------------------------------


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    y = x.data.sum(axis=axis, keepdims=keepdims)

    def dgrad(g):
        if axis is None:
            return np.broadcast_to(g.reshape(()), x.shape)
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, x.shape)

    return _unary(x, y, dgrad)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else x.shape[axis]
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def cumsum(x: Tensor, axis: int) -> Tensor:
    y = np.cumsum(x.data, axis=axis)

    def dgrad(g):
        return np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis)

    return _unary(x, y, dgrad)


def cumprod_along_time(x: Tensor, axis: int = 0) -> Tensor:
    """Cumulative product along the time axis. Gradient assumes nonzero entries."""
    y = np.cumprod(x.data, axis=axis)

    def dgrad(g):
        rev = np.flip(np.cumsum(np.flip(g * y, axis=axis), axis=axis), axis=axis)
        return rev / x.data

    return _unary(x, y, dgrad)


# -- softmax family --------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along `axis`. -inf entries come out as exact 0."""
    m = np.max(x.data, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)  # all -inf row guard
    e = np.exp(x.data - m)
    y = e / e.sum(axis=axis, keepdims=True)

    def dgrad(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return y * (g - dot)

    return _unary(x, y, dgrad)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    m = np.max(x.data, axis=axis, keepdims=True)
    z = x.data - m
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    sm = np.exp(y)

    def dgrad(g):
        return g - sm * g.sum(axis=axis, keepdims=True)

    return _unary(x, y, dgrad)


# -- shape manipulation -----------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    return _unary(x, x.data.reshape(shape), lambda g: g.reshape(x.shape))


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    return _unary(x, np.swapaxes(x.data, a, b), lambda g: np.swapaxes(g, a, b))


def expand_dims(x: Tensor, axis: int) -> Tensor:
    return _unary(x, np.expand_dims(x.data, axis), lambda g: np.squeeze(g, axis=axis))


def take(x: Tensor, key) -> Tensor:
    """Basic slicing/indexing with gradient scatter. Advanced indexing not supported."""

    def dgrad(g):
        buf = np.zeros_like(x.data)
        buf[key] += g
        return buf

    return _unary(x, x.data[key], dgrad)


def concat(parts: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward_fn(g):
        sl = [slice(None)] * g.ndim
        outs = []
        for i in range(len(parts)):
            sl[axis] = slice(offsets[i], offsets[i + 1])
            outs.append(g[tuple(sl)])
        return tuple(outs)

    return _node(data, parts, backward_fn)


def where(cond: np.ndarray, a: Tensor, b) -> Tensor:
    """Select by a constant boolean mask; gradient flows only through the taken branch."""
    b = _coerce(b, a.dtype)
    _check_same_dtype(a, b)

    def backward_fn(g):
        return (
            _unbroadcast(np.where(cond, g, 0), a.shape),
            _unbroadcast(np.where(cond, 0, g), b.shape),
        )

    return _node(np.where(cond, a.data, b.data), (a, b), backward_fn)


# -- lookups ---------------------------------------------------------------


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup, grad scattered back with add.at."""
    ids = np.asarray(ids)

    def dgrad(g):
        buf = np.zeros_like(table.data)
        np.add.at(buf, ids, g)
        return buf

    return _unary(table, table.data[ids], dgrad)


def take_along_last(x: Tensor, idx: np.ndarray) -> Tensor:
    """y[..., j] = x[..., j, idx[..., j]]; used to pick target-token log-probs."""
    idx = np.asarray(idx)
    picked = np.take_along_axis(x.data, idx[..., None], axis=-1)[..., 0]

    def dgrad(g):
        buf = np.zeros_like(x.data)
        np.put_along_axis(buf, idx[..., None], g[..., None], axis=-1)
        return buf

    return _unary(x, picked, dgrad)


def cross_entropy(logits: Tensor, targets: np.ndarray, ignore_index: int | None = None) -> Tensor:
    """Mean next-token negative log-likelihood over non-ignored positions."""
    logp = log_softmax(logits, axis=-1)
    picked = take_along_last(logp, targets)
    if ignore_index is None:
        return neg(tmean(picked))
    mask = (np.asarray(targets) != ignore_index).astype(logits.dtype)
    n = max(float(mask.sum()), 1.0)
    return mul(tsum(mul(picked, Tensor(mask, dtype=logits.dtype))), -1.0 / n)


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """x * (mean(x^2, last) + eps)^-1/2 * gain."""
    ms = tmean(mul(x, x), axis=-1, keepdims=True)
    inv = powf(add(ms, eps), -0.5)
    return mul(mul(x, inv), gain)
