"""Dense tensors with reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array. Operations on tensors that require
gradients record their parents and a vector-Jacobian closure; the graph
reachable from a loss is the tape that :func:`backward` replays in reverse
topological order.

Closures take the upstream gradient and return one gradient per parent
(``None`` for parents that do not need one).
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from phishkd.exceptions import ContractError, DimensionError, NumericError, ParameterError

DEFAULT_DTYPE = np.float64

_state = {"grad": True, "finite": True}


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, frozen teachers)."""
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


def grad_enabled() -> bool:
    return _state["grad"]


@contextlib.contextmanager
def finite_checks(enabled: bool):
    """Toggle the NaN/Inf check applied to every op output."""
    prev = _state["finite"]
    _state["finite"] = enabled
    try:
        yield
    finally:
        _state["finite"] = prev


def _as_array(data, dtype=None) -> np.ndarray:
    if isinstance(data, Tensor):
        data = data.data
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype == np.float32 or arr.dtype == np.float64:
        return arr
    return arr.astype(DEFAULT_DTYPE)


class Tensor:
    """An n-d float array that may participate in differentiation."""

    __slots__ = ("data", "requires_grad", "name", "_parents", "_backward")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators -----------------------------------------------------
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
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def Parameter(data, name: str | None = None) -> Tensor:
    """A leaf tensor that receives gradients."""
    return Tensor(np.array(data, dtype=_as_array(data).dtype), requires_grad=True, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    # Constants adopt the dtype of the tensor operand so float32 stays float32.
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, Tensor(np.asarray(b, dtype=a.dtype))
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return Tensor(np.asarray(a, dtype=b.dtype)), b
    return as_tensor(a), as_tensor(b)


def make_op(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str = "op") -> Tensor:
    """Wrap an op result, recording the graph edge when gradients are on."""
    if _state["finite"] and not np.isfinite(data).all():
        raise NumericError(f"non-finite value produced by {op}")
    out = Tensor(data)
    if _state["grad"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise arithmetic --------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return make_op(a.data + b.data, (a, b),
                   lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return make_op(a.data - b.data, (a, b),
                   lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    return make_op(ad * bd, (a, b),
                   lambda g: (unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    return make_op(ad / bd, (a, b),
                   lambda g: (unbroadcast(g / bd, ad.shape),
                              unbroadcast(-g * ad / (bd * bd), bd.shape)), "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_op(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)
    return make_op(y, (a,), lambda g: (g * y,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return make_op(np.log(x), (a,), lambda g: (g / x,), "log")


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes only where the input was inside the range."""
    a = as_tensor(a)
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return make_op(np.clip(x, lo, hi), (a,), lambda g: (g * inside,), "clip")


# -- activations -------------------------------------------------------

def _sigmoid(x: np.ndarray) -> np.ndarray:
    # Branch-free stable form: never exponentiates a positive number.
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = _sigmoid(a.data)
    return make_op(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return make_op(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return make_op(np.where(pos, a.data, 0.0).astype(a.dtype), (a,), lambda g: (g * pos,), "relu")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a) -> Tensor:
    """GELU, tanh approximation."""
    a = as_tensor(a)
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    y = 0.5 * x * (1.0 + t)

    def back(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)

    return make_op(y, (a,), back, "gelu")


ACTIVATIONS = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu, "gelu": gelu}


def activation(kind: str, x) -> Tensor:
    """Apply a named elementwise activation (``sigmoid``, ``tanh``, ``relu``, ``gelu``)."""
    try:
        fn = ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; expected one of {sorted(ACTIVATIONS)}") from None
    return fn(x)


# -- linear algebra and shape ops --------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product with numpy batching rules; differentiable in both operands."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 1 or bd.ndim < 1:
        raise DimensionError(f"matmul needs at least 1-d operands, got {ad.shape} and {bd.shape}")
    k_a = ad.shape[-1]
    k_b = bd.shape[-2] if bd.ndim >= 2 else bd.shape[0]
    if k_a != k_b:
        raise DimensionError(f"matmul inner dimensions differ: {ad.shape} x {bd.shape}")
    if ad.ndim == 1 or bd.ndim == 1:
        # Promote vectors so a single backward formula applies.
        a2 = reshape(a, (1, -1)) if ad.ndim == 1 else a
        b2 = reshape(b, (-1, 1)) if bd.ndim == 1 else b
        out = matmul(a2, b2)
        shape = out.shape[:-2] + ((out.shape[-2],) if ad.ndim > 1 else ()) + ((out.shape[-1],) if bd.ndim > 1 else ())
        return reshape(out, shape)

    if bd.ndim == 2 and ad.ndim > 2:
        # Shared weight matrix: fold the batch dims into rows for one BLAS call.
        flat = ad.reshape(-1, k_a)

        def back(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (g2 @ bd.T).reshape(ad.shape), flat.T @ g2

        return make_op((flat @ bd).reshape(ad.shape[:-1] + (bd.shape[1],)), (a, b), back, "matmul")

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return unbroadcast(ga, ad.shape), unbroadcast(gb, bd.shape)

    return make_op(ad @ bd, (a, b), back, "matmul")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    return make_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return make_op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_op(np.concatenate([t.data for t in ts], axis=axis), ts, back, "concat")


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    shape, dtype = a.shape, a.dtype

    def back(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, index, g)
        return (out,)

    return make_op(a.data[index], (a,), back, "getitem")


def flip(a, axis: int) -> Tensor:
    a = as_tensor(a)
    return make_op(np.flip(a.data, axis), (a,), lambda g: (np.flip(g, axis),), "flip")


def take_rows(table, ids: np.ndarray, frozen_rows: Iterable[int] = ()) -> Tensor:
    """Gather rows of a 2-d ``table`` by integer ``ids`` (embedding lookup).

    ``frozen_rows`` never receive gradient (the padding row).
    """
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    shape, dtype = table.shape, table.dtype
    frozen = list(frozen_rows)

    def back(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, shape[1]))
        if frozen:
            out[frozen] = 0.0
        return (out,)

    return make_op(table.data[ids], (table,), back, "take_rows")


# -- reductions --------------------------------------------------------

def reduce_sum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_op(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), back, "sum")


def reduce_mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return reduce_sum(a, axis, keepdims) * (1.0 / n)


def masked_mean(x, mask: np.ndarray, axis: int = 1) -> Tensor:
    """Mean over ``axis`` counting only positions where ``mask`` is 1.

    ``mask`` has the shape of ``x`` without its trailing feature axis.
    """
    x = as_tensor(x)
    m = np.asarray(mask, dtype=x.dtype)[..., None]
    counts = np.maximum(m.sum(axis=axis, keepdims=True), 1.0)
    w = m / counts
    return reduce_sum(x * w, axis=axis)


# -- softmax family ----------------------------------------------------

def _softmax_np(x: np.ndarray, axis: int, mask: np.ndarray | None) -> np.ndarray:
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(x - m)  # masked entries are exp(-inf) = 0
    s = e.sum(axis=axis, keepdims=True)
    return e / np.where(s > 0, s, 1.0)


def softmax(a, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Max-subtracted softmax; positions where ``mask`` is False get exactly 0."""
    a = as_tensor(a)
    y = _softmax_np(a.data, axis, None if mask is None else np.asarray(mask, dtype=bool))

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_op(y, (a,), back, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    lse = m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))
    y = x - lse
    p = np.exp(y)

    def back(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return make_op(y, (a,), back, "log_softmax")


def softmax_with_temperature(z, tau: float = 1.0) -> Tensor:
    """``softmax(z / tau)`` over the last axis."""
    if not tau > 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    z = as_tensor(z)
    if z.size == 0:
        raise ParameterError("softmax of an empty input")
    return softmax(z * (1.0 / tau), axis=-1)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    n = xd.shape[-1]

    def back(g):
        gg = unbroadcast(g * xhat, gamma.shape)
        gb = unbroadcast(g, beta.shape)
        dxhat = g * gd
        dx = inv / n * (n * dxhat - dxhat.sum(-1, keepdims=True)
                        - xhat * (dxhat * xhat).sum(-1, keepdims=True))
        return dx, gg, gb

    return make_op(xhat * gd + beta.data, (x, gamma, beta), back, "layer_norm")


# -- differentiation ---------------------------------------------------

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


def backward(loss: Tensor, params=None):
    """Reverse-mode gradients of a scalar ``loss``.

    ``params`` may be a mapping ``name -> Tensor`` (the result is keyed by
    name) or an iterable of tensors (keyed by tensor). Parameters the loss
    does not depend on get a zero array of their own shape. With
    ``params=None`` every reachable leaf is returned.
    """
    if not isinstance(loss, Tensor) or loss.size != 1:
        shape = loss.shape if isinstance(loss, Tensor) else type(loss)
        raise ContractError(f"backward needs a scalar loss, got shape {shape}")
    grads: dict[int, np.ndarray] = {}
    leaves: dict[int, Tensor] = {}
    if loss.requires_grad:
        grads[id(loss)] = np.ones_like(loss.data)
        for node in reversed(_topo_order(loss)):
            g = grads.pop(id(node), None) if node._backward is not None else grads.get(id(node))
            if node._backward is None:
                leaves[id(node)] = node
                continue
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
    if params is None:
        return {t: grads[k] for k, t in leaves.items()}
    if isinstance(params, Mapping):
        return {name: grads.get(id(t), np.zeros_like(t.data)) for name, t in params.items()}
    return {t: grads.get(id(t), np.zeros_like(t.data)) for t in params}
