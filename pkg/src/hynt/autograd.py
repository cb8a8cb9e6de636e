"""Minimal reverse-mode automatic differentiation over numpy arrays.

Operations record themselves on the active :class:`Tape` (if any) together
with a closure that maps the output gradient to input gradients. Outside a
tape the same functions run as plain numpy and record nothing, which is how
evaluation-mode forwards stay cheap.

Matrices follow a column-vector layout: a sequence of ``n`` positions in ``d``
dimensions is a ``d x n`` array, optionally with leading batch axes.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64
LAYER_NORM_EPS = 1e-9

_state = threading.local()


class NonFiniteError(FloatingPointError):
    """A forward operation produced NaN or infinity."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_node")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if dtype is None:
            is_float_array = isinstance(data, np.ndarray) and data.dtype.kind == "f"
            dtype = data.dtype if is_float_array else DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._node = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


class _Node:
    __slots__ = ("output", "inputs", "backward")

    def __init__(self, output: Tensor, inputs: tuple, backward: Callable):
        self.output = output
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Records operations while active; ``backward`` replays them in reverse once.

    Usage::

        with Tape() as tape:
            loss = ...
        tape.backward(loss)
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._used = False
        self._previous = None

    def __enter__(self) -> "Tape":
        self._previous = getattr(_state, "tape", None)
        _state.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _state.tape = self._previous

    def backward(self, loss: Tensor) -> None:
        if self._used:
            raise RuntimeError("backward already ran on this tape")
        if loss.data.size != 1:
            raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
        self._used = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not _needs_grad(t):
                    continue
                if t._node is None:
                    t.grad = gi.copy() if t.grad is None else t.grad + gi
                else:
                    prev = grads.get(id(t))
                    grads[id(t)] = gi if prev is None else prev + gi
        self.nodes.clear()


def active_tape() -> Tape | None:
    return getattr(_state, "tape", None)


def _needs_grad(t) -> bool:
    return isinstance(t, Tensor) and (t.requires_grad or t._node is not None)


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    # plain numbers and arrays adopt the dtype of the tensor operand
    if isinstance(a, Tensor):
        return a, as_tensor(b, a.data.dtype)
    if isinstance(b, Tensor):
        return as_tensor(a, b.data.dtype), b
    return as_tensor(a), as_tensor(b)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite output from {op}")


def _make(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable, op: str, check: bool = True) -> Tensor:
    if check:
        _check_finite(data, op)
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(_needs_grad(t) for t in inputs):
        node = _Node(out, tuple(inputs), backward)
        out._node = node
        tape.nodes.append(node)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# --------------------------------------------------------------------------
# elementwise
# --------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), backward, "mul")


def relu(x: Tensor) -> Tensor:
    keep = x.data > 0
    return _make(np.where(keep, x.data, 0.0), (x,), lambda g: (g * keep,), "relu")


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _make(xd * xd, (x,), lambda g: (2.0 * xd * g,), "square")


# --------------------------------------------------------------------------
# shape and reductions
# --------------------------------------------------------------------------


def _weight_matmul(w: np.ndarray, x: np.ndarray) -> np.ndarray:
    # 2-D weight times batched (..., k, n): one large gemm instead of many small ones
    return np.moveaxis(np.tensordot(w, x, axes=([1], [x.ndim - 2])), 0, -2)


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    shared_weight = ad.ndim == 2 and bd.ndim > 2

    def backward(g):
        if shared_weight:
            lead = list(range(g.ndim - 2))
            ga = np.tensordot(g, bd, axes=(lead + [g.ndim - 1], lead + [bd.ndim - 1]))
            gb = _weight_matmul(ad.T, g)
            return ga, gb
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    out = _weight_matmul(ad, bd) if shared_weight else ad @ bd
    return _make(out, (a, b), backward, "matmul")


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat", check=False)


def concat_rows(tensors: Sequence[Tensor]) -> Tensor:
    """Vertical concatenation ``[u1; u2; ...]`` (stacks along the row axis)."""
    return concat(tensors, axis=-2)


def concat_cols(tensors: Sequence[Tensor]) -> Tensor:
    """Horizontal concatenation ``[u1 || u2 || ...]`` (stacks along the column axis)."""
    return concat(tensors, axis=-1)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape", check=False)


def swapaxes(x: Tensor, a1: int, a2: int) -> Tensor:
    return _make(np.swapaxes(x.data, a1, a2), (x,), lambda g: (np.swapaxes(g, a1, a2),), "swapaxes", check=False)


def getitem(x: Tensor, index) -> Tensor:
    shape = x.shape

    def backward(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, index, g)
        return (out,)

    return _make(x.data[index], (x,), backward, "getitem", check=False)


def row_select(table: Tensor, indices) -> Tensor:
    """Gather rows of a 2-D table; ``indices`` may have any shape."""
    idx = np.asarray(indices, dtype=np.int64)
    shape = table.shape

    def backward(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, idx.reshape(-1), g.reshape(-1, shape[-1]))
        return (out,)

    return _make(table.data[idx], (table,), backward, "row_select", check=False)


def take_cols(x: Tensor, cols) -> Tensor:
    """Per-batch column gather: ``x`` is ``(B, d, n)``, result ``(B, d)`` with ``out[b] = x[b, :, cols[b]]``."""
    cols = np.asarray(cols, dtype=np.int64)
    batch = np.arange(x.shape[0])
    shape = x.shape

    def backward(g):
        out = np.zeros(shape, dtype=g.dtype)
        out[batch, :, cols] = g
        return (out,)

    return _make(x.data[batch, :, cols], (x,), backward, "take_cols", check=False)


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _make(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def sum_axis(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(x.data.sum(axis=axis, keepdims=keepdims), (x,), backward, "sum_axis")


def mean_all(x: Tensor) -> Tensor:
    return mul(sum_all(x), 1.0 / x.data.size)


# --------------------------------------------------------------------------
# normalizations
# --------------------------------------------------------------------------


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along ``axis``; entries where ``mask`` is False get exactly zero weight."""
    z = x.data
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), backward, "softmax")


def softmax_cols(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Normalize each column (the row axis sums to one)."""
    return softmax(x, axis=-2, mask=mask)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    y = np.exp(out)

    def backward(g):
        return (g - y * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), backward, "log_softmax")


def normalize_cols(x: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Zero mean, unit variance per column (statistics over the row axis)."""
    xd = x.data
    mu = xd.mean(axis=-2, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    n = xd.shape[-2]

    def backward(g):
        gm = g.mean(axis=-2, keepdims=True)
        gx = (g * xhat).mean(axis=-2, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _make(xhat, (x,), backward, "layer_norm")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Column-wise layer normalization followed by learnable gain and bias (both ``d x 1``)."""
    return add(mul(normalize_cols(x, eps), gain), bias)


def dropout(x: Tensor, rate: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; the identity when ``train`` is False or ``rate`` is 0."""
    if not train or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs a random generator")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _make(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------


def cross_entropy_smoothed(logits: Tensor, targets, epsilon: float = 0.0, reduce: str = "mean") -> Tensor:
    """Cross entropy against ``(1 - eps) * onehot + eps / C`` for ``(N, C)`` logits.

    ``reduce`` is ``"mean"`` or ``"sum"`` over the N rows.
    """
    if not 0.0 <= epsilon < 1.0:
        raise ValueError("label smoothing must lie in [0, 1)")
    targets = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    n, c = logits.shape
    if targets.shape != (n,) or (targets < 0).any() or (targets >= c).any():
        raise ValueError("target index out of range")
    dist = np.full((n, c), epsilon / c, dtype=logits.data.dtype)
    dist[np.arange(n), targets] += 1.0 - epsilon
    per_row = mul(sum_axis(mul(log_softmax(logits, axis=-1), dist), axis=-1), -1.0)
    total = sum_all(per_row)
    return mul(total, 1.0 / n) if reduce == "mean" else total


def mse(pred, target, reduce: str = "mean") -> Tensor:
    diff = sub(pred, np.asarray(target, dtype=pred.data.dtype))
    total = sum_all(square(diff))
    if reduce == "mean":
        return mul(total, 1.0 / max(diff.data.size, 1))
    return total
