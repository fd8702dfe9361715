"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations are recorded on the active :class:`Tape` only when at least one
input requires a gradient, so the same model code runs as a cheap forward
pass outside of a tape (decoding) and as a differentiable graph inside one
(training).

    >>> x = Tensor(2.0, requires_grad=True)
    >>> y = Tensor(3.0, requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = x * y
    >>> grads = backward(loss, tape)
    >>> float(grads[x]), float(grads[y])
    (3.0, 2.0)
"""

from __future__ import annotations

import contextvars
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Mapping, Optional, Sequence, Union

import numpy as np

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[float]]

_ACTIVE_TAPE: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar(
    "reslm_active_tape", default=None
)

# Instrumentation: every softmax-family normalization bumps "normalizer".
counters: Counter = Counter()


class Tensor:
    """Immutable dense array. ``data`` is a read-only float64 ndarray."""

    __slots__ = ("data", "requires_grad", "name", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.array(data, dtype=np.float64)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        arr.flags.writeable = False
        t.data = arr
        t.requires_grad = requires_grad
        t.name = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __float__(self) -> float:
        return float(self.data)

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=6)}{flag})"

    # arithmetic -----------------------------------------------------------
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
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)


@dataclass
class _Node:
    out: Tensor
    parents: tuple
    backward: Callable[[np.ndarray], tuple]


class Tape:
    """Ordered record of primitive operations.

    Use as a context manager; the tape is active only in the current context
    (thread), so separate tapes can be driven from separate threads.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, parents: tuple, fn: Callable) -> None:
        self.nodes.append(_Node(out, parents, fn))


class Gradients(Mapping):
    """Gradient map keyed by leaf tensor identity; unused leaves map to zeros."""

    def __init__(self, grads: Dict[int, np.ndarray], leaves: Iterable[Tensor] = ()):
        self._grads = grads
        self._leaves = {id(t): t for t in leaves}

    def __getitem__(self, t: Tensor) -> np.ndarray:
        g = self._grads.get(id(t))
        if g is None:
            return np.zeros(t.shape)
        return g

    def __iter__(self):
        return iter(self._leaves.values())

    def __len__(self) -> int:
        return len(self._leaves)

    def __contains__(self, t) -> bool:
        return isinstance(t, Tensor)


def as_tensor(x: ArrayLike) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=np.float64).copy())


def _make(arr: np.ndarray, parents: tuple, fn: Callable) -> Tensor:
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(p.requires_grad for p in parents):
        out = Tensor._wrap(arr, True)
        tape.record(out, parents, fn)
        return out
    return Tensor._wrap(arr, False)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def backward(loss: Tensor, tape: Tape, leaves: Optional[Iterable[Tensor]] = None) -> Gradients:
    """Replay ``tape`` in reverse from scalar ``loss``.

    Returns a :class:`Gradients` map. Leaves that never touched the tape get
    zero gradients.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    leaves = list(leaves) if leaves is not None else []
    grads: Dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        pgs = node.backward(g)
        for p, pg in zip(node.parents, pgs):
            if pg is None or not p.requires_grad:
                continue
            pid = id(p)
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = pg
    return Gradients(grads, leaves)


# elementwise -------------------------------------------------------------

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
    )


def power(a: ArrayLike, exponent: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(ad**exponent, (a,), lambda g: (g * exponent * ad ** (exponent - 1),))


def square(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2.0 * g * ad,))


def exp(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


def tanh(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # two-branch form avoids overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


# shape ---------------------------------------------------------------------

def tsum(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), fn)


def mean(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(a: ArrayLike, shape: tuple) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: ArrayLike, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        inv = None
    else:
        inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a: ArrayLike, index) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in parts)

    def fn(g):
        full = np.zeros(shape)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(np.array(a.data[index]), (a,), fn)


def take_rows(table: Tensor, ids) -> Tensor:
    """Embedding lookup: ``table[ids]`` with scatter-add backward."""
    ids = np.asarray(ids, dtype=np.int64)
    shape = table.shape

    def fn(g):
        full = np.zeros(shape)
        np.add.at(full, ids, g)
        return (full,)

    return _make(table.data[ids], (table,), fn)


def concat(tensors: Sequence[ArrayLike], axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]
    return _make(
        np.concatenate([t.data for t in ts], axis=axis),
        ts,
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def stack(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)

    def fn(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return _make(np.stack([t.data for t in ts], axis=axis), ts, fn)


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Matrix product for ``(..., n, k) @ (k, m)`` and ``(n, k) @ (k,)``."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if bd.ndim == 1:
        def fn(g):
            return (np.multiply.outer(g, bd), np.tensordot(g, ad, axes=(tuple(range(g.ndim)), tuple(range(g.ndim)))))
        return _make(ad @ bd, (a, b), fn)
    if bd.ndim != 2:
        raise ValueError("matmul supports a 1-D or 2-D right operand")

    def fn(g):
        ga = g @ bd.T
        a2 = ad.reshape(-1, ad.shape[-1])
        gb = a2.T @ g.reshape(-1, g.shape[-1])
        return (ga, gb)

    return _make(ad @ bd, (a, b), fn)


# normalizers -----------------------------------------------------------------

def _lse(x: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))


def logsumexp(a: ArrayLike, axis: int = -1) -> Tensor:
    """Max-shifted log-sum-exp, reducing ``axis``."""
    a = as_tensor(a)
    counters["normalizer"] += 1
    ad = a.data
    lse = _lse(ad, axis)
    soft = np.exp(ad - lse)
    return _make(
        np.squeeze(lse, axis=axis),
        (a,),
        lambda g: (np.expand_dims(g, axis) * soft,),
    )


def log_softmax(a: ArrayLike, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if a.size == 0 or a.shape[axis] == 0:
        raise ValueError("log_softmax of an empty vector")
    counters["normalizer"] += 1
    ad = a.data
    out = ad - _lse(ad, axis)
    soft = np.exp(out)
    return _make(out, (a,), lambda g: (g - soft * np.sum(g, axis=axis, keepdims=True),))


def softmax(a: ArrayLike, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    counters["normalizer"] += 1
    ad = a.data
    out = np.exp(ad - _lse(ad, axis))
    return _make(
        out, (a,), lambda g: (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)
    )


def layer_norm(a: ArrayLike, eps: float = 1e-12) -> Tensor:
    """Normalize the last axis to zero mean and unit variance (no affine)."""
    a = as_tensor(a)
    ad = a.data
    mu = ad.mean(axis=-1, keepdims=True)
    xc = ad - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    y = xc * inv

    def fn(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return _make(y, (a,), fn)


def gru_cell(x_proj: Tensor, h: Tensor, w_h: Tensor, b_h: Tensor) -> Tensor:
    """One GRU update.

    ``x_proj`` is the already-projected input ``x @ W_x + b_x`` of width 3H,
    gate order (reset, update, candidate).
    """
    xd, hd, wd = x_proj.data, h.data, w_h.data
    H = hd.shape[-1]
    gh = hd @ wd + b_h.data
    r = _sigmoid(xd[..., :H] + gh[..., :H])
    u = _sigmoid(xd[..., H : 2 * H] + gh[..., H : 2 * H])
    ghn = gh[..., 2 * H :]
    n = np.tanh(xd[..., 2 * H :] + r * ghn)
    out = (1.0 - u) * n + u * hd

    def fn(g):
        du = g * (hd - n)
        dn = g * (1.0 - u)
        dan = dn * (1.0 - n * n)
        dar = dan * ghn * r * (1.0 - r)
        dau = du * u * (1.0 - u)
        dx = np.concatenate([dar, dau, dan], axis=-1)
        dgh = np.concatenate([dar, dau, dan * r], axis=-1)
        dh = g * u + dgh @ wd.T
        h2 = hd.reshape(-1, H)
        dg2 = dgh.reshape(-1, 3 * H)
        return (dx, dh, h2.T @ dg2, dg2.sum(axis=0))

    return _make(out, (x_proj, h, w_h, b_h), fn)


# oracles & optimization --------------------------------------------------------

def finite_difference_gradient(
    f: Callable[[Tensor], ArrayLike], x: ArrayLike, h: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``."""
    base = np.array(as_tensor(x).data, dtype=np.float64)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        fp = float(as_tensor(f(Tensor(base))).data)
        flat[k] = orig - h
        fm = float(as_tensor(f(Tensor(base))).data)
        flat[k] = orig
        gflat[k] = (fp - fm) / (2.0 * h)
    return grad


@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> Dict[str, Tensor]:
    """Bias-corrected Adam. Returns new parameter tensors; ``state`` is advanced in place."""
    if state.step < 0:
        raise ValueError("Adam step counter must be non-negative")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    new = {}
    for name, p in params.items():
        g = np.asarray(grads.get(name, 0.0), dtype=np.float64)
        if g.ndim == 0:
            g = np.full(p.shape, float(g))
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros(p.shape)
            v = np.zeros(p.shape)
        if m.shape != p.shape:
            raise ValueError(f"optimizer state shape mismatch for {name}")
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        state.m[name] = m
        state.v[name] = v
        upd = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new[name] = Tensor._wrap(p.data - upd, p.requires_grad)
    return new
