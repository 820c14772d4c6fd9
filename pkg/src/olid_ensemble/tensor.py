"""Reverse-mode automatic differentiation on numpy arrays.

Every differentiable operation that touches a tensor with ``requires_grad``
appends a :class:`Record` to the tape.  ``backward`` gathers the records
reachable from the loss and replays their vector-Jacobian products in
reverse creation order, each exactly once.

Arithmetic defaults to float32.  Inside :func:`check_mode` new tensors are
float64, which is what the finite-difference gradient checks run under.
"""

from __future__ import annotations

import itertools
import math
import weakref
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .rng import RngStream

_state = {"dtype": np.float32, "grad": True}
_seq = itertools.count()


class DimensionError(ValueError):
    pass


def default_dtype():
    return _state["dtype"]


@contextmanager
def check_mode():
    """Create tensors in 64-bit precision for gradient verification."""
    prev = _state["dtype"]
    _state["dtype"] = np.float64
    try:
        yield
    finally:
        _state["dtype"] = prev


@contextmanager
def no_grad():
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


@dataclass(eq=False)
class Record:
    """One tape entry: an op, its inputs, its output, and the VJP closure."""

    op: str
    inputs: tuple
    output: weakref.ref
    out_id: int
    vjp: Callable
    seq: int = field(default_factory=lambda: next(_seq))


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_record", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or default_dtype())
        self.grad = None
        self.requires_grad = requires_grad
        self._record = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def backward(self):
        backward(self)

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _const(x, like: Tensor):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _result(data, op: str, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _state["grad"] and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._record = Record(op, tuple(inputs), weakref.ref(out), id(out), vjp)
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------- tape / backward


class Tape:
    """Records reachable from ``loss``, ordered by creation."""

    def __init__(self, records: list[Record]):
        self.records = records

    @classmethod
    def from_loss(cls, loss: Tensor) -> Tape:
        seen, stack, out = set(), [loss], []
        while stack:
            t = stack.pop()
            rec = t._record
            if rec is None or id(rec) in seen:
                continue
            seen.add(id(rec))
            out.append(rec)
            stack.extend(rec.inputs)
        out.sort(key=lambda r: r.seq)
        return cls(out)

    def __len__(self):
        return len(self.records)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires grad")
    grads = {id(loss): np.ones_like(loss.data)}
    if loss._record is None:
        loss.grad = grads[id(loss)] if loss.grad is None else loss.grad + grads[id(loss)]
        return
    for rec in reversed(Tape.from_loss(loss).records):
        g = grads.pop(rec.out_id, None)
        if g is None:
            continue
        in_grads = rec.vjp(g)
        for t, gi in zip(rec.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if t._record is None:
                t.grad = gi.astype(t.dtype, copy=True) if t.grad is None else t.grad + gi
            else:
                key = id(t)
                grads[key] = gi if key not in grads else grads[key] + gi


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = (as_tensor(a), _const(b, as_tensor(a))) if isinstance(a, Tensor) else (_const(a, b), b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, "add", (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = (as_tensor(a), _const(b, as_tensor(a))) if isinstance(a, Tensor) else (_const(a, b), b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, "sub", (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = (as_tensor(a), _const(b, as_tensor(a))) if isinstance(a, Tensor) else (_const(a, b), b)
    ad, bd = a.data, b.data

    def vjp(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return _result(ad * bd, "mul", (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = (as_tensor(a), _const(b, as_tensor(a))) if isinstance(a, Tensor) else (_const(a, b), b)
    ad, bd = a.data, b.data

    def vjp(g):
        return (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(-g * ad / (bd * bd), bd.shape) if b.requires_grad else None)

    return _result(ad / bd, "div", (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, "neg", (a,), lambda g: (-g,))


def power(a: Tensor, p: float) -> Tensor:
    x = a.data
    return _result(x ** p, "power", (a,), lambda g: (g * p * x ** (p - 1),))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _result(y, "exp", (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    x = a.data
    return _result(np.log(x), "log", (a,), lambda g: (g / x,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _result(y, "tanh", (a,), lambda g: (g * (1 - y * y),))


def sigmoid(a: Tensor) -> Tensor:
    # tanh form never overflows
    y = 0.5 * (1 + np.tanh(0.5 * a.data))
    return _result(y, "sigmoid", (a,), lambda g: (g * y * (1 - y),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    c = x.dtype.type(_GELU_C)
    k = x.dtype.type(0.044715)
    t = np.tanh(c * (x + k * x ** 3))
    y = 0.5 * x * (1 + t)

    def vjp(g):
        dt = (1 - t * t) * c * (1 + 3 * k * x * x)
        return (g * (0.5 * (1 + t) + 0.5 * x * dt),)

    return _result(y, "gelu", (a,), vjp)


def dropout(a: Tensor, p: float, mode: str, rng: RngStream | None = None) -> Tensor:
    """Inverted dropout; identity in eval mode or when p == 0."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval" or p == 0.0:
        return a
    if rng is None:
        raise ValueError("train-mode dropout needs an RngStream")
    keep = rng.uniform(a.shape) >= p
    scale = (keep / (1.0 - p)).astype(a.dtype)
    return _result(a.data * scale, "dropout", (a,), lambda g: (g * scale,))


# ---------------------------------------------------------------- shape ops


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _result(a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _result(a.data.transpose(axes), "transpose", (a,), lambda g: (g.transpose(inv),))


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, tuple(axes))


def _is_basic(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (int, slice, type(None), type(Ellipsis))) for p in parts)


def getitem(a: Tensor, idx) -> Tensor:
    src_shape, dt = a.shape, a.dtype
    basic = _is_basic(idx)

    def vjp(g):
        out = np.zeros(src_shape, dtype=dt)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _result(a.data[idx], "getitem", (a,), vjp)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]``; ids must lie in [0, rows)."""
    ids = np.asarray(ids)
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise IndexError(f"token id out of range for table with {n} rows")
    flat = ids.reshape(-1)

    def vjp(g):
        g2 = g.reshape(flat.size, -1)
        out = np.zeros(table.shape, dtype=g.dtype)
        np.add.at(out, flat, g2)
        return (out,)

    return _result(table.data[ids], "embedding", (table,), vjp)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
                x != y for i, (x, y) in enumerate(zip(t.shape, ref)) if i != ax):
            raise DimensionError(f"cannot concat shapes {ref} and {t.shape} along axis {axis}")
    if len(tensors) == 1:
        return tensors[0]
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    return _result(np.concatenate([t.data for t in tensors], axis=ax), "concat", tensors,
                   lambda g: tuple(np.split(g, bounds, axis=ax)))


def split(a: Tensor, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    ax = axis % a.ndim
    if sum(sizes) != a.shape[ax]:
        raise DimensionError(f"split sizes {list(sizes)} do not cover axis of length {a.shape[ax]}")
    out, start = [], 0
    for n in sizes:
        idx = [slice(None)] * a.ndim
        idx[ax] = slice(start, start + n)
        out.append(getitem(a, tuple(idx)))
        start += n
    return out


# ---------------------------------------------------------------- reductions


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), "sum", (a,), vjp)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis, keepdims), 1.0 / float(n))


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy broadcasting over leading batch dims."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _result(ad @ bd, "matmul", (a, b), vjp)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with weight stored as [out, in]."""
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear shape mismatch: input {x.shape}, weight {weight.shape}")
    xd, wd = x.data, weight.data
    y = xd @ wd.T
    if bias is not None:
        y = y + bias.data

    def vjp(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g @ wd) if x.requires_grad else None
        gw = g2.T @ xd.reshape(-1, xd.shape[-1]) if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return _result(y, "linear", inputs, vjp)


# ---------------------------------------------------------------- normalisation


def softmax(a: Tensor, axis: int = -1, where: np.ndarray | None = None) -> Tensor:
    """Max-shifted softmax.  Entries with ``where == False`` get weight exactly 0."""
    x = a.data
    if where is not None:
        x = np.where(where, x, -np.inf)
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, "softmax", (a,), vjp)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    z = x - np.max(x, axis=axis, keepdims=True)
    y = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def vjp(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _result(y, "log_softmax", (a,), vjp)


LAYER_NORM_EPS = 1e-12


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    h = gain.shape[-1]
    if x.shape[-1] != h:
        raise DimensionError(f"layer_norm: last dim {x.shape[-1]} != {h}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gain.data + bias.data

    def vjp(g):
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(y, "layer_norm", (x, gain, bias), vjp)


# ---------------------------------------------------------------- losses

IGNORE_INDEX = -100


def cross_entropy(logits: Tensor, targets, ignore_index: int = IGNORE_INDEX) -> Tensor:
    """Mean negative log-likelihood over rows whose target != ignore_index."""
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects [N, C] logits, got {logits.shape}")
    n, c = logits.shape
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if t.shape[0] != n:
        raise DimensionError(f"{n} logit rows but {t.shape[0]} targets")
    keep = t != ignore_index
    if np.any((t[keep] < 0) | (t[keep] >= c)):
        raise IndexError(f"target outside [0, {c})")
    rows = np.nonzero(keep)[0]
    count = max(len(rows), 1)
    x = logits.data
    z = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    loss = -logp[rows, t[rows]].sum() / count

    def vjp(g):
        p = np.exp(logp[rows])
        p[np.arange(len(rows)), t[rows]] -= 1
        out = np.zeros_like(x)
        out[rows] = p * (g / count)
        return (out,)

    return _result(np.asarray(loss, dtype=x.dtype), "cross_entropy", (logits,), vjp)


def mse(pred: Tensor, target) -> Tensor:
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=pred.dtype)
    if pred.data.size != target.size:
        raise DimensionError(f"mse length mismatch: {pred.data.size} vs {target.size}")
    p = pred.data.reshape(-1)
    d = p - target.reshape(-1)
    n = d.size
    shape = pred.shape
    return _result(np.asarray((d * d).mean(), dtype=pred.dtype), "mse", (pred,),
                   lambda g: (((2.0 / n) * g * d).reshape(shape).astype(pred.dtype),))


# ---------------------------------------------------------------- gradient check


@dataclass
class GradCheckReport:
    analytic: np.ndarray
    numeric: np.ndarray
    rel_error: np.ndarray
    tol: float

    @property
    def max_rel_error(self) -> float:
        return float(self.rel_error.max()) if self.rel_error.size else 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor); the floor keeps near-zero gradients from dividing by ~0."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def numeric_grad(f: Callable[[], Tensor], x: Tensor, h: float = 1e-4, index=None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``x.data`` (perturbed in place)."""
    flat = x.data.reshape(-1)
    out = np.zeros(flat.size, dtype=np.float64)
    positions = range(flat.size) if index is None else index
    with no_grad():
        for i in positions:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f().data)
            flat[i] = orig - h
            fm = float(f().data)
            flat[i] = orig
            out[i] = (fp - fm) / (2 * h)
    return out.reshape(x.shape)


def gradient_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-4,
                   tol: float = 1e-4) -> GradCheckReport:
    """Compare the tape gradient of scalar ``f(x)`` with central differences.

    ``f`` must be deterministic (dropout in eval mode).  Run under
    :func:`check_mode` with a float64 ``x`` for meaningful tolerances.
    """
    x.requires_grad = True
    x.grad = None
    f(x).backward()
    analytic = np.array(x.grad, dtype=np.float64)
    numeric = numeric_grad(lambda: f(x), x, h)
    return GradCheckReport(analytic, numeric, relative_error(analytic, numeric), tol)
