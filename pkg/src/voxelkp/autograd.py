"""Tape-based reverse-mode differentiation over numpy arrays.

Each op computes its forward value eagerly and, when a tape is active and
some input needs a gradient, appends a closure mapping the output gradient
to input gradients. ``Tape.backward`` replays those closures in reverse.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np


class TapeError(RuntimeError):
    pass


class Var:
    __slots__ = ("value", "grad", "requires_grad", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        return f"Var(shape={self.value.shape}, dtype={self.value.dtype}, name={self.name})"


class Param(Var):
    """Trainable array; ``grad`` is allocated eagerly so optimizers can rely on it."""

    __slots__ = ()

    def __init__(self, value, name: str | None = None):
        super().__init__(value, requires_grad=True, name=name)
        self.grad = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


_ACTIVE: list["Tape"] = []


def active_tape() -> "Tape | None":
    return _ACTIVE[-1] if _ACTIVE else None


class Tape:
    """Ordered record of executed ops.

    Use as a context manager around the forward pass, then call
    ``backward(loss)`` once.
    """

    def __init__(self):
        self.records: list[tuple[Var, tuple, Callable]] = []
        self._consumed = False

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def __len__(self):
        return len(self.records)

    def record(self, out: Var, inputs: Sequence[Var], backward: Callable):
        self.records.append((out, tuple(inputs), backward))

    def backward(self, loss: Var, seed: float = 1.0):
        if not self.records:
            raise TapeError("backward called before any forward op was recorded")
        if self._consumed:
            raise TapeError("tape already consumed by a previous backward")
        if loss.value.size != 1:
            raise TapeError("backward needs a scalar loss")
        if not any(out is loss for out, _, _ in self.records):
            raise TapeError("loss was not produced on this tape")
        loss.grad = np.full_like(loss.value, seed)
        for out, inputs, fn in reversed(self.records):
            if out.grad is None:
                continue
            grads = fn(out.grad)
            for inp, g in zip(inputs, grads):
                if g is None or not inp.requires_grad:
                    continue
                if inp.grad is None:
                    inp.grad = np.array(g, dtype=inp.value.dtype, copy=True)
                else:
                    inp.grad += g
            # intermediate grads are dead once propagated
            if not isinstance(out, Param):
                out.grad = None
        self._consumed = True
        self.records.clear()


@contextlib.contextmanager
def no_grad():
    saved = list(_ACTIVE)
    _ACTIVE.clear()
    try:
        yield
    finally:
        _ACTIVE.extend(saved)


def make(value, inputs: Sequence[Var], backward: Callable) -> Var:
    """Wrap an op result, recording ``backward`` when any input needs a gradient."""
    tape = active_tape()
    needs = tape is not None and any(i.requires_grad for i in inputs)
    out = Var(value, requires_grad=needs)
    if needs:
        tape.record(out, inputs, backward)
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --- elementwise / shape ops ---------------------------------------------

def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    sa, sb = a.shape, b.shape
    return make(a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    sa, sb = a.shape, b.shape
    return make(a.value - b.value, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value
    return make(av * bv, (a, b),
                lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def scale(a, c: float) -> Var:
    a = as_var(a)
    c = a.value.dtype.type(c)
    return make(a.value * c, (a,), lambda g: (g * c,))


def add_n(xs: Sequence) -> Var:
    xs = [as_var(x) for x in xs]
    total = xs[0].value.copy()
    for x in xs[1:]:
        total = total + x.value
    return make(total, xs, lambda g: tuple(g for _ in xs))


def total_sum(a) -> Var:
    a = as_var(a)
    shape, dt = a.shape, a.dtype
    return make(np.asarray(a.value.sum(), dtype=dt), (a,), lambda g: (np.broadcast_to(g, shape).astype(dt),))


def reshape(a, shape) -> Var:
    a = as_var(a)
    orig = a.shape
    return make(a.value.reshape(shape), (a,), lambda g: (g.reshape(orig),))


def concat(xs: Sequence, axis: int = 0) -> Var:
    xs = [as_var(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    cuts = np.cumsum(sizes)[:-1]
    return make(np.concatenate([x.value for x in xs], axis=axis), xs,
                lambda g: tuple(np.split(g, cuts, axis=axis)))


def take_cols(a, start: int, stop: int) -> Var:
    a = as_var(a)
    shape = a.shape

    def back(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[:, start:stop] = g
        return (full,)

    return make(a.value[:, start:stop], (a,), back)


def gather_rows(a, rows: np.ndarray) -> Var:
    """``a[rows]``; duplicate rows accumulate their gradients."""
    a = as_var(a)
    n = a.shape[0]
    return make(a.value[rows], (a,), lambda g: (scatter_add_rows(g, rows, n),))


def _groups(rows: np.ndarray):
    """Stable grouping of ``rows``: (order, sorted rows, group starts, group sizes)."""
    order = np.argsort(rows, kind="stable")
    r = rows[order]
    starts = np.flatnonzero(np.r_[True, r[1:] != r[:-1]])
    return order, r, starts, np.diff(np.r_[starts, r.size])


def scatter_add_rows(values: np.ndarray, rows: np.ndarray, n: int) -> np.ndarray:
    """``out[rows[i]] += values[i]``.

    Groups of up to 8 rows are summed strictly in input order (so a sum of
    a few multiscale features is reproducible by hand); larger groups go
    through ``reduceat``, which is deterministic but not sequential.
    """
    out = np.zeros((n,) + values.shape[1:], dtype=values.dtype)
    rows = np.asarray(rows, dtype=np.int64)
    if rows.size == 0:
        return out
    order, r, starts, counts = _groups(rows)
    if counts.max() <= 8:
        for k in range(int(counts.max())):
            sel = starts[counts > k] + k
            out[r[sel]] += values[order[sel]]
    else:
        out[r[starts]] = np.add.reduceat(values[order], starts, axis=0)
    return out


def segment_sum(a, seg: np.ndarray, n: int) -> Var:
    """Sum rows of ``a`` sharing a segment id; output has ``n`` rows."""
    a = as_var(a)
    return make(scatter_add_rows(a.value, seg, n), (a,), lambda g: (g[seg],))


def segment_mean(a, seg: np.ndarray, n: int) -> Var:
    """Per-segment ``mean(axis=0)`` of the rows of ``a``, rows taken in input order."""
    a = as_var(a)
    seg = np.asarray(seg, dtype=np.int64)
    counts = np.bincount(seg, minlength=n)
    if np.any(counts == 0):
        raise ValueError("empty segment")
    order, r, starts, sizes = _groups(seg)
    vals = a.value[order]
    out = np.empty((n,) + a.shape[1:], dtype=a.dtype)
    for s, c in zip(starts, sizes):
        out[r[s]] = vals[s:s + c].sum(axis=0)
    cnt = counts.astype(a.dtype)[:, None]
    out /= cnt
    return make(out, (a,), lambda g: ((g / cnt)[seg],))


# --- activations ---------------------------------------------------------

def relu(a) -> Var:
    a = as_var(a)
    mask = a.value > 0
    return make(np.where(mask, a.value, 0).astype(a.dtype), (a,), lambda g: (g * mask,))


def sigmoid(a) -> Var:
    a = as_var(a)
    s = _sigmoid(a.value)
    return make(s, (a,), lambda g: (g * s * (1 - s),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(a, axis: int = -1) -> Var:
    a = as_var(a)
    s = _softmax(a.value, axis)

    def back(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return make(s, (a,), back)


def _softmax(x: np.ndarray, axis: int) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def clamp(a, lo: float, hi: float) -> Var:
    a = as_var(a)
    inside = (a.value >= lo) & (a.value <= hi)
    return make(np.clip(a.value, lo, hi), (a,), lambda g: (g * inside,))


# --- dense layers --------------------------------------------------------

def linear(x, w, b=None) -> Var:
    """Row-wise affine map ``x @ w + b``."""
    x, w = as_var(x), as_var(w)
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"linear: input has {x.shape[-1]} channels, weight expects {w.shape[0]}")
    out = x.value @ w.value
    if b is None:
        return make(out, (x, w), lambda g: (g @ w.value.T, x.value.T @ g))
    b = as_var(b)
    return make(out + b.value, (x, w, b), lambda g: (g @ w.value.T, x.value.T @ g, g.sum(axis=0)))


def batch_norm(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Var:
    """Per-channel normalization over rows; updates running stats in place when training."""
    x, gamma, beta = as_var(x), as_var(gamma), as_var(beta)
    n = x.shape[0]
    if n == 0:
        raise ValueError("batch_norm on zero rows")
    xv = x.value
    if training:
        mean = xv.mean(axis=0)
        var = xv.var(axis=0)
        unbiased = var * (n / (n - 1)) if n > 1 else var
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * unbiased
    else:
        mean = running_mean.astype(xv.dtype)
        var = running_var.astype(xv.dtype)
    inv = (1.0 / np.sqrt(var + eps)).astype(xv.dtype)
    xhat = (xv - mean) * inv
    out = xhat * gamma.value + beta.value

    def back(g):
        dg = (g * xhat).sum(axis=0)
        db = g.sum(axis=0)
        gx = g * gamma.value
        if training:
            dx = inv * (gx - gx.mean(axis=0) - xhat * (gx * xhat).mean(axis=0))
        else:
            dx = gx * inv
        return dx, dg, db

    return make(out, (x, gamma, beta), back)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Var:
    x, gamma, beta = as_var(x), as_var(gamma), as_var(beta)
    xv = x.value
    mean = xv.mean(axis=1, keepdims=True)
    var = xv.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xv - mean) * inv
    out = xhat * gamma.value + beta.value

    def back(g):
        gx = g * gamma.value
        dx = inv * (gx - gx.mean(axis=1, keepdims=True) - xhat * (gx * xhat).mean(axis=1, keepdims=True))
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return make(out, (x, gamma, beta), back)


def stack(xs: Sequence, axis: int = -1) -> Var:
    xs = [as_var(x) for x in xs]
    n = len(xs)
    return make(np.stack([x.value for x in xs], axis=axis), xs,
                lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def take(a, i: int, axis: int = 1) -> Var:
    """Slice ``a`` at position ``i`` along ``axis`` keeping that axis (length 1)."""
    a = as_var(a)
    shape = a.shape
    sl = [slice(None)] * a.value.ndim
    sl[axis] = slice(i, i + 1)
    sl = tuple(sl)

    def back(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[sl] = g
        return (full,)

    return make(a.value[sl], (a,), back)
