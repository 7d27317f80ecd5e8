"""Minimal reverse-mode tensor engine on float64 numpy arrays.

Every differentiable computation in this package runs through the
`Tensor` type below.  The tape is implicit: each tensor produced by an
operation stores its parents and a backward function, plus a global
monotone sequence number.  `backward()` walks the reachable subgraph in
reverse recording order exactly once and accumulates (never overwrites)
gradients into leaves, so fan-out is handled correctly.

Graphs are rebuilt per step and never reused.  All math is f64.
NaN/Inf checking at op boundaries is off by default; tests enable it via
`set_debug_checks(True)`.
"""

from __future__ import annotations

import itertools
import threading

import numpy as np

_seq = itertools.count()
_tls = threading.local()

_debug_checks = False


def set_debug_checks(flag: bool) -> None:
    """Enable NaN/Inf validation at operation boundaries (test builds)."""
    global _debug_checks
    _debug_checks = bool(flag)


def _grad_enabled() -> bool:
    return getattr(_tls, "grad_enabled", True)


class no_grad:
    """Context manager that suspends tape recording on this thread."""

    def __enter__(self):
        self.prev = _grad_enabled()
        _tls.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _tls.grad_enabled = self.prev
        return False


def _check(arr: np.ndarray, where: str) -> None:
    if _debug_checks and not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values entering graph at {where}")


class Tensor:
    """Dense f64 array node in a reverse-mode graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        _check(self.data, "Tensor()")
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._seq = next(_seq)

    # -- structure ---------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError("item() on non-scalar tensor")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """Same values, severed from the graph (stop-grad)."""
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- backward ----------------------------------------------------------

    def backward(self, seed=None) -> None:
        """Reverse-mode sweep from this tensor.

        `seed` defaults to 1 for scalars.  Visits reachable nodes in
        reverse recording order exactly once; leaf gradients accumulate.
        """
        if seed is None:
            if self.data.size != 1:
                raise ValueError("backward() without seed requires a scalar output")
            seed = np.ones_like(self.data)
        self.grad = np.asarray(seed, dtype=np.float64).reshape(self.data.shape).copy()

        nodes = []
        seen = set()
        stack = [self]
        while stack:
            t = stack.pop()
            if id(t) in seen or not t.requires_grad:
                continue
            seen.add(id(t))
            nodes.append(t)
            stack.extend(t._parents)
        nodes.sort(key=lambda t: t._seq, reverse=True)

        for t in nodes:
            if t._backward is None or t.grad is None:
                continue
            for parent, g in zip(t._parents, t._backward(t.grad)):
                if not parent.requires_grad or g is None:
                    continue
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(data: np.ndarray, parents, backward) -> Tensor:
    _check(data, backward.__qualname__ if hasattr(backward, "__qualname__") else "op")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._seq = next(_seq)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Adjoint of numpy broadcasting: reduce g down to `shape`."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise suite -------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return _make(a.data / b.data, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _make(a.data * s, (a,), lambda g: (g * s,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),))


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), lambda g: (g * 2.0 * a.data,))


def sqrt(a: Tensor) -> Tensor:
    y = np.sqrt(a.data)
    return _make(y, (a,), lambda g: (g * 0.5 / y,))


def sin(a: Tensor) -> Tensor:
    return _make(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),))


def cos(a: Tensor) -> Tensor:
    return _make(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),))


def atan2(y: Tensor, x: Tensor) -> Tensor:
    y, x = _wrap(y), _wrap(x)
    denom = y.data * y.data + x.data * x.data

    def bw(g):
        return (_unbroadcast(g * x.data / denom, y.shape),
                _unbroadcast(-g * y.data / denom, x.shape))

    return _make(np.arctan2(y.data, x.data), (y, x), bw)


def wrap_unit(a: Tensor) -> Tensor:
    """x - round(x): wraps into [-0.5, 0.5); derivative 1 a.e."""
    return _make(a.data - np.round(a.data), (a,), lambda g: (g,))


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    return _make(np.asarray(a.data.mean()), (a,),
                 lambda g: (np.full_like(a.data, g.reshape(()) / n),))


def tsum(a: Tensor) -> Tensor:
    return _make(np.asarray(a.data.sum()), (a,),
                 lambda g: (np.full_like(a.data, g.reshape(())),))


# -- shape ops ---------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                 lambda g: (g.transpose(inv),))


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Slice `length` entries from `start` along `axis`."""
    if start < 0 or start + length > a.shape[axis]:
        raise IndexError(f"slice [{start}:{start + length}] out of bounds for axis {axis} "
                         f"of extent {a.shape[axis]}")
    index = [slice(None)] * a.data.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)

    def bw(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _make(a.data[index].copy(), (a,), bw)


def concat(parts, axis: int = 0) -> Tensor:
    parts = [_wrap(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        outs = []
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            outs.append(g[tuple(index)])
        return tuple(outs)

    return _make(np.concatenate([p.data for p in parts], axis=axis), parts, bw)


def repeat0(a: Tensor, reps: int) -> Tensor:
    """Stack `reps` copies along a new leading axis; adjoint sums them."""
    out = np.broadcast_to(a.data, (reps,) + a.shape).copy()
    return _make(out, (a,), lambda g: (g.sum(axis=0),))


# -- linear algebra ------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul operands must have rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner extents disagree: {a.shape} x {b.shape}")

    def bw(g):
        ga = _unbroadcast(g @ b.data.swapaxes(-1, -2), a.shape)
        gb = _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.shape)
        return ga, gb

    return _make(a.data @ b.data, (a, b), bw)


def softmax_lastdim(a: Tensor) -> Tensor:
    """Row-stochastic softmax over the last axis, max-stabilized."""
    if a.shape[-1] < 1:
        raise ValueError("softmax needs a non-empty last axis")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)

    return _make(y, (a,), bw)


# -- validation oracle --------------------------------------------------------


def grad_check(f, x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central differences.

    `f` must map a Tensor to a scalar Tensor and be pure.  Error per
    coordinate is |analytic - fd| / (|fd| + 1e-12).
    """
    probe = Tensor(x.data.copy(), requires_grad=True)
    y = f(probe)
    if not isinstance(y, Tensor) or y.data.size != 1:
        raise ValueError("grad_check requires a scalar-valued function")
    y.backward()
    analytic = (probe.grad if probe.grad is not None else np.zeros_like(probe.data)).ravel()

    flat = x.data.ravel().copy()
    fd = np.empty_like(flat)
    with no_grad():
        for i in range(flat.size):
            h = eps * max(1.0, abs(flat[i]))
            bumped = flat.copy()
            bumped[i] = flat[i] + h
            hi = f(Tensor(bumped.reshape(x.shape))).item()
            bumped[i] = flat[i] - h
            lo = f(Tensor(bumped.reshape(x.shape))).item()
            fd[i] = (hi - lo) / (2.0 * h)

    return float(np.max(np.abs(analytic - fd) / (np.abs(fd) + 1e-12)))
