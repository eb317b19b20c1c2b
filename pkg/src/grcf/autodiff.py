"""Reverse-mode differentiation over float64 numpy arrays.

Each primitive produces a new :class:`Tensor` and, when any input requires a
gradient, records a closure mapping the output gradient to input gradients.
:func:`backward` walks the recorded graph once in reverse topological order.

Gradients broadcast the numpy way: an input that was broadcast in the forward
pass receives the output gradient summed back to its own shape.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DomainError, GradientError, NonFiniteError, ShapeError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Evaluate primitives without recording them (inference only)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if not _all_finite(arr):
            raise NonFiniteError(f"non-finite value in tensor {name or ''}".strip())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # operator sugar; all routes go through the module-level primitives
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

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


_add_reduce = np.add.reduce


def _all_finite(arr: np.ndarray) -> bool:
    # a finite sum implies finite elements; overflow falls through to the exact check
    if math.isfinite(_add_reduce(arr, axis=None)):
        return True
    return bool(np.isfinite(arr).all())


def _make(op: str, data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    if not _all_finite(data):
        raise NonFiniteError(f"{op}: produced a non-finite value")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.op = op
    out.name = None
    out.grad = None
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = track
    out._parents = tuple(parents) if track else ()
    out._backward = backward if track else None
    return out


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    sa, sb = a.shape, b.shape
    if sa == sb:
        return sa
    n = max(len(sa), len(sb))
    sa, sb = (1,) * (n - len(sa)) + sa, (1,) * (n - len(sb)) + sb
    out = []
    for x, y in zip(sa, sb):
        if x != y and x != 1 and y != 1:
            raise ShapeError(op, a.shape, b.shape)
        out.append(y if x == 1 else x)
    return tuple(out)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _make("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    if (b.data == 0).any():
        raise DomainError("div: division by zero")
    out = a.data / b.data
    return _make("div", out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def abs_(a) -> Tensor:
    a = as_tensor(a)
    # np.sign(0) == 0 gives the zero subgradient at the kink
    return _make("abs", np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def maximum(a, c: float) -> Tensor:
    """max(a, c) against a scalar constant; gradient 0 where a <= c."""
    a = as_tensor(a)
    mask = (a.data > c).astype(np.float64)
    return _make("maximum", np.maximum(a.data, c), (a,), lambda g: (g * mask,))


def relu(a) -> Tensor:
    return maximum(a, 0.0)


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _stable_sigmoid(a.data)
    return _make("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    t = np.tanh(a.data)
    return _make("tanh", t, (a,), lambda g: (g * (1.0 - t * t),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        e = np.exp(a.data)
    return _make("exp", e, (a,), lambda g: (g * e,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if (a.data <= 0).any():
        raise DomainError("log: argument must be positive")
    return _make("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make("square", a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if (a.data < 0).any():
        raise DomainError("sqrt: argument must be non-negative")
    r = np.sqrt(a.data)

    def back(g):
        with np.errstate(divide="ignore"):
            return (np.where(r > 0, g / (2.0 * np.where(r > 0, r, 1.0)), 0.0),)

    return _make("sqrt", r, (a,), back)


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    inside = ((a.data > lo) & (a.data < hi)).astype(np.float64)
    return _make("clip", np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def detach(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor.__new__(Tensor)
    out.data = a.data.copy()
    out.requires_grad = False
    out.grad = None
    out._parents = ()
    out._backward = None
    out.op = "detach"
    out.name = None
    return out


# ---------------------------------------------------------------- structural


def matmul(a, b) -> Tensor:
    """``a @ b`` for a of shape (..., n, k) and b of shape (k, m), or vector cases."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    out = a.data @ b.data

    def back(g):
        ga = g @ b.data.T
        a2 = a.data.reshape(-1, a.shape[-1])
        g2 = g.reshape(-1, b.shape[1])
        return ga, a2.T @ g2

    return _make("matmul", out, (a, b), back)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape)) from None
    return _make("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in ts]) from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make("concat", out, ts, back)


def take(a, idx) -> Tensor:
    """Indexing / slicing; repeated indices accumulate in the gradient."""
    a = as_tensor(a)
    try:
        out = a.data[idx]
    except IndexError:
        raise ShapeError("slice", a.shape, np.shape(idx)) from None

    def back(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make("slice", np.array(out, dtype=np.float64), (a,), back)


def _expand(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)
    return _make("sum", np.asarray(out), (a,),
                 lambda g: (np.array(_expand(g, a.shape, axis, keepdims)),))


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    if n == 0:
        raise ShapeError("mean", a.shape)
    out = _add_reduce(a.data, axis=axis, keepdims=keepdims) / n
    return _make("mean", np.asarray(out, dtype=np.float64), (a,),
                 lambda g: (np.array(_expand(g, a.shape, axis, keepdims)) / n,))


def std(a, axis=None, keepdims: bool = False) -> Tensor:
    """Population standard deviation (divide by N); zero gradient when std == 0."""
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    if n == 0:
        raise ShapeError("std", a.shape)
    mu = np.mean(a.data, axis=axis, keepdims=True)
    centered = a.data - mu
    sd_keep = np.sqrt(np.mean(centered * centered, axis=axis, keepdims=True))
    if keepdims:
        out = sd_keep
    elif axis is None:
        out = sd_keep.reshape(())
    else:
        out = np.squeeze(sd_keep, axis=axis)

    def back(g):
        gk = np.reshape(g, sd_keep.shape)
        safe = np.where(sd_keep > 0, sd_keep, 1.0)
        return (np.where(sd_keep > 0, gk * centered / (n * safe), 0.0),)

    return _make("std", np.asarray(out), (a,), back)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    return _make("softmax", s, (a,),
                 lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))


def masked_softmax(a, mask, axis: int = -1) -> Tensor:
    """Softmax over ``axis`` where ``mask`` is False positions get exactly zero weight."""
    a = as_tensor(a)
    m = np.asarray(mask, dtype=bool)
    if m.shape != a.shape:
        try:
            m = np.broadcast_to(m, a.shape)
        except ValueError:
            raise ShapeError("masked_softmax", a.shape, np.shape(mask)) from None
    if not m.any(axis=axis).all():
        raise DomainError("masked_softmax: a row has no unmasked positions")
    filled = np.where(m, a.data, -np.inf)
    z = a.data - filled.max(axis=axis, keepdims=True)
    e = np.where(m, np.exp(np.where(m, z, 0.0)), 0.0)
    s = e / e.sum(axis=axis, keepdims=True)
    return _make("masked_softmax", s, (a,),
                 lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))


# ---------------------------------------------------------------- backward


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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every requires_grad leaf."""
    if loss.size != 1:
        raise GradientError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GradientError("backward: no gradient path to any parameter")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not _all_finite(g):
            raise NonFiniteError(f"backward: non-finite gradient at {node.op}")
        if node._backward is None:
            if node.requires_grad:
                node.grad = node.grad + g if node.grad is not None else g.copy()
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad or pg is None:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.array(pg, dtype=np.float64)


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------- gradient oracle


def finite_diff_check(
    f: Callable[..., Tensor],
    x: Tensor | Sequence[Tensor],
    h: float = 1e-6,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|).

    ``x`` may be a single tensor (``f(x)`` is called) or a list of tensors that
    ``f`` closes over (``f()`` is called). ``max_coords`` subsamples coordinates
    per tensor for large parameter sets.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    single = isinstance(x, Tensor)
    xs = [x] if single else list(x)

    def evaluate() -> float:
        with no_grad():
            val = f(x) if single else f()
        v = float(np.asarray(val.data).reshape(-1)[0])
        if not np.isfinite(v):
            raise NonFiniteError("finite_diff_check: f evaluated to a non-finite value")
        return v

    for t in xs:
        if not t.requires_grad:
            raise GradientError("finite_diff_check: tensor does not require grad")
        t.zero_grad()
    backward(f(x) if single else f())
    analytic = [t.grad.copy() for t in xs]

    worst = 0.0
    for t, a_grad in zip(xs, analytic):
        t.data = np.ascontiguousarray(t.data)
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = (rng or np.random.default_rng(0)).choice(flat.size, max_coords, replace=False)
        a_flat = a_grad.reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            fp = evaluate()
            flat[c] = orig - h
            fm = evaluate()
            flat[c] = orig
            num = (fp - fm) / (2.0 * h)
            err = abs(a_flat[c] - num) / max(1.0, abs(a_flat[c]))
            worst = max(worst, err)
    return worst
