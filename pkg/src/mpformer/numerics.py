"""Minimal reverse-mode autodiff over dense numpy arrays.

Every differentiable operation returns a :class:`Tensor` holding references to
its parents and a closure that pushes the upstream gradient back to them.
:func:`backward` walks that tape in reverse topological order exactly once.
"""
from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

DEFAULT_DTYPE = np.float64

_grad_enabled = True

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    """A node of the compute tape."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_consumed")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype or (data.dtype if isinstance(data, np.ndarray)
                                                and data.dtype.kind == "f" else DEFAULT_DTYPE))
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._consumed = False

    # -- construction helpers -------------------------------------------------
    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence["Tensor"],
                backward: Callable[[np.ndarray], None]) -> "Tensor":
        """Create an op output; ``backward`` receives the output gradient."""
        out = cls(data, dtype=data.dtype)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

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

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True).reshape(self.data.shape)
        else:
            self.grad += g

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # -- operators ------------------------------------------------------------
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


@contextmanager
def no_grad():
    """Disable tape recording inside the block (inference, serving)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise arithmetic -----------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(g, b.shape))

    return Tensor.from_op(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(-g, b.shape))

    return Tensor.from_op(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return Tensor.from_op(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * out / b.data, b.shape))

    return Tensor.from_op(out, (a, b), bw)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor.from_op(out, (x,), lambda g: x._accumulate(g * out))


def log(x: Tensor) -> Tensor:
    return Tensor.from_op(np.log(x.data), (x,), lambda g: x._accumulate(g / x.data))


def square(x: Tensor) -> Tensor:
    return Tensor.from_op(x.data * x.data, (x,), lambda g: x._accumulate(2.0 * g * x.data))


def gelu(x: Tensor) -> Tensor:
    """Exact GeLU, ``x * Phi(x)`` with the error-function CDF."""
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)

    def bw(g):
        x._accumulate(g * (cdf + x.data * pdf))

    return Tensor.from_op(x.data * cdf, (x,), bw)


# -- reductions and shape ops ---------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        x._accumulate(np.broadcast_to(g, x.shape))

    return Tensor.from_op(np.asarray(out), (x,), bw)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(tsum(x, axes, keepdims), 1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    return Tensor.from_op(x.data.reshape(shape), (x,), lambda g: x._accumulate(g.reshape(x.shape)))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)
    return Tensor.from_op(np.transpose(x.data, axes), (x,),
                          lambda g: x._accumulate(np.transpose(g, inv)))


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def getitem(x: Tensor, idx) -> Tensor:
    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        x._accumulate(full)

    return Tensor.from_op(np.asarray(x.data[idx]), (x,), bw)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    axis = axis % xs[0].ndim
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def bw(g):
        for x, part in zip(xs, np.split(g, sizes, axis=axis)):
            x._accumulate(part)

    return Tensor.from_op(np.concatenate([x.data for x in xs], axis=axis), xs, bw)


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]

    def bw(g):
        for i, x in enumerate(xs):
            x._accumulate(np.take(g, i, axis=axis))

    return Tensor.from_op(np.stack([x.data for x in xs], axis=axis), xs, bw)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]``; gradients scatter-add into the used rows."""
    ids = np.asarray(ids, dtype=np.int64)

    def bw(g):
        if not table.requires_grad:
            return
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, ids.reshape(-1), g.reshape(-1, table.shape[-1]))

    return Tensor.from_op(table.data[ids], (table,), bw)


# -- linear algebra ---------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product with batch dims on either side; ``da = g bᵀ``, ``db = aᵀ g``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
            b._accumulate(gb)

    return Tensor.from_op(a.data @ b.data, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


# -- normalisation and softmax --------------------------------------------------

def rmsnorm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """``x / sqrt(mean(x²) + eps) * gain`` over the last axis."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    gain = as_tensor(gain)
    d = x.shape[-1]
    inv = 1.0 / np.sqrt(np.mean(x.data * x.data, axis=-1, keepdims=True) + eps)
    xhat = x.data * inv

    def bw(g):
        if gain.requires_grad:
            gain._accumulate(_unbroadcast(g * xhat, gain.shape))
        if x.requires_grad:
            gx = g * gain.data
            x._accumulate(inv * (gx - xhat * np.sum(gx * xhat, axis=-1, keepdims=True) / d))

    return Tensor.from_op(xhat * gain.data, (x, gain), bw)


def _check_temperature(temperature: float) -> None:
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")


def softmax(x: Tensor, temperature: float = 1.0, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; ``mask`` (bool, True = keep) zeroes excluded slots."""
    _check_temperature(temperature)
    z = x.data / temperature
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / np.sum(e, axis=-1, keepdims=True)

    def bw(g):
        x._accumulate(p * (g - np.sum(g * p, axis=-1, keepdims=True)) / temperature)

    return Tensor.from_op(p, (x,), bw)


def log_softmax(x: Tensor, temperature: float = 1.0) -> Tensor:
    _check_temperature(temperature)
    z = x.data / temperature
    z = z - np.max(z, axis=-1, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        x._accumulate((g - p * np.sum(g, axis=-1, keepdims=True)) / temperature)

    return Tensor.from_op(out, (x,), bw)


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    norm = np.sqrt(np.sum(x.data * x.data, axis=-1, keepdims=True) + eps)
    y = x.data / norm

    def bw(g):
        x._accumulate((g - y * np.sum(g * y, axis=-1, keepdims=True)) / norm)

    return Tensor.from_op(y, (x,), bw)


# -- backward -----------------------------------------------------------------------

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


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf on the tape.

    A tape may be replayed only once; build a fresh forward pass for a
    second backward.
    """
    if loss.data.size != 1 or loss.ndim > 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise RuntimeError("backward already ran on this tape; rebuild the forward pass")
    loss._consumed = True
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    interior = {id(n) for n in order if n._backward is not None}
    for n in order:
        if id(n) in interior:
            n.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            node.grad = None


# -- gradient checking --------------------------------------------------------------

@dataclass
class GradReport:
    name: str
    max_rel_error: float
    worst_index: tuple[int, ...]
    size: int


@dataclass
class GradCheckResult:
    reports: list[GradReport] = field(default_factory=list)
    tol: float = 1e-4

    @property
    def max_rel_error(self) -> float:
        return max((r.max_rel_error for r in self.reports), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol

    def worst(self) -> GradReport | None:
        return max(self.reports, key=lambda r: r.max_rel_error, default=None)


def grad_check(f: Callable[[], Tensor], params: dict[str, Tensor] | Iterable[Tensor],
               h: float = 1e-5, tol: float = 1e-4) -> GradCheckResult:
    """Compare analytic gradients of ``f()`` with central differences.

    ``f`` must rebuild the loss from the current parameter values on every
    call. Relative error is ``|analytic - numeric| / max(1, |numeric|)``.
    """
    if not 1e-6 <= h <= 1e-4:
        raise ValueError("h must lie in [1e-6, 1e-4]")
    named = params.items() if isinstance(params, dict) else (
        (p.name or f"param{i}", p) for i, p in enumerate(params))
    named = list(named)
    for _, p in named:
        if p.data.dtype != np.float64:
            raise ValueError("grad_check requires 64-bit parameters")
        p.zero_grad()
    loss = f()
    backward(loss)
    analytic = {n: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for n, p in named}

    result = GradCheckResult(tol=tol)
    for n, p in named:
        flat = p.data.reshape(-1)
        numeric = np.empty_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = f().item()
            flat[i] = orig - h
            down = f().item()
            flat[i] = orig
            numeric[i] = (up - down) / (2.0 * h)
        err = np.abs(analytic[n].reshape(-1) - numeric) / np.maximum(1.0, np.abs(numeric))
        worst = int(np.argmax(err)) if err.size else 0
        result.reports.append(GradReport(n, float(err.max()) if err.size else 0.0,
                                         np.unravel_index(worst, p.shape) if err.size else (), flat.size))
        p.zero_grad()
    return result
