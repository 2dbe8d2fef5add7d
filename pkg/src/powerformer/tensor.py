"""Dense float64 tensors with a reverse-mode tape.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure that pushes the output gradient back to them. :func:`backward`
orders the reachable graph topologically (a :class:`Tape`) and replays the
closures in reverse.
"""

from __future__ import annotations

import contextlib
import math
import os
from typing import Callable, Iterable, Sequence

import numpy as np

# Masked score entries are stored as this value instead of -inf so that score
# buffers stay finite; softmax gives zero mass to anything at or below
# MASK_THRESHOLD.
NEG_INF = float(np.finfo(np.float64).min)
MASK_THRESHOLD = -1e300

DEBUG = os.environ.get("POWERFORMER_DEBUG", "") not in ("", "0")

_grad_enabled = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class ContractError(ValueError):
    """Raised when an operation is called outside its preconditions."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """An n-dimensional float64 array with an optional gradient slot."""

    __array_ufunc__ = None  # ndarray <op> Tensor defers to Tensor's reflected op

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = "leaf"

    # -- basic protocol -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
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
        return float(self.data.reshape(()))

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- graph construction ---------------------------------------------
    @staticmethod
    def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.name = None
        out.op = op
        track = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = track
        if track:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        if DEBUG:
            _check_finite(out)
        return out

    def _accum(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + g

    # -- arithmetic -----------------------------------------------------
    def __add__(self, other) -> Tensor:
        other = as_tensor(other)
        a, b = self, other

        def bw(g):
            a._accum(_unbroadcast(g, a.shape))
            b._accum(_unbroadcast(g, b.shape))

        return Tensor._make(a.data + b.data, (a, b), bw, "add")

    __radd__ = __add__

    def __neg__(self) -> Tensor:
        a = self
        return Tensor._make(-a.data, (a,), lambda g: a._accum(-g), "neg")

    def __sub__(self, other) -> Tensor:
        return self + (-as_tensor(other))

    def __rsub__(self, other) -> Tensor:
        return as_tensor(other) + (-self)

    def __mul__(self, other) -> Tensor:
        other = as_tensor(other)
        a, b = self, other

        def bw(g):
            if a.requires_grad:
                a._accum(_unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(g * a.data, b.shape))

        return Tensor._make(a.data * b.data, (a, b), bw, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other) -> Tensor:
        other = as_tensor(other)
        a, b = self, other

        def bw(g):
            if a.requires_grad:
                a._accum(_unbroadcast(g / b.data, a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

        return Tensor._make(a.data / b.data, (a, b), bw, "div")

    def __rtruediv__(self, other) -> Tensor:
        return as_tensor(other) / self

    def __pow__(self, exponent: float) -> Tensor:
        if isinstance(exponent, Tensor):
            raise TypeError("only scalar exponents are supported")
        a, e = self, float(exponent)

        def bw(g):
            a._accum(g * e * np.power(a.data, e - 1.0))

        return Tensor._make(np.power(a.data, e), (a,), bw, "pow")

    def __matmul__(self, other) -> Tensor:
        return matmul(self, as_tensor(other))

    def __rmatmul__(self, other) -> Tensor:
        return matmul(as_tensor(other), self)

    def __getitem__(self, key) -> Tensor:
        a = self

        def bw(g):
            full = np.zeros_like(a.data)
            np.add.at(full, key, g)
            a._accum(full)

        return Tensor._make(np.array(a.data[key]), (a,), bw, "index")

    # -- shape ops ------------------------------------------------------
    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        return Tensor._make(
            a.data.reshape(shape), (a,), lambda g: a._accum(g.reshape(a.shape)), "reshape"
        )

    def transpose(self, *axes) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inv = tuple(np.argsort(axes))
        a = self
        return Tensor._make(
            a.data.transpose(axes), (a,), lambda g: a._accum(g.transpose(inv)), "transpose"
        )

    def swapaxes(self, ax1: int, ax2: int) -> Tensor:
        axes = list(range(self.ndim))
        axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
        return self.transpose(tuple(axes))

    @property
    def T(self) -> Tensor:
        return self.transpose()

    # -- reductions -----------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        a = self

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accum(np.broadcast_to(g, a.shape))

        return Tensor._make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), bw, "sum")

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        if axis is None:
            n = self.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            n = math.prod(self.shape[ax] for ax in axes)
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- elementwise functions ------------------------------------------
    def exp(self) -> Tensor:
        a = self
        out = np.exp(a.data)
        return Tensor._make(out, (a,), lambda g: a._accum(g * out), "exp")

    def log(self) -> Tensor:
        a = self
        return Tensor._make(np.log(a.data), (a,), lambda g: a._accum(g / a.data), "log")

    def tanh(self) -> Tensor:
        a = self
        out = np.tanh(a.data)
        return Tensor._make(out, (a,), lambda g: a._accum(g * (1.0 - out * out)), "tanh")

    def abs(self) -> Tensor:
        a = self
        return Tensor._make(np.abs(a.data), (a,), lambda g: a._accum(g * np.sign(a.data)), "abs")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(t: Tensor) -> None:
    if not np.all(np.isfinite(t.data)):
        raise FloatingPointError(f"non-finite values produced by op {t.op!r}")


# ---------------------------------------------------------------------------
# Named operations
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batch broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs at least 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return Tensor._make(a.data @ b.data, (a, b), bw, "matmul")


def softmax_lastdim(x: Tensor) -> Tensor:
    """Row softmax over the last axis.

    Entries at or below ``MASK_THRESHOLD`` (including -inf) get exactly zero
    mass; a row with no unmasked entry returns all zeros.
    """
    x = as_tensor(x)
    if x.shape[-1] < 1:
        raise ContractError("softmax over an empty axis")
    masked = x.data <= MASK_THRESHOLD
    safe = np.where(masked, 0.0, x.data)
    row_max = np.max(np.where(masked, -np.inf, safe), axis=-1, keepdims=True)
    row_max = np.where(np.isfinite(row_max), row_max, 0.0)
    e = np.where(masked, 0.0, np.exp(safe - row_max))
    denom = e.sum(axis=-1, keepdims=True)
    out = np.divide(e, denom, out=np.zeros_like(e), where=denom > 0)

    def bw(g):
        x._accum(out * (g - np.sum(g * out, axis=-1, keepdims=True)))

    return Tensor._make(out, (x,), bw, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardise over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if d < 1 or eps < 0:
        raise ContractError("layer_norm needs d >= 1 and eps >= 0")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"gamma/beta must have shape ({d},), got {gamma.shape}, {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        if gamma.requires_grad:
            gamma._accum(_unbroadcast(g * xhat, gamma.shape))
        if beta.requires_grad:
            beta._accum(_unbroadcast(g, beta.shape))
        if x.requires_grad:
            gx = g * gamma.data
            dx = inv * (
                gx
                - gx.mean(axis=-1, keepdims=True)
                - xhat * np.mean(gx * xhat, axis=-1, keepdims=True)
            )
            x._accum(dx)

    return Tensor._make(out, (x, gamma, beta), bw, "layer_norm")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = as_tensor(x)
    xd = x.data
    x2 = xd * xd
    t = np.tanh(_GELU_C * xd * (1.0 + 0.044715 * x2))
    out = 0.5 * xd * (1.0 + t)

    def bw(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        x._accum(g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du))

    return Tensor._make(out, (x,), bw, "gelu")


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or ``rate == 0``."""
    if not training or rate <= 0.0:
        return x
    if rate >= 1.0:
        raise ContractError("dropout rate must be < 1")
    if rng is None:
        raise ContractError("dropout in training mode needs a generator")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * keep


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                t._accum(np.take(g, np.arange(lo, hi), axis=axis))

    return Tensor._make(np.concatenate([t.data for t in ts], axis=axis), ts, bw, "concat")


def mse(pred: Tensor, target) -> Tensor:
    diff = as_tensor(pred) - as_tensor(target)
    return (diff * diff).mean()


# ---------------------------------------------------------------------------
# Tape and backward
# ---------------------------------------------------------------------------


class Tape:
    """Topologically ordered list of recorded nodes reachable from a root."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> Tape:
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
            for p in reversed(node._parents):
                if id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Populate ``grad`` on every requires-grad leaf reachable from ``loss``.

    Gradients accumulate into existing ``grad`` buffers, so call
    ``zero_grad`` on parameters between steps.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    tape = tape or Tape.from_root(loss)
    # interior nodes hold only transient grads
    interior = [n for n in tape if n._backward is not None]
    for n in interior:
        n.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    for n in interior:
        if n is not loss:
            n.grad = None


def parameters_grad_vector(params: Iterable[Tensor]) -> np.ndarray:
    return np.concatenate(
        [(p.grad if p.grad is not None else np.zeros_like(p.data)).ravel() for p in params]
    )
