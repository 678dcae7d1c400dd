"""Dense n-d tensors with reverse-mode automatic differentiation.

A thin numpy-backed graph engine: each operation records its parents and a
closure that maps the output gradient to parent gradients. ``backward`` on a
scalar walks the graph once in reverse topological order, accumulating
gradients across fan-out, then frees the graph.

Storage is float32 by default; ``precision("float64")`` switches new tensors
(and therefore whole runs) to float64, which is what gradient verification
uses. Broadcasting on ``+``/``*`` is restricted to matching trailing axes.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "ShapeError",
    "precision",
    "set_default_dtype",
    "default_dtype",
    "no_grad",
    "concat",
    "softmax",
    "layer_norm",
    "gelu",
    "cross_entropy",
    "linear",
]


class ShapeError(ValueError):
    """Raised when operand shapes do not conform."""


_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype!r}; use float32 or float64")
    _DEFAULT_DTYPE = dt.type


def default_dtype():
    return _DEFAULT_DTYPE


@contextmanager
def precision(dtype):
    """Run a block with a different default dtype (e.g. ``precision("float64")``)."""
    global _DEFAULT_DTYPE
    old = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _DEFAULT_DTYPE = old


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference mode)."""
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


class _Node:
    __slots__ = ("parents", "backward_fn")

    def __init__(self, parents, backward_fn):
        self.parents = parents
        self.backward_fn = backward_fn


class Tensor:
    """Dense float array, optionally participating in a differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype if dtype is not None else _DEFAULT_DTYPE)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        if isinstance(other, (int, float)):
            return _shift(self, float(other))
        return _add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return _scale(self, float(other))
        return _mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            return _shift(self, -float(other))
        return _add(self, _scale(other, -1.0))

    def __neg__(self):
        return _scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- structural ---------------------------------------------------------

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, *axes):
        return transpose(self, *axes)

    def slice_axis(self, axis, start, stop):
        return slice_axis(self, axis, start, stop)

    def broadcast_to(self, shape):
        return broadcast_to(self, shape)

    def sum(self):
        return _reduce(self, "sum")

    def mean(self):
        return _reduce(self, "mean")

    def backward(self) -> None:
        backward(self)


def _result(data, parents, backward_fn):
    out = Tensor(data, dtype=data.dtype)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = _Node(tuple(parents), backward_fn)
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    # Sum out leading axes introduced by trailing-axes broadcasting.
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    return g


def _trailing_compatible(sa, sb) -> bool:
    if sa == sb:
        return True
    small, big = (sa, sb) if len(sa) < len(sb) else (sb, sa)
    return big[len(big) - len(small):] == small


# -- elementwise ------------------------------------------------------------


def _add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if not _trailing_compatible(a.shape, b.shape):
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not match on trailing axes")
    data = a.data + b.data

    def bw(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _result(data, (a, b), bw)


def _mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if not _trailing_compatible(a.shape, b.shape):
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not match on trailing axes")
    data = a.data * b.data

    def bw(g):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    return _result(data, (a, b), bw)


def _scale(a, s: float):
    a = _as_tensor(a)
    return _result(a.data * s, (a,), lambda g: (g * s,))


def _shift(a, s: float):
    a = _as_tensor(a)
    return _result(a.data + s, (a,), lambda g: (g,))


# -- matmul -----------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product on the last two axes.

    Supports 2-d x 2-d, equal-leading-dims stacks, and stack x 2-d (weight
    application); in the last case the weight gradient sums over the stack.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-d, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} vs {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: leading dimensions differ, {a.shape} vs {b.shape}")
    data = a.data @ b.data

    def bw(g):
        ga = g @ b.data.swapaxes(-1, -2)
        gb = a.data.swapaxes(-1, -2) @ g
        return ga, _reduce_to(gb, b.shape)

    return _result(data, (a, b), bw)


def linear(x: Tensor, w: Tensor, bias: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if bias is None else _add(y, bias)


# -- structural -------------------------------------------------------------


def reshape(t: Tensor, *shape) -> Tensor:
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    old = t.shape
    data = t.data.reshape(shape)
    return _result(data, (t,), lambda g: (g.reshape(old),))


def transpose(t: Tensor, *axes) -> Tensor:
    if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
        axes = tuple(axes[0])
    if not axes:
        axes = tuple(reversed(range(t.ndim)))
    if sorted(axes) != list(range(t.ndim)):
        raise ShapeError(f"transpose: {axes} is not a permutation of axes of shape {t.shape}")
    inv = np.argsort(axes)
    data = t.data.transpose(axes)
    return _result(data, (t,), lambda g: (g.transpose(inv),))


def slice_axis(t: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * t.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    data = t.data[idx]

    def bw(g):
        full = np.zeros_like(t.data)
        full[idx] = g
        return (full,)

    return _result(data, (t,), bw)


def concat(tensors, axis: int) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        out = []
        for i in range(len(tensors)):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(offsets[i], offsets[i + 1])
            out.append(g[tuple(idx)])
        return tuple(out)

    return _result(data, tuple(tensors), bw)


def broadcast_to(t: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if not _trailing_compatible(t.shape, shape) or len(shape) < t.ndim:
        raise ShapeError(f"broadcast_to: cannot expand {t.shape} to {shape}")
    data = np.broadcast_to(t.data, shape).copy()
    return _result(data, (t,), lambda g: (_reduce_to(g, t.shape),))


def _reduce(t: Tensor, kind: str) -> Tensor:
    n = t.size
    if kind == "sum":
        data = t.data.sum()
        bw = lambda g: (np.full(t.shape, g, dtype=t.data.dtype),)
    else:
        data = t.data.mean()
        bw = lambda g: (np.full(t.shape, g / n, dtype=t.data.dtype),)
    return _result(np.asarray(data), (t,), bw)


# -- neural-net ops ---------------------------------------------------------


def softmax(t: Tensor, axis: int = -1) -> Tensor:
    """Max-stabilized softmax; slices along ``axis`` sum to 1."""
    x = t.data
    if np.isnan(x).any():
        raise ValueError("softmax: input contains NaN")
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _result(y, (t,), bw)


def layer_norm(t: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize the last axis, then apply the affine ``gamma * xhat + beta``.

    A constant slice standardizes to zero (variance 0 plus eps), so its
    output is exactly ``beta``.
    """
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    d = t.shape[-1] if t.ndim else 0
    if d == 0:
        raise ShapeError("layer_norm: zero-length normalization axis")
    gamma, beta = _as_tensor(gamma), _as_tensor(beta)
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gamma/beta must have shape ({d},), got {gamma.shape} and {beta.shape}")
    x = t.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = gamma.data * xhat + beta.data

    def bw(g):
        reduce_axes = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=reduce_axes)
        dbeta = g.sum(axis=reduce_axes)
        dxhat = g * gamma.data
        # d/dx of (x - mu(x)) * inv(x): standard layer-norm backward
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        return dx, dgamma, dbeta

    return _result(y, (t, gamma, beta), bw)


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(t: Tensor) -> Tensor:
    """Gaussian error linear unit, exact erf form: x * Phi(x)."""
    x = t.data
    phi = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    y = x * phi

    def bw(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return (g * (phi + x * pdf),)

    return _result(y.astype(x.dtype, copy=False), (t,), bw)


def cross_entropy(logits: Tensor, targets, ignore_id: int | None = None) -> Tensor:
    """Mean negative log-softmax over rows whose target is not ``ignore_id``.

    Returns a scalar tensor; 0 when every row is ignored.
    """
    t = np.asarray(targets)
    if logits.ndim != 2 or t.ndim != 1 or t.shape[0] != logits.shape[0]:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {t.shape}")
    n, k = logits.shape
    keep = np.ones(n, dtype=bool) if ignore_id is None else (t != ignore_id)
    kept_targets = t[keep]
    if kept_targets.size and (kept_targets.min() < 0 or kept_targets.max() >= k):
        raise IndexError(f"cross_entropy: target id outside [0, {k})")
    x = logits.data
    m = x.max(axis=1, keepdims=True)
    z = x - m
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    n_kept = int(keep.sum())
    if n_kept == 0:
        return _result(np.asarray(x.dtype.type(0.0)), (logits,), lambda g: (np.zeros_like(x),))
    logp = z[keep, t[keep]] - lse[keep, 0]
    loss = -logp.sum() / n_kept

    def bw(g):
        p = np.exp(z - lse)
        p[np.arange(n)[keep], t[keep]] -= 1.0
        p[~keep] = 0.0
        return (p * (g / n_kept),)

    return _result(np.asarray(x.dtype.type(loss)), (logits,), bw)


# -- backward ---------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every reachable tensor with ``requires_grad``.

    Visits each node exactly once in reverse topological order and frees the
    graph afterwards; gradients accumulate across fan-out.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("backward: loss does not require grad")

    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in visited:
            continue
        visited.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for p in t.node.parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for t in reversed(order):
        if t.node is None or t.grad is None:
            continue
        grads = t.node.backward_fn(t.grad)
        for p, gp in zip(t.node.parents, grads):
            if not p.requires_grad or gp is None:
                continue
            gp = np.asarray(gp, dtype=p.data.dtype)
            if p.grad is None:
                p.grad = gp.reshape(p.shape).copy()
            else:
                p.grad += gp.reshape(p.shape)
    # free the graph; intermediate grads are no longer needed
    for t in order:
        if t.node is not None:
            t.node = None
            t.grad = None
