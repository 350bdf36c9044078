"""Reverse-mode automatic differentiation on numpy arrays.

A small define-by-run tape. ``Tensor`` wraps an ndarray; primitive ops
record a backward closure and parent links, and ``Tensor.backward()``
walks the recorded graph in reverse topological order, accumulating
gradients into ``.grad``. Only the primitives this package needs are
implemented; shapes follow numpy broadcasting and gradients are reduced
back to each parent's shape.

Gradient arrays keep the dtype of the data they flow along, so running a
graph in float64 yields float64 gradients (the gradient checks rely on
this). Accumulation is never in-place, which keeps views returned by
cheap backwards (reshape, concat splits) safe to share.
"""

from __future__ import annotations

import contextlib
from typing import Iterable, Sequence

import numpy as np
from scipy import special as _special

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (forward-only evaluation)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """An ndarray plus the tape bookkeeping needed for backprop."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    # -- graph walk ----------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate gradients of this node w.r.t. every reachable leaf.

        ``grad`` seeds the walk; it defaults to 1 and may only be omitted
        for scalar outputs.
        """
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        self.grad = np.asarray(grad, dtype=self.data.dtype)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            if node is not self and node._parents:
                # interior activation grads are not needed after use
                node.grad = None

    def zero_grad(self) -> None:
        self.grad = None

    # -- operator sugar ------------------------------------------------
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

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)


def _topo_order(root: Tensor) -> list[Tensor]:
    """Iterative post-order over the tape (recursion-free for deep graphs)."""
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


def as_tensor(x, dtype=None) -> Tensor:
    """Wrap ``x`` as a constant Tensor (no-op when already a Tensor)."""
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    return Tensor(arr)


def _coerce_pair(a, b) -> tuple[Tensor, Tensor]:
    a_t = isinstance(a, Tensor)
    b_t = isinstance(b, Tensor)
    if a_t and b_t:
        return a, b
    if a_t:
        return a, Tensor(np.asarray(b, dtype=a.data.dtype))
    if b_t:
        return Tensor(np.asarray(a, dtype=b.data.dtype)), b
    return Tensor(np.asarray(a)), Tensor(np.asarray(b))


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _accum(node: Tensor, g: np.ndarray) -> None:
    if not node.requires_grad:
        return
    if node.grad is None:
        node.grad = g
    else:
        node.grad = node.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` along the axes numpy broadcast over."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- arithmetic --------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    data = a.data + b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    data = a.data - b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _make(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    data = a.data * b.data

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    data = a.data / b.data

    def backward(g):
        _accum(a, _unbroadcast(g / b.data, a.data.shape))
        _accum(b, _unbroadcast(-g * data / b.data, b.data.shape))

    return _make(data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        _accum(a, -g)

    return _make(-a.data, (a,), backward)


def square(a: Tensor) -> Tensor:
    def backward(g):
        _accum(a, g * (2.0 * a.data))

    return _make(a.data * a.data, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batch broadcasting over leading axes."""
    data = a.data @ b.data

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        _accum(a, _unbroadcast(ga, a.data.shape))
        _accum(b, _unbroadcast(gb, b.data.shape))

    return _make(data, (a, b), backward)


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Fused ``x @ w + b`` for a 2-d weight and 1-d bias.

    One tape node instead of two; the backward pass collapses the leading
    axes of ``x`` so the weight gradient is a single GEMM.
    """
    data = x.data @ w.data + b.data
    n_in, n_out = w.data.shape

    def backward(g):
        _accum(x, g @ w.data.T)
        g2 = g.reshape(-1, n_out)
        _accum(w, x.data.reshape(-1, n_in).T @ g2)
        _accum(b, g2.sum(axis=0))

    return _make(data, (x, w, b), backward)


# -- shape plumbing ----------------------------------------------------


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)

    def backward(g):
        _accum(a, g.reshape(a.data.shape))

    return _make(a.data.reshape(shape), (a,), backward)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        _accum(a, g.transpose(inv))

    return _make(a.data.transpose(axes), (a,), backward)


def concat(parts: Iterable[Tensor], axis: int) -> Tensor:
    parts = tuple(parts)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        idx = [slice(None)] * g.ndim
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            idx[axis] = slice(lo, hi)
            _accum(p, g[tuple(idx)])

    return _make(np.concatenate([p.data for p in parts], axis=axis), parts, backward)


def roll(a: Tensor, shift, axis) -> Tensor:
    """Circular shift; backward rolls the gradient the opposite way."""
    shift_t = tuple(np.atleast_1d(shift))
    axis_t = tuple(np.atleast_1d(axis))
    inv = tuple(-s for s in shift_t)

    def backward(g):
        _accum(a, np.roll(g, inv, axis_t))

    return _make(np.roll(a.data, shift_t, axis_t), (a,), backward)


def take_rows(table: Tensor, index: np.ndarray) -> Tensor:
    """Gather ``table[index]`` along axis 0 for a fixed integer index array.

    Used for relative-position-bias lookups; the index is data, not a
    differentiable input. Backward scatter-adds (duplicate indices sum).
    """
    index = np.asarray(index)

    def backward(g):
        acc = np.zeros_like(table.data)
        np.add.at(acc, index, g)
        _accum(table, acc)

    return _make(table.data[index], (table,), backward)


def take_classes(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Pick ``logits[..., labels[...]]`` along the last axis.

    Each output element touches exactly one logit element, so the
    backward scatter has no collisions.
    """
    labels = np.asarray(labels)
    idx = labels[..., None]
    data = np.take_along_axis(logits.data, idx, axis=-1)[..., 0]

    def backward(g):
        acc = np.zeros_like(logits.data)
        np.put_along_axis(acc, idx, g[..., None], axis=-1)
        _accum(logits, acc)

    return _make(data, (logits,), backward)


# -- reductions --------------------------------------------------------


def _restore_dims(g: np.ndarray, shape: tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if not keepdims:
        if axis is None:
            g = g.reshape((1,) * len(shape))
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            axes = tuple(a % len(shape) for a in axes)
            g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def backward(g):
        _accum(a, _restore_dims(g, a.data.shape, axis, keepdims).astype(a.data.dtype, copy=True))

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size / max(out.size, 1)

    def backward(g):
        scaled = _restore_dims(g, a.data.shape, axis, keepdims) / a.data.dtype.type(count)
        _accum(a, scaled)

    return _make(out, (a,), backward)


# -- pointwise nonlinearities ------------------------------------------


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def backward(g):
        _accum(a, g * data)

    return _make(data, (a,), backward)


def log(a: Tensor) -> Tensor:
    def backward(g):
        _accum(a, g / a.data)

    return _make(np.log(a.data), (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    data = np.sqrt(a.data)

    def backward(g):
        _accum(a, g * (0.5 / data))

    return _make(data, (a,), backward)


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)

    def backward(g):
        _accum(a, g * (1.0 - data * data))

    return _make(data, (a,), backward)


def absolute(a: Tensor) -> Tensor:
    def backward(g):
        _accum(a, g * np.sign(a.data))

    return _make(np.abs(a.data), (a,), backward)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU; derivative is Phi(x) + x * phi(x)."""
    x = a.data
    cdf = 0.5 * (1.0 + _special.erf(x / np.sqrt(2.0, dtype=x.dtype)))
    data = x * cdf

    def backward(g):
        pdf = np.exp(-0.5 * x * x) / x.dtype.type(np.sqrt(2.0 * np.pi))
        _accum(a, g * (cdf + x * pdf))

    return _make(data, (a,), backward)


def clip_min(a: Tensor, lo: float) -> Tensor:
    """Elementwise max(a, lo); gradient passes only where a > lo."""
    data = np.maximum(a.data, a.data.dtype.type(lo))

    def backward(g):
        _accum(a, g * (a.data > lo))

    return _make(data, (a,), backward)


# -- fused normalization / attention pieces ----------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * data).sum(axis=axis, keepdims=True)
        _accum(a, data * (g - inner))

    return _make(data, (a,), backward)


def logsumexp(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = m + np.log(s)
    soft = e / s
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def backward(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        _accum(a, gk * soft)

    return _make(out, (a,), backward)


def standardize(a: Tensor, floor: float = 1e-6) -> Tensor:
    """Zero-mean unit-variance over the last axis, std floored at ``floor``.

    Where the floor engages the token's std behaves as a constant, so the
    usual layer-norm backward drops its variance term there.
    """
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    sigma = np.sqrt((xc * xc).mean(axis=-1, keepdims=True))
    s = np.maximum(sigma, a.data.dtype.type(floor))
    y = xc / s
    live = sigma > floor

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        _accum(a, (g - gm - live * y * gy) / s)

    return _make(y, (a,), backward)


def stop_grad(a: Tensor) -> Tensor:
    """Detach: forwards the value, blocks the gradient."""
    return Tensor(a.data)
