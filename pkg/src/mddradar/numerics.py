"""Small reverse-mode automatic differentiation engine over float64 arrays.

Every differentiable operation builds a new :class:`Tensor` that remembers its
parents and a closure mapping the upstream gradient to one gradient per
parent.  :func:`backward` replays those closures in reverse topological order
and sums gradients wherever a tensor feeds more than one consumer.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(FloatingPointError):
    """Input contains NaN or otherwise unusable floating point values."""


class ContractError(ValueError):
    """A documented precondition was violated."""


class Tensor:
    """Dense float64 array with an optional gradient buffer.

    ``data`` is a numpy array (row-major); ``grad`` is ``None`` until a
    backward pass reaches the tensor, then an array of the same shape.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


_state = threading.local()


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate without recording parents (per-thread)."""
    prev = getattr(_state, "off", False)
    _state.off = True
    try:
        yield
    finally:
        _state.off = prev


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.requires_grad = not getattr(_state, "off", False) and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


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


def backward(root: Tensor) -> None:
    """Populate ``grad`` on every tensor reachable from the scalar ``root``.

    Gradients accumulate: leaves that already hold a gradient are added to,
    so callers reset parameters between optimisation steps.
    """
    if root.size != 1:
        raise ContractError(f"backward() needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise ContractError("backward() root is not attached to any differentiable input")
    order = _topo_order(root)
    # interior gradients are rebuilt on every pass; leaves keep accumulating
    for node in order:
        if node._backward is not None:
            node.grad = None
    root.grad = np.ones_like(root.data)
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        grads = node._backward(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.array(g, dtype=np.float64)
            else:
                parent.grad = parent.grad + g


# --- elementwise ---------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
        "mul",
    )


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def clamp_min(a: Tensor, floor: float) -> Tensor:
    """``max(a, floor)``; gradient passes only where ``a`` is above the floor."""
    mask = a.data > floor
    return _make(np.where(mask, a.data, floor), (a,), lambda g: (g * mask,), "clamp_min")


def grad_reverse(a: Tensor, eta: float) -> Tensor:
    """Identity forward; multiplies the upstream gradient by ``-eta``."""
    if eta < 0:
        raise ContractError(f"gradient reversal coefficient must be >= 0, got {eta}")
    eta = float(eta)
    return _make(a.data.copy(), (a,), lambda g: (-eta * g,), "grad_reverse")


# --- reductions ----------------------------------------------------------


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    shape = a.shape
    if axis is None:
        return _make(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")
    ax = axis % a.ndim
    return _make(
        a.data.sum(axis=ax),
        (a,),
        lambda g: (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),),
        "sum",
    )


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / n)


def max(a: Tensor, axis: int = -1) -> Tensor:  # noqa: A001
    """Maximum over ``axis``; the subgradient goes to the first maximal entry."""
    ax = axis % a.ndim
    idx = np.argmax(a.data, axis=ax)
    out = np.take_along_axis(a.data, np.expand_dims(idx, ax), axis=ax).squeeze(ax)

    def _bw(g):
        grad = np.zeros_like(a.data)
        np.put_along_axis(grad, np.expand_dims(idx, ax), np.expand_dims(g, ax), axis=ax)
        return (grad,)

    return _make(out, (a,), _bw, "max")


def logsumexp(z: Tensor, axis: int = -1) -> Tensor:
    """Stable ``log(sum(exp(z)))`` along ``axis`` via a max shift."""
    if np.isnan(z.data).any():
        raise NumericError("logsumexp received NaN input")
    if z.size == 0:
        raise ContractError("logsumexp of an empty vector")
    ax = axis % z.ndim
    m = z.data.max(axis=ax, keepdims=True)
    shifted = np.exp(z.data - m)
    s = shifted.sum(axis=ax, keepdims=True)
    out = (m + np.log(s)).squeeze(ax)
    soft = shifted / s
    return _make(out, (z,), lambda g: (np.expand_dims(g, ax) * soft,), "logsumexp")


# --- shape ---------------------------------------------------------------


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def flatten(a: Tensor, start: int = 0) -> Tensor:
    return reshape(a, a.shape[:start] + (-1,))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    return _make(
        np.concatenate([t.data for t in tensors], axis=ax),
        tensors,
        lambda g: tuple(np.split(g, bounds, axis=ax)),
        "concat",
    )


def take_rows(a: Tensor, start: int, stop: int) -> Tensor:
    """Rows ``start:stop`` along the leading axis."""
    shape = a.shape

    def _bw(g):
        grad = np.zeros(shape)
        grad[start:stop] = g
        return (grad,)

    return _make(a.data[start:stop], (a,), _bw, "take_rows")


def pick(a: Tensor, index) -> Tensor:
    """Select ``a[i, index[i]]`` row-wise (or ``a[index]`` for a vector)."""
    index = np.asarray(index, dtype=np.int64)
    if a.ndim == 1:
        i = int(index)

        def _bw1(g):
            grad = np.zeros_like(a.data)
            grad[i] = g
            return (grad,)

        return _make(np.asarray(a.data[i]), (a,), _bw1, "pick")
    rows = np.arange(a.shape[0])

    def _bw(g):
        grad = np.zeros_like(a.data)
        grad[rows, index] = g
        return (grad,)

    return _make(a.data[rows, index], (a,), _bw, "pick")


# --- linear algebra ------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def conv2d(x: Tensor, kernels: Tensor, stride: int = 1) -> Tensor:
    """Valid (unpadded) 2-D cross-correlation.

    ``x`` is ``(c, h, w)`` or batched ``(n, c, h, w)``; ``kernels`` is
    ``(o, c, kh, kw)``.
    """
    if stride < 1:
        raise ContractError(f"stride must be positive, got {stride}")
    batched = x.ndim == 4
    if not batched and x.ndim != 3:
        raise DimensionError(f"conv2d input must be (c,h,w) or (n,c,h,w), got {x.shape}")
    if kernels.ndim != 4:
        raise DimensionError(f"conv2d kernels must be (o,c,kh,kw), got {kernels.shape}")
    xd = x.data if batched else x.data[None]
    n, c, h, w = xd.shape
    o, kc, kh, kw = kernels.shape
    if kc != c:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape}, kernels {kernels.shape}")
    if kh > h or kw > w:
        raise DimensionError(f"conv2d kernel {kernels.shape} larger than input {x.shape}")
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    # (n, c, ho, wo, kh, kw)
    win = sliding_window_view(xd, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    kd = kernels.data
    out = np.tensordot(win, kd, axes=([1, 4, 5], [1, 2, 3]))  # (n, ho, wo, o)
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def _bw(g):
        gb = g if batched else g[None]
        gk = np.tensordot(gb, win, axes=([0, 2, 3], [0, 2, 3]))  # (o, c, kh, kw)
        gx = np.zeros_like(xd)
        for i in range(kh):
            for j in range(kw):
                contrib = np.tensordot(gb, kd[:, :, i, j], axes=([1], [0]))  # (n, ho, wo, c)
                gx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += contrib.transpose(0, 3, 1, 2)
        return (gx if batched else gx[0], gk)

    return _make(out if batched else out[0], (x, kernels), _bw, "conv2d")


# --- checking ------------------------------------------------------------


def grad_check(fn: Callable[[Tensor], Tensor], point, step: float = 1e-5) -> float:
    """Worst componentwise relative error between reverse-mode and central differences.

    The relative error uses ``max(|analytic|, |numeric|, 1e-8)`` as denominator.
    """
    if step <= 0:
        raise ContractError(f"step must be positive, got {step}")
    base = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    x = Tensor(base.copy(), requires_grad=True)
    y = fn(x)
    if y.requires_grad:
        backward(y)
    analytic = x.grad if x.grad is not None else np.zeros_like(base)
    numeric = np.zeros_like(base)
    flat = base.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = float(fn(Tensor(base)).data)
        flat[i] = orig - step
        lo = float(fn(Tensor(base)).data)
        flat[i] = orig
        num_flat[i] = (hi - lo) / (2 * step)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if base.size else 0.0
