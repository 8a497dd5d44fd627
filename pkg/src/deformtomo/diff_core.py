"""Reverse-mode differentiation over numpy arrays, Adam, and a finite-difference oracle.

The tape is array-valued: every node holds a whole ``np.ndarray`` and a closure
mapping the upstream gradient to gradients of its parents. Nodes built only
from constants record nothing, so the same model code runs as plain numpy
when no parameter requires a gradient.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit


class UnsupportedPrimitiveError(TypeError):
    """Raised when a tape value is fed to an operation without a derivative rule."""


class DivergenceError(FloatingPointError):
    """Raised when a loss evaluates to a non-finite value."""

    def __init__(self, message: str, context: dict | None = None):
        super().__init__(message)
        self.context = dict(context or {})


@dataclass(frozen=True)
class ParamBlock:
    """Flat float64 storage for one optimizable tensor."""

    values: np.ndarray
    shape: tuple[int, ...]
    tag: str = ""

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=np.float64).ravel()
        shape = tuple(int(s) for s in self.shape)
        if int(np.prod(shape, dtype=np.int64)) != values.size:
            raise ValueError(f"{self.tag}: shape {shape} does not hold {values.size} values")
        if not np.all(np.isfinite(values)):
            raise ValueError(f"{self.tag}: non-finite parameter values")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "shape", shape)

    @classmethod
    def from_array(cls, array, tag: str = "") -> "ParamBlock":
        array = np.asarray(array, dtype=np.float64)
        return cls(array.ravel().copy(), array.shape, tag)

    @property
    def array(self) -> np.ndarray:
        return self.values.reshape(self.shape)

    @property
    def size(self) -> int:
        return self.values.size

    def replace(self, values) -> "ParamBlock":
        return ParamBlock(np.asarray(values, dtype=np.float64).ravel(), self.shape, self.tag)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A node on the gradient tape."""

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, value, requires_grad: bool = False, _parents=(), _backward=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable | None = _backward

    # numpy must not silently strip the tape: arithmetic is routed back here,
    # anything else is refused
    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        if method == "__call__" and not kwargs and ufunc.__name__ in _UFUNC_DISPATCH:
            return _UFUNC_DISPATCH[ufunc.__name__](*inputs)
        raise UnsupportedPrimitiveError(f"no derivative rule for numpy ufunc {ufunc.__name__!r}")

    def __array_function__(self, func, types, args, kwargs):
        raise UnsupportedPrimitiveError(f"no derivative rule for numpy function {func.__name__!r}")

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __float__(self):
        return float(self.value)

    # arithmetic
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(other))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise UnsupportedPrimitiveError("division by a tape value is not supported")
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, power):
        if power != 2:
            raise UnsupportedPrimitiveError("only squaring is supported")
        return square(self)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)

    def backward(self):
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def node(value, parents: Sequence, backward_fn) -> Tensor:
    """Create a result node; ``backward_fn(g)`` returns one gradient per parent (or None)."""
    parents = tuple(as_tensor(p) for p in parents)
    if any(p.requires_grad for p in parents):
        return Tensor(value, True, parents, backward_fn)
    return Tensor(value)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.value + b.value
    return node(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return node(-a.value, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.value * b.value
    return node(out, (a, b), lambda g: (
        _unbroadcast(g * b.value, a.shape) if a.requires_grad else None,
        _unbroadcast(g * a.value, b.shape) if b.requires_grad else None,
    ))


def square(a) -> Tensor:
    a = as_tensor(a)
    return node(a.value * a.value, (a,), lambda g: (2.0 * g * a.value,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise UnsupportedPrimitiveError("matmul is defined for 2D operands only")
    out = a.value @ b.value
    return node(out, (a, b), lambda g: (
        g @ b.value.T if a.requires_grad else None,
        a.value.T @ g if b.requires_grad else None,
    ))


def affine(x, w, b) -> Tensor:
    """``x @ w + b`` as one node."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    out = x.value @ w.value
    out += b.value
    return node(out, (x, w, b), lambda g: (
        g @ w.value.T if x.requires_grad else None,
        x.value.T @ g if w.requires_grad else None,
        g.sum(axis=0) if b.requires_grad else None,
    ))


def sin(a) -> Tensor:
    a = as_tensor(a)
    return node(np.sin(a.value), (a,), lambda g: (g * np.cos(a.value),))


def cos(a) -> Tensor:
    a = as_tensor(a)
    return node(np.cos(a.value), (a,), lambda g: (-g * np.sin(a.value),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.value, 0.0)
    return node(out, (a,), lambda g: (g * (a.value > 0),))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    return node(np.logaddexp(0.0, a.value), (a,), lambda g: (g * expit(a.value),))


def tsum(a, axis=None) -> Tensor:
    a = as_tensor(a)
    out = a.value.sum(axis=axis)

    def back(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return node(out, (a,), back)


def tmean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    count = a.value.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis), 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return node(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def take(a, index) -> Tensor:
    """Basic or integer-array indexing; gradients are scatter-added."""
    a = as_tensor(a)

    def back(g):
        out = np.zeros_like(a.value)
        np.add.at(out, index, g)
        return (out,)

    return node(a.value[index], (a,), back)


def gather_rows(a, rows: np.ndarray) -> Tensor:
    """``a[rows]`` for a 1-D integer array; backward uses bincount instead of add.at."""
    a = as_tensor(a)
    rows = np.asarray(rows, dtype=np.intp)

    def back(g):
        lead = a.shape[0]
        flat = g.reshape(len(rows), -1)
        out = np.empty((lead, flat.shape[1]))
        for j in range(flat.shape[1]):
            out[:, j] = np.bincount(rows, weights=flat[:, j], minlength=lead)
        return (out.reshape(a.shape),)

    return node(a.value[rows], (a,), back)


def concat(parts: Sequence, axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    out = np.concatenate([p.value for p in parts], axis=axis)

    def back(g):
        splits = np.cumsum(sizes)[:-1]
        return tuple(np.split(g, splits, axis=axis))

    return node(out, parts, back)


def stack(parts: Sequence, axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = np.stack([p.value for p in parts], axis=axis)
    return node(out, parts, lambda g: tuple(np.moveaxis(g, axis, 0)))


def grouped_affine(x, w, b, groups) -> Tensor:
    """Row-grouped affine map: ``out[lo:hi] = x[lo:hi] @ w[m] + b[m]`` for each ``(m, lo, hi)``.

    ``w`` is (M, fan_in, fan_out) and ``b`` is (M, fan_out); one small network
    per group, evaluated in a single node.
    """
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    out = np.empty((x.shape[0], w.shape[2]))
    for m, lo, hi in groups:
        out[lo:hi] = x.value[lo:hi] @ w.value[m] + b.value[m]

    def back(g):
        gx = np.empty_like(x.value) if x.requires_grad else None
        gw = np.zeros_like(w.value) if w.requires_grad else None
        gb = np.zeros_like(b.value) if b.requires_grad else None
        for m, lo, hi in groups:
            if gx is not None:
                gx[lo:hi] = g[lo:hi] @ w.value[m].T
            if gw is not None:
                gw[m] += x.value[lo:hi].T @ g[lo:hi]
            if gb is not None:
                gb[m] += g[lo:hi].sum(axis=0)
        return gx, gw, gb

    return node(out, (x, w, b), back)


def rotate2d(v, angle) -> Tensor:
    """Rotate rows of ``v`` (P, 2) by ``-angle`` radians (P,), i.e. apply R_{-angle}."""
    v, angle = as_tensor(v), as_tensor(angle)
    c, s = np.cos(angle.value), np.sin(angle.value)
    vx, vy = v.value[:, 0], v.value[:, 1]
    out = np.stack([c * vx + s * vy, -s * vx + c * vy], axis=1)

    def back(g):
        gx, gy = g[:, 0], g[:, 1]
        gv = np.stack([gx * c - gy * s, gx * s + gy * c], axis=1) if v.requires_grad else None
        ga = gx * out[:, 1] - gy * out[:, 0] if angle.requires_grad else None
        return gv, ga

    return node(out, (v, angle), back)


_UFUNC_DISPATCH = {
    "add": add,
    "subtract": lambda a, b: add(a, neg(b)),
    "multiply": mul,
    "negative": neg,
    "matmul": matmul,
    "sin": lambda a: sin(a),
    "cos": lambda a: cos(a),
}


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every leaf requiring a gradient."""
    if root.value.size != 1:
        raise ValueError("backward() needs a scalar root")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_ = [(root, False)]
    while stack_:
        t, expanded = stack_.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen or not t.requires_grad:
            continue
        seen.add(id(t))
        stack_.append((t, True))
        for p in t._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))

    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
    for t in reversed(order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t._backward is None:
            t.grad = g if t.grad is None else t.grad + g
            continue
        for p, pg in zip(t._parents, t._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = pg if key not in grads else grads[key] + pg


def forward_backward(loss_closure: Callable, params: Sequence[ParamBlock], context: dict | None = None):
    """Evaluate ``loss_closure(*leaves)`` and its exact gradient w.r.t. each block.

    Returns ``(loss, grads)`` with each gradient shaped like its block. The
    blocks themselves are never modified.
    """
    leaves = [Tensor(p.array.copy(), requires_grad=True) for p in params]
    loss = as_tensor(loss_closure(*leaves))
    if loss.value.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    value = float(loss.value.reshape(-1)[0])
    if not np.isfinite(value):
        raise DivergenceError(f"non-finite loss {value}", context)
    if loss.requires_grad:
        backward(loss)
    grads = [np.zeros(p.shape) if leaf.grad is None else leaf.grad.reshape(p.shape) for p, leaf in zip(params, leaves)]
    return value, grads


def finite_difference_grad(loss_closure: Callable, params: Sequence[ParamBlock], eps: float = 1e-5,
                           refine: int = 0, agree: float = 1e-8, return_steps: bool = False):
    """Central differences, one coordinate at a time. Closure receives plain arrays.

    For piecewise-smooth losses (relu, masks) a stencil that straddles a kink gives a
    wrong slope. With ``refine > 0`` every coordinate is also differenced at eps/10;
    while the two estimates differ by more than ``agree`` the step keeps shrinking,
    at most ``refine`` times. On a smooth piece the two agree to O(eps^2), so this
    never consults the analytic gradient. ``return_steps`` also returns the step
    finally used for each coordinate.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    arrays = [p.array.copy() for p in params]

    def f():
        return float(as_tensor(loss_closure(*[Tensor(a) for a in arrays])).value.reshape(-1)[0])

    def central(flat, i, h):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        return (up - down) / (2 * h)

    grads, steps = [], []
    for a in arrays:
        g, s = np.zeros_like(a), np.full(a.shape, eps)
        flat, gflat, sflat = a.reshape(-1), g.reshape(-1), s.reshape(-1)
        for i in range(flat.size):
            h = eps
            c = central(flat, i, h)
            for _ in range(refine):
                finer = central(flat, i, h / 10)
                if abs(finer - c) <= agree:
                    break
                c, h = finer, h / 10
            gflat[i], sflat[i] = c, h
        grads.append(g)
        steps.append(s)
    return (grads, steps) if return_steps else grads


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, param: ParamBlock, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> "AdamState":
        return cls(np.zeros(param.size), np.zeros(param.size), 0, lr, beta1, beta2, eps)


def adam_step(param: ParamBlock, grad, state: AdamState) -> tuple[ParamBlock, AdamState]:
    grad = np.asarray(grad, dtype=np.float64)
    if grad.size != param.size or (grad.ndim > 1 and grad.shape != param.shape):
        raise ValueError(f"{param.tag}: gradient shape {grad.shape} does not match {param.shape}")
    if state.m.shape != param.values.shape:
        raise ValueError(f"{param.tag}: optimizer state belongs to another block")
    g = grad.ravel()
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * g
    v = state.beta2 * state.v + (1.0 - state.beta2) * (g * g)
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    values = param.values - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return param.replace(values), AdamState(m, v, t, state.lr, state.beta1, state.beta2, state.eps)


def relative_error(a, b, floor: float = 1e-8) -> float:
    """max |a-b| / max(max|b|, floor), a scale-aware comparison for gradient checks."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), floor))


__all__ = [
    "AdamState", "DivergenceError", "ParamBlock", "Tensor", "UnsupportedPrimitiveError",
    "adam_step", "add", "affine", "as_tensor", "backward", "concat", "cos", "finite_difference_grad",
    "forward_backward", "gather_rows", "grouped_affine", "matmul", "rotate2d", "mul", "node", "relative_error", "relu", "reshape",
    "sin", "softplus", "square", "stack", "take", "tmean", "tsum",
]
