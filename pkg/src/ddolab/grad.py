"""Minimal define-by-run reverse-mode autodiff over float64 numpy arrays.

Usage (``from ddolab import grad as G``)::

    with Tape() as tape:
        w = tape.watch(np.zeros(3))
        loss = G.sum(G.square(w - 1.0))
    (g,) = tape.gradient(loss, [w])

Operations on tensors that are not watched by the active tape are evaluated
eagerly and never recorded, so the same model code serves both the training
path and the gradient-free evaluation path.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "GradError", "ShapeError", "NonFiniteError", "Tensor", "Tape",
    "as_tensor", "add", "sub", "mul", "div", "neg", "matmul", "exp", "log",
    "square", "sum", "mean", "sigmoid", "log_sigmoid", "softplus",
    "log_softmax", "tanh", "silu", "affine", "squared_error", "pick",
    "take_rows", "reshape", "concat", "finite_difference_check",
]


class GradError(Exception):
    pass


class ShapeError(GradError, ValueError):
    def __init__(self, op: str, a: tuple, b: tuple):
        super().__init__(f"{op}: incompatible shapes {a} and {b}")
        self.op, self.shapes = op, (a, b)


class NonFiniteError(GradError, FloatingPointError):
    def __init__(self, op: str):
        super().__init__(f"{op}: non-finite value in forward pass")
        self.op = op


_local = threading.local()


def _active() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


@dataclass
class _Node:
    op: str
    parents: tuple[int, ...]
    vjp: Callable[[np.ndarray], tuple] | None


class Tensor:
    __slots__ = ("data", "tape", "node")
    __array_ufunc__ = None

    def __init__(self, data, tape: "Tape | None" = None, node: int | None = None):
        data = np.asarray(data, dtype=np.float64)
        if data.ndim > 2:
            raise ShapeError("tensor", data.shape, ("rank <= 2",))
        self.data = data
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def tracked(self) -> bool:
        return self.node is not None and self.tape is _active()

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        flag = ", tracked" if self.tracked else ""
        return f"Tensor(shape={self.shape}{flag})"

    __add__ = lambda a, b: add(a, b)
    __radd__ = lambda a, b: add(b, a)
    __sub__ = lambda a, b: sub(a, b)
    __rsub__ = lambda a, b: sub(b, a)
    __mul__ = lambda a, b: mul(a, b)
    __rmul__ = lambda a, b: mul(b, a)
    __truediv__ = lambda a, b: div(a, b)
    __rtruediv__ = lambda a, b: div(b, a)
    __neg__ = lambda a: neg(a)
    __matmul__ = lambda a, b: matmul(a, b)
    __rmatmul__ = lambda a, b: matmul(b, a)


class Tape:
    """Records operations between ``__enter__`` and ``__exit__``.

    One tape per worker thread; tapes are never shared.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def watch(self, value) -> Tensor:
        data = value.data if isinstance(value, Tensor) else value
        self.nodes.append(_Node("leaf", (), None))
        return Tensor(np.array(data, dtype=np.float64), self, len(self.nodes) - 1)

    def _record(self, op, parents, vjp) -> int:
        self.nodes.append(_Node(op, parents, vjp))
        return len(self.nodes) - 1

    def gradient(self, target: Tensor, sources: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradients of scalar ``target`` w.r.t. each of ``sources``."""
        if target.data.size != 1:
            raise ShapeError("gradient", target.shape, ())
        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        if target.tape is self and target.node is not None:
            grads[target.node] = np.ones_like(target.data)
            for i in range(target.node, -1, -1):
                g = grads[i]
                node = self.nodes[i]
                if g is None or not node.parents:
                    continue
                for p, pg in zip(node.parents, node.vjp(g)):
                    if p < 0 or pg is None:
                        continue
                    grads[p] = pg if grads[p] is None else grads[p] + pg
        out = []
        for s in sources:
            g = grads[s.node] if (s.tape is self and s.node is not None) else None
            out.append(np.zeros_like(s.data) if g is None else np.asarray(g).reshape(s.shape))
        return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check(op: str, value: np.ndarray) -> np.ndarray:
    # a finite sum implies finite entries; fall back to the full scan otherwise
    with np.errstate(over="ignore", invalid="ignore"):
        if np.isfinite(value.sum()):
            return value
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(op)
    return value


def _emit(op: str, value, inputs: Sequence[Tensor], vjp) -> Tensor:
    value = _check(op, np.asarray(value, dtype=np.float64))
    tape = _active()
    if tape is None:
        return Tensor(value)
    parents = tuple(t.node if (t.tape is tape and t.node is not None) else -1 for t in inputs)
    if all(p < 0 for p in parents):
        return Tensor(value)
    return Tensor(value, tape, tape._record(op, parents, vjp))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _bshape(op, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# -- binary ------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape("add", a, b)
    sa, sb = a.shape, b.shape
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape("mul", a, b)
    ad, bd = a.data, b.data
    return _emit("mul", ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _emit("div", out, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape),
                            _unbroadcast(-g * out / bd, bd.shape)))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data
    return _emit("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


# -- unary -------------------------------------------------------------------

def neg(a) -> Tensor:
    a = as_tensor(a)
    return _emit("neg", -a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _emit("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return _emit("log", out, (a,), lambda g: (g / ad,))


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _emit("square", ad * ad, (a,), lambda g: (2.0 * g * ad,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _emit("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid_np(a.data)
    return _emit("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _emit("softplus", np.logaddexp(0.0, ad), (a,), lambda g: (g * _sigmoid_np(ad),))


def log_sigmoid(a) -> Tensor:
    # -softplus(-x); never log(sigmoid(x))
    a = as_tensor(a)
    ad = a.data
    return _emit("log_sigmoid", -np.logaddexp(0.0, -ad), (a,),
                 lambda g: (g * _sigmoid_np(-ad),))


def silu(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    s = _sigmoid_np(ad)
    return _emit("silu", ad * s, (a,), lambda g: (g * s * (1.0 + ad * (1.0 - s)),))


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    soft = np.exp(out)
    return _emit("log_softmax", out, (a,),
                 lambda g: (g - soft * g.sum(axis=axis, keepdims=True),))


# -- reductions and indexing ---------------------------------------------------

def sum(a, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("sum", a.data.sum(axis=axis, keepdims=keepdims), (a,), vjp)


def mean(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def squared_error(a, b) -> Tensor:
    """Row-wise squared Euclidean distance ``sum((a - b)**2, axis=-1)``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("squared_error", a.shape, b.shape)
    return sum(square(sub(a, b)), axis=-1)


def pick(a, index) -> Tensor:
    """``a[i, index[i]]`` for a 2-D tensor, or ``a[index]`` for a vector."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    shape = a.shape
    if a.data.ndim == 1:
        def vjp(g):
            out = np.zeros(shape)
            np.add.at(out, index, g)
            return (out,)
        return _emit("pick", a.data[index], (a,), vjp)
    if a.data.ndim != 2 or index.shape != (shape[0],):
        raise ShapeError("pick", shape, index.shape)
    rows = np.arange(shape[0])

    def vjp(g):
        out = np.zeros(shape)
        out[rows, index] = g
        return (out,)

    return _emit("pick", a.data[rows, index], (a,), vjp)


def take_rows(a, index) -> Tensor:
    """Embedding lookup: rows of a 2-D tensor."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return _emit("take_rows", a.data[index], (a,), vjp)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _emit("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat", ts[0].shape, ts[-1].shape) from None
    return _emit("concat", out, ts, lambda g: tuple(np.split(g, sizes, axis=axis)))


def affine(x, weight, bias) -> Tensor:
    return add(matmul(x, weight), bias)


# -- checking ------------------------------------------------------------------

def finite_difference_check(loss_fn: Callable[..., Tensor], params: Sequence[np.ndarray],
                            step: float = 1e-5, eps_abs: float = 1e-8) -> float:
    """Max relative error between autodiff and central differences.

    ``loss_fn`` receives one tensor per entry of ``params`` and must return a
    scalar tensor.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    params = [np.array(p, dtype=np.float64) for p in params]
    with Tape() as tape:
        watched = [tape.watch(p) for p in params]
        loss = loss_fn(*watched)
        _check("finite_difference_check", loss.data)
        grads = tape.gradient(loss, watched)

    def value(ps):
        v = float(as_tensor(loss_fn(*[Tensor(p) for p in ps])).data)
        if not np.isfinite(v):
            raise NonFiniteError("finite_difference_check")
        return v

    worst = 0.0
    for k, p in enumerate(params):
        flat = p.reshape(-1)
        for i in range(flat.size):
            probe = [q.copy() for q in params]
            pf = probe[k].reshape(-1)
            pf[i] = flat[i] + step
            hi = value(probe)
            pf[i] = flat[i] - step
            lo = value(probe)
            fd = (hi - lo) / (2.0 * step)
            err = abs(grads[k].reshape(-1)[i] - fd) / (abs(fd) + eps_abs)
            worst = max(worst, float(err))
    return worst
