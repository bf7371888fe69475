"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record themselves on the innermost active :class:`GradTape` when at
least one input has ``requires_grad``.  Outside a tape everything is plain
numpy evaluation, which is what inference paths use.
"""
from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .errors import ContractError, DimensionError, NumericError

LOG_FLOOR = 1e-12

_local = threading.local()


def _tape_stack() -> list:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def current_tape() -> "GradTape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "grad", "requires_grad")
    __array_ufunc__ = None  # make numpy defer to our reflected operators

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __pow__(self, power: float): return power_(self, power)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, idx): return getitem(self, idx)

    def sum(self, axis=None, keepdims=False): return sum_(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)


class _Node:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


class GradTape:
    """Ordered record of differentiable operations.

    Nodes are appended in execution order, so the list is already a
    topological order; :func:`backward` walks it in reverse.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._produced: set[int] = set()
        self._leaves: dict[int, Tensor] = {}

    def __enter__(self) -> "GradTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, inputs: Sequence[Tensor], output: Tensor, backward: Callable) -> None:
        for t in inputs:
            if t.requires_grad and id(t) not in self._produced:
                self._leaves.setdefault(id(t), t)
        self._produced.add(id(output))
        self.nodes.append(_Node(tuple(inputs), output, backward))

    @property
    def leaves(self) -> list[Tensor]:
        return list(self._leaves.values())


def backward(loss: Tensor, tape: GradTape, accumulate: bool = False) -> None:
    """Populate ``grad`` on every leaf recorded on ``tape``.

    Leaf gradients are reset to zero first unless ``accumulate`` is true, in
    which case they add onto whatever a previous call left behind.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if len(tape) == 0 and not tape.leaves:
        raise ContractError("backward called on an empty tape")
    for leaf in tape.leaves:
        if not accumulate or leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)
    for node in tape.nodes:
        node.output.grad = None
    if not loss.requires_grad or id(loss) not in tape._produced:
        return
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        g = node.output.grad
        if g is None:
            continue
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if t.grad is None:
                t.grad = np.array(gi, dtype=np.float64, copy=True).reshape(t.shape)
            else:
                t.grad = t.grad + gi


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, inputs: Sequence[Tensor], bw: Callable) -> Tensor:
    out = Tensor(data)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(inputs, out, bw)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise DimensionError(f"axis {axis} out of range for {ndim}-d tensor")
    return axis % ndim


# elementwise arithmetic

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def power_(a: Tensor, p: float) -> Tensor:
    return _make(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor, floor: float = LOG_FLOOR) -> Tensor:
    """Natural log of ``max(a, floor)``; zero gradient where clamped."""
    clipped = np.maximum(a.data, floor)
    live = a.data > floor
    return _make(np.log(clipped), (a,), lambda g: (np.where(live, g / clipped, 0.0),))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def sigmoid(a: Tensor) -> Tensor:
    out = expit(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def silu(a: Tensor) -> Tensor:
    s = expit(a.data)
    return _make(a.data * s, (a,), lambda g: (g * s * (1.0 + a.data * (1.0 - s)),))


def relu(a: Tensor) -> Tensor:
    return _make(np.maximum(a.data, 0.0), (a,), lambda g: (g * (a.data > 0),))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(axis, a.ndim)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), bw)


def logsumexp(a: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(axis, a.ndim)
    m = a.data.max(axis=axis, keepdims=True)
    s = np.exp(a.data - m).sum(axis=axis, keepdims=True)
    out = (m + np.log(s)).squeeze(axis)

    def bw(g):
        w = np.exp(a.data - m) / s
        return (np.expand_dims(g, axis) * w,)

    return _make(out, (a,), bw)


# reductions and shape ops

def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _make(out, (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return sum_(a, axis, keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    inv = None if axes is None else np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a: Tensor, idx) -> Tensor:
    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(a.data[idx], (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    axis = _check_axis(axis, tensors[0].ndim)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                 lambda g: tuple(np.split(g, splits, axis=axis)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not align")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


# network primitives (NCHW layout)

def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Stride-1 'same' convolution with an odd square kernel."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv2d got input {x.shape} and weight {w.shape}")
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    p = k // 2
    # channel-major layout keeps every window slice contiguous in its last two axes
    xc = x.data.transpose(1, 0, 2, 3)
    if p:
        xc = np.pad(xc, ((0, 0), (0, 0), (p, p), (p, p)))
    cols = np.empty((c, k, k, n, h, wd))
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xc[:, :, i:i + h, j:j + wd]
    cols = cols.reshape(c * k * k, n * h * wd)
    wmat = w.data.reshape(o, -1)
    out = wmat @ cols
    if b is not None:
        out += b.data[:, None]
    out = np.ascontiguousarray(out.reshape(o, n, h, wd).transpose(1, 0, 2, 3))

    def bw(g):
        gt = g.transpose(1, 0, 2, 3).reshape(o, -1)
        gw = (gt @ cols.T).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (wmat.T @ gt).reshape(c, k, k, n, h, wd)
            dxp = np.zeros((c, n, h + 2 * p, wd + 2 * p))
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i:i + h, j:j + wd] += dcols[:, i, j]
            gx = dxp[:, :, p:p + h, p:p + wd].transpose(1, 0, 2, 3)
        if b is None:
            return gx, gw
        return gx, gw, gt.sum(axis=1)

    inputs = (x, w) if b is None else (x, w, b)
    return _make(out, inputs, bw)


def avg_pool2(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"avg_pool2 needs even spatial dims, got {h}x{w}")
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def bw(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25,)

    return _make(out, (x,), bw)


def upsample2(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    return _make(out, (x,), lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),))


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: kept units are scaled by ``1/(1-rate)``."""
    if rate <= 0.0:
        return x
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _make(x.data * mask, (x,), lambda g: (g * mask,))


# gradient checking

def fd_gradcheck(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-6,
                 indices: Sequence[int] | None = None, floor: float = 1e-6) -> float:
    """Largest relative gap between autodiff and central-difference gradients.

    Per coordinate the error is ``|a - n| / max(|a|, |n|, floor)``; the floor
    keeps coordinates whose true gradient is ~0 from dividing roundoff by
    roundoff.  ``indices`` restricts probing to a subset of flat coordinates.
    """
    if not 1e-8 <= eps <= 1e-3:
        raise ContractError(f"eps must lie in [1e-8, 1e-3], got {eps}")
    xa = Tensor(x.data.copy(), requires_grad=True)
    with GradTape() as tape:
        y = f(xa)
    if y.size != 1:
        raise ContractError("fd_gradcheck needs a scalar-valued function")
    if len(tape):
        backward(y, tape)
    analytic = (xa.grad if xa.grad is not None else np.zeros_like(xa.data)).reshape(-1)

    base = x.data.reshape(-1)
    idx = range(base.size) if indices is None else indices
    worst = 0.0
    for i in idx:
        probe = base.copy()
        probe[i] = base[i] + eps
        fp = f(Tensor(probe.reshape(x.shape))).item()
        probe[i] = base[i] - eps
        fm = f(Tensor(probe.reshape(x.shape))).item()
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"function not finite when probing coordinate {i}")
        numeric = (fp - fm) / (2.0 * eps)
        a = analytic[i]
        err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
        worst = max(worst, err)
    return worst
