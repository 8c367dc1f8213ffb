"""Dense f64 tensors with reverse-mode automatic differentiation.

Every op returns a new :class:`Tensor`. When grad mode is on and some input
requires a gradient, the output keeps references to its inputs and a closure
mapping the output gradient to input gradients; :func:`backward` walks that
graph once in reverse topological order. A graph can be differentiated only
once: afterwards its closures are dropped and a second call raises
:class:`~fslab.errors.TapeError`.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from fslab import _kernels
from fslab.errors import NumericalError, ShapeError, TapeError

STD_EPS = 1e-5

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph construction on the current thread."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward=None, _op: str = ""):
        arr = np.asarray(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NumericalError(f"non-finite values produced by {_op or 'constructor'}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple = _parents
        self._backward: Callable | None = _backward
        self._op = _op
        self._consumed = False

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self._op or 'leaf'})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators --------------------------------------------------------
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
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(data, True, _parents=tuple(parents), _backward=backward, _op=op)
    return Tensor(data, _op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcast-compatible") from None


# -- elementwise arithmetic ----------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data

    def backward(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _make(out, (a, b), backward, "div")


def scalar_mul(a, s: float) -> Tensor:
    a = as_tensor(a)
    s = float(s)
    return _make(a.data * s, (a,), lambda g: (g * s,), "scalar_mul")


def power(a: Tensor, exponent: float) -> Tensor:
    e = float(exponent)
    return _make(a.data ** e, (a,), lambda g: (g * e * a.data ** (e - 1.0),), "power")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make(out, (a,), lambda g: (g / a.data,), "log")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


# -- linear algebra ---------------------------------------------------------
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ for {a.shape} and {b.shape}")
    out = a.data @ b.data

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), backward, "matmul")


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def getitem(a: Tensor, idx) -> Tensor:
    out = a.data[idx]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(out, copy=True), (a,), backward, "slice")


slice_ = getitem


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate in the backward pass."""
    indices = np.asarray(indices, dtype=np.intp)
    out = np.take(a.data, indices, axis=axis)

    def backward(g):
        full = np.zeros_like(a.data)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        return (full,)

    return _make(out, (a,), backward, "take")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"concat along axis {axis}: incompatible shapes "
                         f"{[t.shape for t in tensors]}") from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(tensors)))

    return _make(out, tensors, backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return concat([reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in map(as_tensor, tensors)], axis)


# -- reductions ---------------------------------------------------------------
def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def _expand(g, shape, axes, keepdims):
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)
    return _make(out, (a,), lambda g: (np.array(_expand(g, a.shape, axes, keepdims)),), "sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes]))
    if n == 0:
        raise ShapeError(f"mean over empty axes {axes} of shape {a.shape}")
    out = a.data.mean(axis=axes, keepdims=keepdims)
    return _make(out, (a,), lambda g: (_expand(g, a.shape, axes, keepdims) / n,), "mean")


def var(a: Tensor, axis=None, keepdims=False) -> Tensor:
    """Population variance (divides by the number of reduced elements)."""
    mu = mean(a, axis, keepdims=True)
    return mean((a - mu) * (a - mu), axis, keepdims)


def std(a: Tensor, axis=None, keepdims=False, eps: float = STD_EPS) -> Tensor:
    """sqrt(population variance + eps)."""
    return sqrt(var(a, axis, keepdims) + eps)


def instance_norm(x: Tensor, eps: float = STD_EPS) -> Tensor:
    """Normalize each (n, c) map by its own spatial mean and std; no running stats."""
    if x.ndim != 4:
        raise ShapeError(f"instance_norm expects N,C,H,W input, got {x.shape}")
    mu = mean(x, (2, 3), keepdims=True)
    return (x - mu) / std(x, (2, 3), keepdims=True, eps=eps)


batch_norm_free = instance_norm


def logsumexp(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    if a.shape[axis] == 0:
        raise ShapeError(f"logsumexp over empty axis {axis} of shape {a.shape}")
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.log(s) + m
    soft = e / s
    if not keepdims:
        out = np.squeeze(out, axis)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * soft,)

    return _make(out, (a,), backward, "logsumexp")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if a.ndim == 0 or a.shape[axis] == 0:
        raise ShapeError(f"softmax over empty axis {axis} of shape {a.shape}")
    e = np.exp(a.data - a.data.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), backward, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    return a - logsumexp(a, axis, keepdims=True)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of row-wise softmax(logits).

    ``labels`` is either an integer vector of class indices or a matrix of
    target probabilities with the same shape as ``logits``.
    """
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects (batch, classes) logits, got {logits.shape}")
    labels = np.asarray(labels)
    logp = log_softmax(logits, axis=1)
    if labels.ndim == 1:
        if labels.shape[0] != logits.shape[0]:
            raise ShapeError(f"cross_entropy: {labels.shape[0]} labels for logits {logits.shape}")
        picked = logp[np.arange(labels.shape[0]), labels.astype(np.intp)]
        return -mean(picked)
    if labels.shape != logits.shape:
        raise ShapeError(f"cross_entropy: soft targets {labels.shape} vs logits {logits.shape}")
    return -sum_(logp * Tensor(labels)) / float(labels.shape[0])


# -- distances -----------------------------------------------------------------
def _check_pair(a: Tensor, b: Tensor, op: str):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"{op}: need (m, d) and (n, d) matrices, got {a.shape} and {b.shape}")


def l2_distance_pairwise(a: Tensor, b: Tensor, squared: bool = True) -> Tensor:
    """(m, n) matrix of (squared) Euclidean distances between rows of a and b."""
    _check_pair(a, b, "l2_distance_pairwise")
    diff = reshape(a, (a.shape[0], 1, a.shape[1])) - reshape(b, (1, b.shape[0], b.shape[1]))
    d2 = sum_(diff * diff, axis=2)
    return d2 if squared else sqrt(d2)


def l2_normalize(a: Tensor, axis: int = -1) -> Tensor:
    norm = sqrt(sum_(a * a, axis=axis, keepdims=True))
    if (norm.data == 0).any():
        raise NumericalError("l2_normalize: zero-norm vector")
    return a / norm


def cosine_similarity_pairwise(a: Tensor, b: Tensor) -> Tensor:
    _check_pair(a, b, "cosine_similarity_pairwise")
    return matmul(l2_normalize(a, 1), transpose(l2_normalize(b, 1)))


# -- convolution and pooling --------------------------------------------------
def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of N,C,H,W input with O,C,KH,KW weights."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects rank-4 input and weight, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} has {x.shape[1]} channels, weight {w.shape} expects {w.shape[1]}")
    if x.shape[2] + 2 * padding < w.shape[2] or x.shape[3] + 2 * padding < w.shape[3]:
        raise ShapeError(f"conv2d: kernel {w.shape[2:]} larger than padded input {x.shape}")
    bias = as_tensor(b) if b is not None else Tensor(np.zeros(w.shape[0]))
    if bias.shape != (w.shape[0],):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match weight {w.shape}")
    out = _kernels.conv2d_forward(x.data, w.data, bias.data, stride, padding)

    def backward(g):
        return _kernels.conv2d_backward(g, x.data, w.data, stride, padding)

    return _make(out, (x, w, bias), backward, "conv2d")


def max_pool2d(x: Tensor, kernel: int = 2, stride: int | None = None) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"max_pool2d expects N,C,H,W input, got {x.shape}")
    stride = kernel if stride is None else stride
    N, C, H, W = x.shape
    if H < kernel or W < kernel:
        raise ShapeError(f"max_pool2d: kernel {kernel} larger than input {x.shape}")
    win = np.lib.stride_tricks.sliding_window_view(x.data, (kernel, kernel), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    Ho, Wo = win.shape[2], win.shape[3]
    flat = win.reshape(N, C, Ho, Wo, kernel * kernel)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        dx = np.zeros_like(x.data)
        ki, kj = np.divmod(arg, kernel)
        n, c, i, j = np.indices(arg.shape)
        np.add.at(dx, (n, c, i * stride + ki, j * stride + kj), g)
        return (dx,)

    return _make(out, (x,), backward, "max_pool2d")


# -- backward -------------------------------------------------------------------
def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
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
    """Populate ``.grad`` on every leaf that requires a gradient.

    Raises TapeError if ``loss`` is not a scalar, is not part of a graph, the
    graph was already differentiated, or a leaf still holds a gradient from a
    previous call (reset it with ``zero_grad`` first).
    """
    if loss.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise TapeError("loss is not on the tape (no input requires grad)")
    order = _topo_order(loss)
    for node in order:
        if node._consumed:
            raise TapeError("graph already consumed by a previous backward()")
        if node.is_leaf and node.grad is not None:
            raise TapeError("leaf already holds a gradient; call zero_grad() before backward()")
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node.is_leaf:
            node.grad = np.zeros_like(node.data) if g is None else np.array(g, dtype=np.float64)
            continue
        if g is not None:
            for parent, pg in zip(node._parents, node._backward(g)):
                if not parent.requires_grad:
                    continue
                pg = np.asarray(pg, dtype=np.float64)
                if pg.shape != parent.shape:
                    pg = _unbroadcast(pg, parent.shape)
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg
        node._consumed = True
        node._backward = None
        node._parents = ()


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
