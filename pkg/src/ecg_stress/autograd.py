"""Minimal reverse-mode automatic differentiation on top of numpy.

Every value flowing through the network is a :class:`Tensor` holding a
float64 array. Operations on tensors that require gradients append a node
to an implicit tape (the ``_parents`` links plus a backward closure);
:func:`backward` walks that DAG once in reverse topological order.

Only the primitives the stress-detection network needs are provided:
matmul, 1D convolution, 1D max pooling, dense layers, ReLU/sigmoid,
softmax over the last axis, layer normalisation and inverted dropout, plus
the elementwise arithmetic used to glue them together.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError

__all__ = [
    "Tensor",
    "Rng",
    "backward",
    "no_grad",
    "record_kinks",
    "matmul",
    "conv1d",
    "maxpool1d",
    "dense",
    "relu",
    "sigmoid",
    "elementwise",
    "softmax_lastdim",
    "layer_norm",
    "dropout",
]

_tape_ids = itertools.count()
_grad_enabled = True
_kink_log: list | None = None

# exp() of anything beyond this overflows or underflows to exactly 0.
_SIGMOID_CLAMP = 700.0


class Rng:
    """Seeded counter-based generator handed to every stochastic op.

    Backed by numpy's Philox bit generator, so a given seed produces the
    same stream on every platform. ``spawn`` derives independent child
    streams (one per fold, per epoch, ...) from the parent seed.
    """

    algorithm = "philox4x64"

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.Philox(self.seed))

    def spawn(self, index: int) -> "Rng":
        child = np.random.SeedSequence([self.seed, int(index)])
        return Rng(int(child.generate_state(1, np.uint64)[0]))

    def random(self, shape) -> np.ndarray:
        return self._gen.random(shape)

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        return self._gen.uniform(low, high, shape)

    def normal(self, loc: float = 0.0, scale: float = 1.0, shape=None):
        return self._gen.normal(loc, scale, shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, a, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(a, size=size, replace=replace)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed})"


class Tensor:
    """n-dimensional float64 array with an optional gradient tape node."""

    __slots__ = ("data", "grad", "requires_grad", "tape_id", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.tape_id: int | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward_fn) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out.requires_grad = False
        out.tape_id = None
        out._parents = ()
        out._backward = None
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out.tape_id = next(_tape_ids)
            out._parents = tuple(parents)
            out._backward = backward_fn
        return out

    # -- array-like surface ------------------------------------------------
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
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- arithmetic ----------------------------------------------------------
    def __add__(self, other):
        other = _lift(other)
        a_shape, b_shape = self.shape, other.shape
        return Tensor._from_op(
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)),
        )

    __radd__ = __add__

    def __neg__(self):
        return Tensor._from_op(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        return self + (-_lift(other))

    def __rsub__(self, other):
        return _lift(other) + (-self)

    def __mul__(self, other):
        other = _lift(other)
        a, b = self.data, other.data
        return Tensor._from_op(
            a * b,
            (self, other),
            lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _lift(other)
        a, b = self.data, other.data
        return Tensor._from_op(
            a / b,
            (self, other),
            lambda g: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)),
        )

    def __pow__(self, exponent: float):
        a = self.data
        return Tensor._from_op(a**exponent, (self,), lambda g: (g * exponent * a ** (exponent - 1),))

    def __matmul__(self, other):
        return matmul(self, other)

    # -- reductions and shape ------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape

        def grad_fn(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._from_op(np.sum(self.data, axis=axis, keepdims=keepdims), (self,), grad_fn)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        count = self.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return Tensor._from_op(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),))

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inverse = tuple(np.argsort(axes))
        return Tensor._from_op(
            np.ascontiguousarray(self.data.transpose(axes)),
            (self,),
            lambda g: (g.transpose(inverse),),
        )

    def log(self) -> "Tensor":
        a = self.data
        return Tensor._from_op(np.log(a), (self,), lambda g: (g / a,))

    def clamp(self, low: float | None = None, high: float | None = None) -> "Tensor":
        a = self.data
        out = np.clip(a, low, high)
        passthrough = out == a
        return Tensor._from_op(out, (self,), lambda g: (g * passthrough,))


def _lift(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` back down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# tape control
# ---------------------------------------------------------------------------


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate without recording any tape nodes."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


@contextlib.contextmanager
def record_kinks() -> Iterator[list]:
    """Collect the branch decisions of every ReLU and max-pool evaluated inside.

    Two forward passes whose recorded lists compare equal took the same
    piecewise-linear branch everywhere, so a finite difference between them
    does not straddle a kink.
    """
    global _kink_log
    previous = _kink_log
    _kink_log = []
    try:
        yield _kink_log
    finally:
        _kink_log = previous


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf tensor that ``loss`` depends on.

    Leaf gradients accumulate additively, both across fan-out inside one
    graph and across repeated calls; callers reset them with ``zero_grad``.
    """
    if loss.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``a`` may carry leading batch axes; ``b`` is either a plain matrix
    shared across the batch or has the same leading axes as ``a``.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch mismatch: {a.shape} @ {b.shape}")
    A, B = a.data, b.data

    def grad_fn(g):
        dA = g @ np.swapaxes(B, -1, -2)
        if B.ndim == 2 and A.ndim > 2:
            dB = A.reshape(-1, A.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            dB = np.swapaxes(A, -1, -2) @ g
        return dA, dB

    return Tensor._from_op(A @ B, (a, b), grad_fn)


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Fully connected layer ``x @ w + b`` over the last axis of ``x``."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"dense shape mismatch: x {x.shape}, w {w.shape}, b {b.shape}")
    return matmul(x, w) + b


def _conv1d_backward(g, x, w, cols, stride):
    """Gradients of a valid 1D convolution; ``cols`` is the strided input view."""
    batch, c_in, length = x.shape
    c_out, _, kernel = w.shape
    n_out = g.shape[-1]
    # g: (B, O, T); cols: (B, C, T, K)
    dw = np.einsum("bot,bctk->ock", g, cols, optimize=True)
    dcols = np.einsum("bot,ock->bctk", g, w, optimize=True)
    dx = np.zeros_like(x)
    span = stride * (n_out - 1) + 1
    for k in range(kernel):
        dx[:, :, k : k + span : stride] += dcols[:, :, :, k]
    return dx, dw, g.sum(axis=(0, 2))


def conv1d(x: Tensor, w: Tensor, bias: Tensor, stride: int = 1) -> Tensor:
    """Valid (unpadded) strided convolution, ``x`` is ``(batch, c_in, len)``."""
    if stride <= 0:
        raise ValueError(f"conv1d stride must be positive, got {stride}")
    if x.ndim != 3 or w.ndim != 3 or w.shape[1] != x.shape[1] or bias.shape != (w.shape[0],):
        raise ShapeError(f"conv1d shape mismatch: x {x.shape}, w {w.shape}, bias {bias.shape}")
    kernel = w.shape[2]
    if x.shape[2] < kernel:
        raise ShapeError(
            f"conv1d would produce an empty output: length {x.shape[2]} < kernel {kernel}"
        )
    X, W = x.data, w.data
    cols = sliding_window_view(X, kernel, axis=2)[:, :, ::stride, :]
    batch, c_in, n_out, _ = cols.shape
    flat = cols.transpose(0, 2, 1, 3).reshape(batch, n_out, c_in * kernel)
    out = flat @ W.reshape(W.shape[0], -1).T
    out = out.transpose(0, 2, 1) + bias.data[None, :, None]

    def grad_fn(g):
        return _conv1d_backward(g, X, W, cols, stride)

    return Tensor._from_op(np.ascontiguousarray(out), (x, w, bias), grad_fn)


def maxpool1d(x: Tensor, pool: int, stride: int) -> Tensor:
    """Max over sliding windows of the last axis; ties go to the first maximum."""
    if pool <= 0 or stride <= 0:
        raise ValueError(f"maxpool1d pool and stride must be positive, got {pool}, {stride}")
    if x.ndim != 3:
        raise ShapeError(f"maxpool1d expects (batch, channels, len), got {x.shape}")
    if x.shape[2] < pool:
        raise ShapeError(
            f"maxpool1d would produce an empty output: length {x.shape[2]} < pool {pool}"
        )
    X = x.data
    windows = sliding_window_view(X, pool, axis=2)[:, :, ::stride, :]
    arg = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]
    if _kink_log is not None:
        _kink_log.append(arg)

    def grad_fn(g):
        dx = np.zeros_like(X)
        span = stride * (g.shape[-1] - 1) + 1
        for p in range(pool):
            dx[:, :, p : p + span : stride] += np.where(arg == p, g, 0.0)
        return (dx,)

    return Tensor._from_op(np.ascontiguousarray(out), (x,), grad_fn)


def relu(x: Tensor) -> Tensor:
    """max(0, x); the subgradient at exactly 0 is 0."""
    active = x.data > 0
    if _kink_log is not None:
        _kink_log.append(active)
    return Tensor._from_op(np.where(active, x.data, 0.0), (x,), lambda g: (g * active,))


def sigmoid(x: Tensor) -> Tensor:
    z = np.clip(x.data, -_SIGMOID_CLAMP, _SIGMOID_CLAMP)
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return Tensor._from_op(out, (x,), lambda g: (g * out * (1.0 - out),))


def elementwise(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown elementwise kind {kind!r}")


def softmax_lastdim(x: Tensor) -> Tensor:
    if x.ndim == 0 or x.shape[-1] < 1:
        raise ShapeError(f"softmax needs a non-empty last axis, got {x.shape}")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return Tensor._from_op(s, (x,), grad_fn)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise each last-axis slice with its population variance, then scale and shift."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm gain/bias {gamma.shape}/{beta.shape} do not match {x.shape}")
    X = x.data
    centered = X - X.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    G = gamma.data
    lead = tuple(range(X.ndim - 1))

    def grad_fn(g):
        dxhat = g * G
        dx = inv_std * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return Tensor._from_op(xhat * G + beta.data, (x, gamma, beta), grad_fn)


def dropout(x: Tensor, rate: float, rng: Rng | None, training: bool) -> Tensor:
    """Inverted dropout: zero with probability ``rate``, rescale survivors."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an Rng")
    scale = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return Tensor._from_op(x.data * scale, (x,), lambda g: (g * scale,))
