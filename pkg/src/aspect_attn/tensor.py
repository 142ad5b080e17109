"""
Dense float64 tensors with reverse-mode differentiation.

Every differentiable primitive the model needs is defined here as a plain
function that computes its forward value with NumPy and attaches an explicit
backward rule. Calling ``Tensor.backward`` on a scalar walks the recorded
graph in reverse topological order and accumulates ``.grad`` on every node
that requires it.

Design notes
------------
- Tensors are rank 0..3 with strictly positive extents.
- Broadcasting is limited to the bias-add inside ``linear``; binary ops
  require identical shapes.
- ``no_grad()`` disables graph recording (used by finite-difference checks
  and evaluation loops).
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DomainError, NonFiniteError, ShapeError

MAX_RANK = 3

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Temporarily stop recording operations on the graph."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Rng:
    """
    Seeded random stream.

    Backed by the PCG64 bit generator (O'Neill's permuted congruential
    generator, 128-bit state) fed through NumPy's ``SeedSequence``. The seed
    is a 64-bit unsigned integer; ``key`` extends it so that independent
    sub-streams (init, dropout, shuffling, ...) can be derived by name
    without sharing state.
    """

    def __init__(self, seed: int, key: Sequence[int] = ()):
        if not 0 <= int(seed) < 2**64:
            raise DomainError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self.key = tuple(int(k) for k in key)
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, *self.key])))

    def spawn(self, *key: int) -> "Rng":
        """Independent child stream identified by ``key``."""
        return Rng(self.seed, self.key + tuple(key))

    def random(self, shape=()) -> np.ndarray:
        return self._gen.random(shape)

    def uniform(self, low: float, high: float, shape=()) -> np.ndarray:
        return self._gen.uniform(low, high, shape)

    def normal(self, shape=(), scale: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, scale, shape)

    def integers(self, low: int, high: int, shape=None):
        return self._gen.integers(low, high, shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, key={self.key})"


class Tensor:
    """
    Dense float64 array with optional gradient tracking.

    Parameters
    ----------
    data : array_like
        Values; copied to a C-contiguous float64 array.
    requires_grad : bool
        Whether gradients should be accumulated into ``grad``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward=None, op: str = ""):
        arr = np.array(data, dtype=np.float64, copy=True, order="C")
        if arr.ndim > MAX_RANK:
            raise ShapeError(f"rank {arr.ndim} exceeds maximum rank {MAX_RANK}")
        if any(n <= 0 for n in arr.shape):
            raise ShapeError(f"all extents must be positive, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self.shape)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f", op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(node) into ``node.grad`` for every tracked ancestor."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward without an explicit grad needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != self.shape:
            raise ShapeError(f"seed grad shape {grad.shape} != tensor shape {self.shape}")

        order = _topological(self)
        pending: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg


def _raise_item(shape):
    raise ShapeError(f"item() needs a single-element tensor, got shape {shape}")


def _topological(root: Tensor) -> list[Tensor]:
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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    if data.ndim > MAX_RANK:
        raise ShapeError(f"{op} would produce rank {data.ndim} > {MAX_RANK}")
    out.data = np.ascontiguousarray(data, dtype=np.float64)
    out.requires_grad = track
    out.grad = None
    out._parents = parents if track else ()
    out._backward = backward if track else None
    out.op = op
    return out


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of an ``M x P`` and a ``P x N`` tensor."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return g @ bd.T, ad.T @ g

    return _result(ad @ bd, (a, b), backward, "matmul")


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of equally shaped tensors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,), "scale")


def transpose(a: Tensor) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.shape}")
    return _result(a.data.T, (a,), lambda g: (g.T,), "transpose")


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def total(a: Tensor) -> Tensor:
    """Sum of all entries as a rank-0 tensor."""
    a = as_tensor(a)
    shape = a.shape
    return _result(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def _check_axis(x: Tensor, axis: int) -> int:
    if not isinstance(axis, (int, np.integer)) or not -x.ndim <= axis < x.ndim:
        raise DomainError(f"axis {axis!r} is invalid for a rank-{x.ndim} tensor")
    return int(axis) % x.ndim


def mean(x: Tensor, axis: int) -> Tensor:
    """Arithmetic mean along ``axis`` (the axis is removed)."""
    x = as_tensor(x)
    axis = _check_axis(x, axis)
    n = x.shape[axis]
    shape = x.shape

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / n, shape).copy(),)

    return _result(x.data.mean(axis=axis), (x,), backward, "mean")


def mean_pool_time(x: Tensor) -> Tensor:
    """Column means of a ``T x D`` sequence; the gradient spreads ``1/T`` to each frame."""
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"mean_pool_time expects T x D, got shape {x.shape}")
    return mean(x, 0)


def softmax(x: Tensor, axis: int) -> Tensor:
    """Max-shifted exponential normalisation along ``axis``."""
    x = as_tensor(x)
    axis = _check_axis(x, axis)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), backward, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """
    Normalise over the last axis (population variance) then apply ``gamma``/``beta``.

    ``gamma`` and ``beta`` are vectors whose length equals the last extent.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim == 0:
        raise ShapeError("layer_norm needs at least one axis")
    n = x.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ShapeError(f"layer_norm: gamma {gamma.shape} / beta {beta.shape} must both be ({n},)")
    if eps <= 0:
        raise DomainError(f"eps must be positive, got {eps}")
    # add.reduce / n avoids ndarray.mean's per-call overhead on tiny rows
    mu = np.add.reduce(x.data, axis=-1, keepdims=True) / n
    xc = x.data - mu
    var = np.add.reduce(xc * xc, axis=-1, keepdims=True) / n
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    reduce_axes = tuple(range(x.ndim - 1))

    def backward(g):
        gx_hat = g * gd
        gx = inv * (gx_hat - np.add.reduce(gx_hat, axis=-1, keepdims=True) / n
                    - xhat * np.add.reduce(gx_hat * xhat, axis=-1, keepdims=True) / n)
        return gx, (g * xhat).sum(axis=reduce_axes), g.sum(axis=reduce_axes)

    return _result(xhat * gd + beta.data, (x, gamma, beta), backward, "layer_norm")


def dropout(x: Tensor, rate: float, rng: Rng | None, training: bool) -> Tensor:
    """
    Inverted dropout: zero each entry with probability ``rate`` and scale the
    survivors by ``1 / (1 - rate)``. Identity when not training or when
    ``rate == 0``.
    """
    x = as_tensor(x)
    if not 0.0 <= rate < 1.0:
        raise DomainError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise DomainError("dropout in training mode needs an Rng")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _result(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w + b`` for ``x`` of shape ``(In,)`` or ``(N, In)``."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if w.ndim != 2 or x.ndim not in (1, 2) or x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"linear: x {x.shape}, w {w.shape}, b {b.shape} are incompatible")
    xd, wd = x.data, w.data
    if x.ndim == 1:
        def backward(g):
            return wd @ g, np.outer(xd, g), g
    else:
        def backward(g):
            return g @ wd.T, xd.T @ g, g.sum(axis=0)
    return _result(xd @ wd + b.data, (x, w, b), backward, "linear")


def stack(items: Sequence[Tensor]) -> Tensor:
    """Stack equally shaped tensors along a new leading axis."""
    items = [as_tensor(t) for t in items]
    if not items:
        raise ShapeError("stack needs at least one tensor")
    shape = items[0].shape
    for t in items:
        if t.shape != shape:
            raise ShapeError(f"stack: shapes {shape} and {t.shape} differ")
    return _result(np.stack([t.data for t in items]), tuple(items),
                   lambda g: tuple(g[i] for i in range(len(items))), "stack")


def concat(items: Sequence[Tensor]) -> Tensor:
    """Concatenate vectors end to end."""
    items = [as_tensor(t) for t in items]
    if not items or any(t.ndim != 1 for t in items):
        raise ShapeError("concat expects one or more vectors")
    bounds = np.cumsum([0] + [t.shape[0] for t in items])

    def backward(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(items)))

    return _result(np.concatenate([t.data for t in items]), tuple(items), backward, "concat")


def repeat_rows(x: Tensor, n: int) -> Tensor:
    """Tile a vector of length F into an ``n x F`` matrix (every row equals ``x``)."""
    x = as_tensor(x)
    if x.ndim != 1:
        raise ShapeError(f"repeat_rows expects a vector, got shape {x.shape}")
    if n < 1:
        raise ShapeError(f"repeat count must be positive, got {n}")
    return _result(np.tile(x.data, (n, 1)), (x,), lambda g: (g.sum(axis=0),), "repeat_rows")


def cross_entropy(logits: Tensor, labels: Iterable[int]) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under row-wise softmax of ``logits``."""
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects B x C logits, got shape {logits.shape}")
    B, C = logits.shape
    labels = np.asarray(list(labels), dtype=np.int64)
    if labels.shape != (B,):
        raise ShapeError(f"expected {B} labels, got {labels.shape[0]}")
    if labels.min() < 0 or labels.max() >= C:
        raise DomainError(f"labels must lie in [0, {C}), got {labels.tolist()}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(B)
    loss = (lse - z[rows, labels]).mean()
    probs = np.exp(z - lse[:, None])

    def backward(g):
        d = probs.copy()
        d[rows, labels] -= 1.0
        return (d * (g / B),)

    return _result(np.asarray(loss), (logits,), backward, "cross_entropy")


def check_finite(t: Tensor, what: str = "tensor") -> Tensor:
    if not np.all(np.isfinite(t.data)):
        raise NonFiniteError(f"{what} contains non-finite values")
    return t
