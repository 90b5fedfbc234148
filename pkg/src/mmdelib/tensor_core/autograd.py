"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable primitive produces a :class:`Tensor` that remembers its
parents and a local gradient rule.  :func:`backward` linearises the graph into
a :class:`Tape` (topological order) and replays it in reverse.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_FLOAT_TYPES = (np.float32, np.float64)
_grad_enabled = True


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class FaultError(RuntimeError):
    """Raised when a non-finite value is detected where it must not occur."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.type not in _FLOAT_TYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    # -- introspection ---------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    # -- operators -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(lift(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(lift(other, self), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    # -- method sugar ----------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def relu(self):
        return relu(self)

    def backward(self) -> None:
        backward(self)


class Parameter(Tensor):
    """A trainable leaf tensor."""

    __slots__ = ()

    def __init__(self, data, name: str | None = None, dtype=np.float32):
        super().__init__(np.array(data, dtype=dtype), requires_grad=True, name=name)


def lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _node(data: np.ndarray, parents: Sequence[Tensor], rule: Callable) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = rule
    return out


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = lift(a, b if isinstance(b, Tensor) else None)
    b = lift(b, a)
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a = lift(a, b if isinstance(b, Tensor) else None)
    b = lift(b, a)
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a = lift(a, b if isinstance(b, Tensor) else None)
    b = lift(b, a)
    ad, bd = a.data, b.data

    def rule(g):
        return unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape)

    return _node(ad * bd, (a, b), rule)


def div(a, b) -> Tensor:
    a = lift(a, b if isinstance(b, Tensor) else None)
    b = lift(b, a)
    ad, bd = a.data, b.data

    def rule(g):
        return unbroadcast(g / bd, ad.shape), unbroadcast(-g * ad / (bd * bd), bd.shape)

    return _node(ad / bd, (a, b), rule)


def power(a: Tensor, exponent: float) -> Tensor:
    ad = a.data
    return _node(ad ** exponent, (a,), lambda g: (g * exponent * ad ** (exponent - 1),))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _node(y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _node(np.log(ad), (a,), lambda g: (g / ad,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _node(y, (a,), lambda g: (g * (1 - y * y),))


# ---------------------------------------------------------------------------
# Reductions and shape manipulation
# ---------------------------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), rule)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis, keepdims) * (1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a: Tensor, idx) -> Tensor:
    shape, dtype = a.shape, a.dtype
    advanced = any(isinstance(i, (np.ndarray, list)) for i in (idx if isinstance(idx, tuple) else (idx,)))

    def rule(g):
        full = np.zeros(shape, dtype=dtype)
        if advanced:
            np.add.at(full, idx, g)
        else:
            full[idx] += g
        return (full,)

    return _node(a.data[idx], (a,), rule)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [lift(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def rule(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tensors, rule)


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------

def _gemm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a @ b`` that never takes BLAS's matrix-vector path.

    A single-row or single-column product would round differently from the
    same row inside a larger product; duplicating it keeps results independent
    of how many other rows (e.g. padding positions) share the call.
    """
    if a.shape[-2] == 1:
        return _gemm(np.concatenate([a, a], axis=-2), b)[..., :1, :]
    if b.shape[-1] == 1:
        return _gemm(a, np.concatenate([b, b], axis=-1))[..., :1]
    return a @ b


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``a[..., m, k] @ b[..., k, n]``."""
    a = lift(a)
    b = lift(b, a)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul: batch extents of {a.shape} and {b.shape} do not broadcast") from None
    ad, bd = a.data, b.data

    def rule(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return unbroadcast(ga, ad.shape), unbroadcast(gb, bd.shape)

    return _node(_gemm(ad, bd), (a, b), rule)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` over the last axis, with 2-D BLAS calls."""
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {weight.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    w = weight.data
    out = _gemm(x2, w)
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def rule(g):
        g2 = g.reshape(-1, w.shape[1])
        grads = [(g2 @ w.T).reshape(x.shape), x2.T @ g2]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return _node(out.reshape(lead + (w.shape[1],)), parents, rule)


# ---------------------------------------------------------------------------
# Neural primitives
# ---------------------------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax whose denominator is summed strictly left to right.

    Trailing exact zeros (masked keys) then leave every output bit unchanged,
    which pairwise summation does not guarantee.
    """
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    denom = np.take(np.cumsum(e, axis=axis), [-1], axis=axis)
    y = e / denom

    def rule(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _node(y, (x,), rule)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    y = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def rule(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _node(y, (x,), rule)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalise the last axis to zero mean and unit variance, then scale and shift."""
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise DimensionError(f"layer_norm: gain {gain.shape}/bias {bias.shape} vs input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gain.data

    def rule(g):
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _node(xhat * gd + bias.data, (x, gain, bias), rule)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    shape, dtype = table.shape, table.dtype

    def rule(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return _node(table.data[ids], (table,), rule)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or ``rate == 0``."""
    if not training or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return _node(x.data * keep, (x,), lambda g: (g * keep,))


def cross_entropy(logits: Tensor, targets: np.ndarray, pad_id: int = 0, smoothing: float = 0.0) -> Tensor:
    """Mean label-smoothed negative log-likelihood over non-pad positions."""
    targets = np.asarray(targets, dtype=np.int64)
    V = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise DimensionError(f"cross_entropy: targets {targets.shape} vs logits {logits.shape}")
    if targets.size and targets.max() >= V:
        raise ValueError(f"target id {targets.max()} out of range for vocabulary of {V}")
    mask = targets != pad_id
    count = int(mask.sum())
    if count == 0:
        raise ValueError("cross_entropy: every target position is padding; mean is undefined")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    nll = -np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    per_tok = (1.0 - smoothing) * nll - smoothing * logp.mean(axis=-1)
    loss = np.asarray((per_tok * mask).sum() / count, dtype=logits.dtype)

    def rule(g):
        q = np.full(logp.shape, smoothing / V, dtype=logp.dtype)
        np.put_along_axis(q, targets[..., None], (1.0 - smoothing) + smoothing / V, axis=-1)
        d = (np.exp(logp) - q) * (mask[..., None] * (float(g) / count))
        return (d.astype(logits.dtype),)

    return _node(loss, (logits,), rule)


# ---------------------------------------------------------------------------
# Reverse pass
# ---------------------------------------------------------------------------

class Tape:
    """Topologically ordered record of the primitive applications behind ``root``."""

    def __init__(self, root: Tensor):
        self.root = root
        self.records: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                self.records.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

    def __len__(self) -> int:
        return len(self.records)

    def leaves(self) -> list[Tensor]:
        return [t for t in self.records if t._backward is None]

    def backward(self, seed: np.ndarray | None = None) -> None:
        root = self.root
        grads: dict[int, np.ndarray] = {
            id(root): np.ones_like(root.data) if seed is None else seed}
        for node in reversed(self.records):
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
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def backward(loss: Tensor) -> Tape:
    """Populate ``.grad`` on every trainable leaf reachable from scalar ``loss``."""
    if loss.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = Tape(loss)
    tape.backward()
    return tape


def parameters_finite(params: Iterable[Tensor]) -> bool:
    return all(np.all(np.isfinite(p.data)) for p in params)
