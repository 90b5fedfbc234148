"""Parameter containers and the layers shared by every model family."""

from __future__ import annotations

import hashlib
from typing import Iterator

import numpy as np

from .autograd import (
    DimensionError, Parameter, Tensor, dropout, embedding, layer_norm, linear, matmul, relu,
    softmax,
)


class Module:
    """Minimal parameter container; parameters and children are discovered by attribute."""

    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + key, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{key}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{key}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = set(own) - set(state)
            unexpected = set(state) - set(own)
            if missing or unexpected:
                raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, arr in state.items():
            if name not in own:
                continue
            p = own[name]
            if p.shape != arr.shape:
                raise DimensionError(f"{name}: stored shape {arr.shape} vs parameter {p.shape}")
            p.data = np.array(arr, dtype=p.dtype)

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = False

    def unfreeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = True


def parameter_hash(params) -> str:
    """SHA-256 over (name, shape, bytes) of named parameters."""
    h = hashlib.sha256()
    for name, p in params:
        h.update(name.encode())
        h.update(str(p.shape).encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Parameter(_xavier(rng, d_in, d_out))
        self.bias = Parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class Embedding(Module):
    def __init__(self, n: int, d: int, rng: np.random.Generator):
        self.weight = Parameter(rng.normal(0.0, d ** -0.5, size=(n, d)))

    def __call__(self, ids: np.ndarray) -> Tensor:
        return embedding(self.weight, ids)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-6):
        self.gain = Parameter(np.ones(d))
        self.bias = Parameter(np.zeros(d))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias, self.eps)


class FeedForward(Module):
    def __init__(self, d_model: int, d_ffn: int, rng: np.random.Generator):
        self.inner = Linear(d_model, d_ffn, rng)
        self.outer = Linear(d_ffn, d_model, rng)

    def __call__(self, x: Tensor, rate: float = 0.0, rng=None) -> Tensor:
        h = dropout(relu(self.inner(x)), rate, rng, self.training)
        return self.outer(h)


def additive_mask(keep: np.ndarray) -> np.ndarray:
    """Boolean keep-mask -> additive mask (0 where kept, -inf where masked).

    Every query row must keep at least one key.
    """
    if not np.all(keep.any(axis=-1)):
        raise ValueError("attention mask leaves a query row with no valid key")
    return np.where(keep, 0.0, -np.inf)


def padding_keep(ids: np.ndarray, pad_id: int = 0) -> np.ndarray:
    """[B, S] token ids -> [B, 1, 1, S] key keep-mask."""
    return (ids != pad_id)[:, None, None, :]


def causal_keep(length: int) -> np.ndarray:
    """Lower-triangular [1, 1, L, L] keep-mask."""
    return np.tril(np.ones((length, length), dtype=bool))[None, None]


class MultiHeadAttention(Module):
    """Scaled dot-product attention over ``n_heads`` heads with an output projection."""

    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator):
        if d_model % n_heads:
            raise ValueError(f"d_model={d_model} is not divisible by n_heads={n_heads}")
        self.n_heads = n_heads
        self.q = Linear(d_model, d_model, rng)
        self.k = Linear(d_model, d_model, rng)
        self.v = Linear(d_model, d_model, rng)
        self.o = Linear(d_model, d_model, rng)
        self.last_weights: np.ndarray | None = None
        self.record = False

    def _split(self, x: Tensor) -> Tensor:
        B, L, d = x.shape
        return x.reshape(B, L, self.n_heads, d // self.n_heads).transpose(0, 2, 1, 3)

    def __call__(self, query: Tensor, memory: Tensor, mask: np.ndarray | None = None,
                 rate: float = 0.0, rng=None) -> Tensor:
        """``mask`` is additive and broadcastable to [B, heads, L, S]."""
        B, L, d = query.shape
        dk = d // self.n_heads
        q = self._split(self.q(query))
        k = self._split(self.k(memory))
        v = self._split(self.v(memory))
        scores = matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dk))
        if mask is not None:
            scores = scores + mask.astype(scores.dtype)
        weights = softmax(scores, axis=-1)
        if self.record:
            self.last_weights = weights.data.copy()
        weights = dropout(weights, rate, rng, self.training)
        ctx = matmul(weights, v).transpose(0, 2, 1, 3).reshape(B, L, d)
        return self.o(ctx)
