"""Neural building blocks: linear layers, multi-head attention, encoder blocks."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError, ParameterError
from .tensor import Tensor, parameter


class Module:
    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            yield from _walk(value, prefix + name)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            for child in _children(value):
                yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise ContractError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in own.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise DimensionError(f"{name}: expected shape {p.shape}, got {value.shape}")
            p.data[...] = value

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _children(value) -> list[Module]:
    if isinstance(value, Module):
        return [value]
    if isinstance(value, (list, tuple)):
        return [v for v in value if isinstance(v, Module)]
    if isinstance(value, dict):
        return [v for v in value.values() if isinstance(v, Module)]
    return []


def _walk(value, name: str):
    if isinstance(value, Tensor):
        if value.requires_grad:
            yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(name + ".")
    elif isinstance(value, (list, tuple)):
        for i, v in enumerate(value):
            yield from _walk(v, f"{name}.{i}")
    elif isinstance(value, dict):
        for k, v in value.items():
            yield from _walk(v, f"{name}.{k}")


def uniform_fan_in(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    """Affine map ``weight @ x + bias`` with weight of shape (out, in)."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True):
        self.in_features = in_features
        self.out_features = out_features
        self.init = "uniform_fan_in"
        self.weight = parameter(uniform_fan_in(rng, in_features, (out_features, in_features)))
        self.bias = parameter(uniform_fan_in(rng, in_features, (out_features,))) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.affine(x, self.weight, self.bias)


def linear_forward(layer: Linear, x: Tensor) -> Tensor:
    return layer(x)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = parameter(np.ones(dim))
        self.beta = parameter(np.zeros(dim))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class Dropout(Module):
    """Inverted dropout drawing masks from a shared generator."""

    def __init__(self, p: float, rng: np.random.Generator):
        if not 0.0 <= p < 1.0:
            raise ParameterError(f"dropout probability must be in [0, 1), got {p}")
        self.p = p
        self.rng = rng

    def forward(self, x: Tensor) -> Tensor:
        return T.dropout(x, self.p, self.rng, self.training)


class FeedForward(Module):
    """Two linear layers with a quick-GELU nonlinearity in between."""

    def __init__(self, dim: int, hidden: int, rng: np.random.Generator, out_dim: int | None = None):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, out_dim or dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(T.quick_gelu(self.fc1(x)))


class MultiHeadAttention(Module):
    """Scaled dot-product attention split over ``heads`` heads.

    Works on any number of leading batch axes.  ``key_mask`` marks which
    context rows may be attended to (True = visible); shape (..., L).
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if heads <= 0 or dim % heads:
            raise ParameterError(f"model dim {dim} is not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.q_proj = Linear(dim, dim, rng)
        self.k_proj = Linear(dim, dim, rng)
        self.v_proj = Linear(dim, dim, rng)
        self.o_proj = Linear(dim, dim, rng)
        self.last_weights: np.ndarray | None = None

    def _split(self, x: Tensor) -> Tensor:
        x = x.reshape(x.shape[:-1] + (self.heads, self.head_dim))
        return T.swapaxes(x, -3, -2)

    def forward(self, queries: Tensor, context: Tensor, key_mask: np.ndarray | None = None) -> Tensor:
        if queries.shape[-1] != self.dim or context.shape[-1] != self.dim:
            raise DimensionError(
                f"attention expects last dim {self.dim}, got queries {queries.shape} and context {context.shape}"
            )
        if context.ndim < 2 or context.shape[-2] == 0:
            raise ContractError("cross-attention needs at least one context row")
        q = self._split(self.q_proj(queries))
        k = self._split(self.k_proj(context))
        v = self._split(self.v_proj(context))
        scores = T.matmul(q, k.T) * (1.0 / math.sqrt(self.head_dim))
        mask = None
        if key_mask is not None:
            key_mask = np.asarray(key_mask, dtype=bool)
            mask = key_mask[..., None, None, :]
        attn = T.softmax(scores, mask=mask)
        self.last_weights = attn.data
        out = T.swapaxes(T.matmul(attn, v), -3, -2)
        out = out.reshape(out.shape[:-2] + (self.dim,))
        return self.o_proj(out)


def cross_attention(mha: MultiHeadAttention, queries: Tensor, context: Tensor, key_mask=None) -> Tensor:
    return mha(queries, context, key_mask)


class TransformerEncoderBlock(Module):
    """Pre-norm block: x + attn(LN(x)), then x + FFN(LN(x))."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, dropout: float = 0.0, dropout_rng=None):
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.ffn = FeedForward(dim, 4 * dim, rng)
        self.drop = Dropout(dropout, dropout_rng if dropout_rng is not None else rng)

    def forward(self, x: Tensor, key_mask=None) -> Tensor:
        h = self.norm1(x)
        x = x + self.drop(self.attn(h, h, key_mask))
        return x + self.drop(self.ffn(self.norm2(x)))

    def zero_residual_branches(self) -> None:
        for layer in (self.attn.o_proj, self.ffn.fc2):
            layer.weight.data[...] = 0.0
            layer.bias.data[...] = 0.0


def encoder_forward(blocks, tokens: Tensor) -> Tensor:
    for block in blocks:
        tokens = block(tokens)
    return tokens
