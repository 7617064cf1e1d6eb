"""Sparse mixture-of-experts fusion over completed modality tokens."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError, ParameterError
from .nn import FeedForward, Linear, Module, TransformerEncoderBlock
from .tensor import Tensor
from .tokenize import TokenSet, require_complete


def encode_tokens(blocks, tokens: TokenSet) -> Tensor:
    """Concatenate completed blocks along the token axis and run the encoder."""
    require_complete(tokens)
    z = T.concat(tokens.blocks, axis=-2)
    for block in blocks:
        z = block(z)
    return z


def split_blocks(encoded: Tensor, num_modalities: int) -> list[Tensor]:
    per = encoded.shape[-2] // num_modalities
    return [T.getitem(encoded, (..., slice(m * per, (m + 1) * per), slice(None))) for m in range(num_modalities)]


def pool_blocks(encoded: Tensor, num_modalities: int) -> Tensor:
    """Mean over the tokens of each modality block: (..., |M|*P, D) -> (..., |M|, D)."""
    per, dim = divmod(encoded.shape[-2], num_modalities)
    if dim:
        raise DimensionError(f"{encoded.shape[-2]} tokens do not split into {num_modalities} equal blocks")
    grouped = encoded.reshape(encoded.shape[:-2] + (num_modalities, per, encoded.shape[-1]))
    return T.mean(grouped, axis=-2)


def routing_vector(pooled: Tensor, mask: np.ndarray) -> Tensor:
    """Average of pooled blocks over originally observed modalities only.

    ``pooled`` is (n, |M|, D); ``mask`` is the ingestion mask (n, |M|).
    Unobserved blocks are selected away, not multiplied by zero, so their
    contents cannot reach the result.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != pooled.shape[:-1]:
        raise DimensionError(f"mask {mask.shape} does not match pooled blocks {pooled.shape}")
    counts = mask.sum(axis=-1, keepdims=True)
    if (counts == 0).any():
        raise ContractError("routing needs at least one observed modality per subject")
    kept = T.where(mask[..., None], pooled, 0.0)
    return T.sum(kept, axis=-2) * (1.0 / counts)


class Router(Module):
    """Gate projection W_g, b_g with routing temperature and Top-k size."""

    def __init__(self, dim: int, num_experts: int, k: int, temperature: float, rng: np.random.Generator):
        if temperature <= 0:
            raise ParameterError(f"routing temperature must be positive, got {temperature}")
        if not 1 <= k <= num_experts:
            raise ParameterError(f"top-k must satisfy 1 <= k <= {num_experts}, got {k}")
        self.proj = Linear(dim, num_experts, rng)
        self.num_experts = num_experts
        self.k = k
        self.temperature = temperature

    def forward(self, v: Tensor) -> Tensor:
        return gate(self, v)


RouterParams = Router


def gate(router: Router, v: Tensor, temperature: float | None = None) -> Tensor:
    """Expert assignment distribution softmax((W_g v + b_g) / tau_e)."""
    return T.softmax(router.proj(v), temperature=router.temperature if temperature is None else temperature)


@dataclass
class RoutingDecision:
    gates: Tensor
    selected: np.ndarray
    weights: Tensor
    literal_sum: bool = False

    @property
    def k(self) -> int:
        return self.selected.shape[-1]


def select_topk(gates: Tensor, k: int, literal_sum: bool = False) -> RoutingDecision:
    """Indices of the k largest gates (ties to the lower index) and their mixing weights.

    Mixing weights are the selected gates renormalised to sum to one, or all
    ones when ``literal_sum`` reproduces the unweighted sum.
    """
    num_experts = gates.shape[-1]
    if not 1 <= k <= num_experts:
        raise ParameterError(f"top-k must satisfy 1 <= k <= {num_experts}, got {k}")
    selected = np.argsort(-gates.data, axis=-1, kind="stable")[..., :k]
    if literal_sum:
        weights = Tensor(np.ones(selected.shape))
    else:
        chosen = T.take_along(gates, selected, axis=-1)
        weights = chosen / T.sum(chosen, axis=-1, keepdims=True)
    return RoutingDecision(gates, selected, weights, literal_sum)


class Expert(Module):
    """Pooled modality vector -> two-layer feed-forward D -> 4D -> D."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.ffn = FeedForward(dim, 4 * dim, rng)
        self.executions = 0

    def forward(self, pooled: Tensor) -> Tensor:
        self.executions += pooled.shape[0]
        return self.ffn(pooled)


def expert_mix(decision: RoutingDecision, experts, pooled: Tensor, dispatch_log: dict | None = None) -> Tensor:
    """Weighted sum of the selected experts' outputs for every modality block.

    ``pooled`` is (n, |M|, D).  Each expert runs only on the subjects that
    selected it.
    """
    n = pooled.shape[0]
    selected = decision.selected
    outputs, rows_all = [], []
    for e, expert in enumerate(experts):
        rows, slots = np.nonzero(selected == e)
        if rows.size == 0:
            continue
        y = expert(T.getitem(pooled, rows))
        w = T.getitem(decision.weights, (rows, slots)).reshape((rows.size, 1, 1))
        outputs.append(y * w)
        rows_all.append(rows)
        if dispatch_log is not None:
            dispatch_log[e] = rows.tolist()
    return T.scatter_rows(T.concat(outputs, axis=0), np.concatenate(rows_all), n)


def load_balance_loss(gates: Tensor) -> Tensor:
    """Mean squared deviation of the batch-average gate load from uniform."""
    load = T.mean(gates, axis=0)
    dev = load - 1.0 / gates.shape[-1]
    return T.mean(dev * dev)


@dataclass
class BackboneOutput:
    features: Tensor
    encoded: Tensor
    pooled: Tensor
    decision: RoutingDecision | None = None
    dispatch: dict = field(default_factory=dict)


class MoEBackbone(Module):
    """Transformer encoder, availability-aware router and sparse expert set."""

    def __init__(
        self,
        dim: int,
        num_modalities: int,
        heads: int,
        depth: int,
        num_experts: int,
        k: int,
        temperature: float,
        rng: np.random.Generator,
        dropout: float = 0.0,
        dropout_rng: np.random.Generator | None = None,
        literal_sum: bool = False,
    ):
        self.num_modalities = num_modalities
        self.encoder = [TransformerEncoderBlock(dim, heads, rng, dropout, dropout_rng) for _ in range(depth)]
        self.router = Router(dim, num_experts, k, temperature, rng)
        self.experts = [Expert(dim, rng) for _ in range(num_experts)]
        self.literal_sum = literal_sum

    def forward(self, tokens: TokenSet, mask: np.ndarray) -> BackboneOutput:
        encoded = encode_tokens(self.encoder, tokens)
        pooled = pool_blocks(encoded, self.num_modalities)
        v = routing_vector(pooled, mask)
        decision = select_topk(gate(self.router, v), self.router.k, self.literal_sum)
        dispatch: dict = {}
        features = expert_mix(decision, self.experts, pooled, dispatch)
        return BackboneOutput(features, encoded, pooled, decision, dispatch)


class SharedFFNBackbone(Module):
    """Ablation without experts: one feed-forward network shared by every subject."""

    def __init__(
        self,
        dim: int,
        num_modalities: int,
        heads: int,
        depth: int,
        rng: np.random.Generator,
        dropout: float = 0.0,
        dropout_rng: np.random.Generator | None = None,
    ):
        self.num_modalities = num_modalities
        self.encoder = [TransformerEncoderBlock(dim, heads, rng, dropout, dropout_rng) for _ in range(depth)]
        self.ffn = FeedForward(dim, 4 * dim, rng)

    def forward(self, tokens: TokenSet, mask: np.ndarray) -> BackboneOutput:
        encoded = encode_tokens(self.encoder, tokens)
        pooled = pool_blocks(encoded, self.num_modalities)
        return BackboneOutput(self.ffn(pooled), encoded, pooled)
