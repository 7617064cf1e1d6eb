"""Conditional evidence reconstruction.

One generator per modality rebuilds that modality's token block from the
tokens of the other modalities: learnable queries cross-attend over the
context, and a sigmoid gate modulates the attended result.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError, ParameterError
from .nn import Linear, Module, MultiHeadAttention
from .tensor import Tensor, parameter
from .tokenize import OBSERVED, PENDING, RECONSTRUCTED, TokenSet


class ConditionalGenerator(Module):
    """Queries (P, D) refined by stacked cross-attention, then gated.

    The stack is pure cross-attention: each layer's output becomes the next
    layer's queries.  No positional information enters, so the output does
    not depend on the order of context rows.
    """

    def __init__(self, target: int, tokens: int, hidden: int, heads: int, layers: int, rng: np.random.Generator):
        if layers < 1:
            raise ParameterError("a generator needs at least one cross-attention layer")
        self.target = target
        self.queries = parameter(rng.normal(0.0, 0.02, size=(tokens, hidden)))
        self.blocks = [MultiHeadAttention(hidden, heads, rng) for _ in range(layers)]
        self.gate = Linear(hidden, hidden, rng)

    def forward(self, context: Tensor, key_mask: np.ndarray | None = None) -> Tensor:
        h = self.queries
        for block in self.blocks:
            h = block(h, context, key_mask)
        return T.sigmoid(self.gate(h)) * h


def generate_tokens(gen: ConditionalGenerator, context: Tensor, key_mask: np.ndarray | None = None) -> Tensor:
    if context.shape[-2] == 0:
        raise ContractError("generator context is empty")
    return gen(context, key_mask)


def build_context(tokens: TokenSet, target: int) -> Tensor:
    """Row-concatenate every non-target block in catalog order."""
    others = [j for j in range(len(tokens.blocks)) if j != target]
    if not others:
        raise ContractError("a single-modality catalog has no context to condition on")
    if tokens.gaps[:, others].any():
        raise ContractError(f"context for modality {target} contains unresolved gaps")
    return T.concat([tokens.blocks[j] for j in others], axis=-2)


def reconstruction_loss(predicted: Tensor, target: Tensor, norm: str = "mse") -> Tensor:
    """Mean token-level error over all entries."""
    if predicted.shape != target.shape:
        raise DimensionError(f"prediction {predicted.shape} and target {target.shape} differ")
    diff = predicted - target
    if norm == "mse":
        return T.mean(diff * diff)
    if norm == "l1":
        return T.mean(T.absolute(diff))
    raise ParameterError(f"unknown reconstruction norm {norm!r}")


@dataclass
class CompletionCall:
    target: int
    rows: list[int]
    context_modalities: list[tuple[int, ...]]


def complete_tokens(
    tokens: TokenSet,
    generators,
    sequential: bool = False,
    trace: list | None = None,
) -> TokenSet:
    """Fill every gap with its modality's generator output.

    Each generator attends only over genuinely observed blocks of the same
    subject; gap placeholders are masked out of attention.  With
    ``sequential`` set, blocks completed earlier in catalog order also become
    visible to later generators.
    """
    gaps = tokens.gaps
    n, num_mod = gaps.shape
    if (~gaps).sum(axis=1).min(initial=1) == 0:
        raise ContractError("a subject with no observed modality cannot be completed")
    visible = tokens.provenance == OBSERVED
    blocks = list(tokens.blocks)
    provenance = tokens.provenance.copy()
    for m in range(num_mod):
        rows = np.flatnonzero(gaps[:, m])
        if rows.size == 0:
            continue
        others = [j for j in range(num_mod) if j != m]
        avail = visible[rows][:, others]
        source = blocks if sequential else tokens.blocks
        context = T.concat([T.getitem(source[j], rows) for j in others], axis=-2)
        per_block = context.shape[-2] // len(others)
        key_mask = None if avail.all() else np.repeat(avail, per_block, axis=1)
        z_hat = generators[m](context, key_mask)
        if trace is not None:
            trace.append(
                CompletionCall(m, rows.tolist(), [tuple(j for j, a in zip(others, row) if a) for row in avail])
            )
        filled = T.scatter_rows(z_hat, rows, n)
        blocks[m] = T.where(~gaps[:, m][:, None, None], tokens.blocks[m], filled)
        provenance[rows, m] = RECONSTRUCTED
        if sequential:
            visible[rows, m] = True
    return TokenSet(blocks, provenance)


def complete_subject(tokens: TokenSet, generators, trace: list | None = None) -> TokenSet:
    """Complete a single subject, building each context from observed blocks only.

    Fully observed subjects come back unchanged and no generator runs.
    """
    if len(tokens) != 1:
        raise ContractError("complete_subject takes a token set holding exactly one subject")
    observed = np.flatnonzero(tokens.provenance[0] == OBSERVED)
    if observed.size == 0:
        raise ContractError("subject has no observed modality")
    gaps = np.flatnonzero(tokens.provenance[0] == PENDING)
    if gaps.size == 0:
        return tokens
    blocks = list(tokens.blocks)
    provenance = tokens.provenance.copy()
    context = T.concat([tokens.blocks[j] for j in observed], axis=-2)
    for m in gaps:
        blocks[m] = generators[m](context)
        provenance[0, m] = RECONSTRUCTED
        if trace is not None:
            trace.append(CompletionCall(int(m), [0], [tuple(int(j) for j in observed)]))
    return TokenSet(blocks, provenance)


@dataclass
class MaskingPlan:
    """Which modality to hide for each full-coverage subject this step."""

    rows: np.ndarray
    targets: np.ndarray
    policy: str = "uniform"


def plan_masking(rows, num_modalities: int, rng: np.random.Generator, exhaustive: bool = False) -> MaskingPlan:
    rows = np.asarray(rows, dtype=np.intp)
    if exhaustive:
        return MaskingPlan(
            np.repeat(rows, num_modalities), np.tile(np.arange(num_modalities), rows.size), "exhaustive"
        )
    return MaskingPlan(rows, rng.integers(num_modalities, size=rows.size), "uniform")


def masked_reconstruction_loss(
    tokens: TokenSet,
    generators,
    plan: MaskingPlan,
    norm: str = "mse",
    detach_target: bool = True,
) -> Tensor:
    """Mean reconstruction error over the (subject, hidden modality) pairs of ``plan``."""
    if plan.rows.size and not tokens.mask[plan.rows].all():
        raise ContractError("masked reconstruction needs subjects with every modality observed")
    num_mod = len(tokens.blocks)
    terms = []
    for m in range(num_mod):
        rows = plan.rows[plan.targets == m]
        if rows.size == 0:
            continue
        context = T.concat([T.getitem(tokens.blocks[j], rows) for j in range(num_mod) if j != m], axis=-2)
        predicted = generators[m](context)
        target = T.getitem(tokens.blocks[m], rows)
        if detach_target:
            target = target.detach()
        terms.append(reconstruction_loss(predicted, target, norm) * float(rows.size))
    if not terms:
        return Tensor(0.0)
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return total * (1.0 / plan.rows.size)


def masked_training_step(
    tokens: TokenSet,
    generators,
    rng: np.random.Generator,
    norm: str = "mse",
    exhaustive: bool = False,
    detach_target: bool = True,
) -> tuple[Tensor, MaskingPlan]:
    """Hide one modality per subject, reconstruct it, and backpropagate.

    Every subject in ``tokens`` must be fully observed.
    """
    if not tokens.mask.all():
        raise ContractError("masked training batch contains an incomplete subject")
    plan = plan_masking(np.arange(len(tokens)), len(tokens.blocks), rng, exhaustive)
    loss = masked_reconstruction_loss(tokens, generators, plan, norm, detach_target)
    loss.backward()
    return loss, plan
