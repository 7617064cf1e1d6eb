"""Full pipeline: tokenize, complete, fuse, attribute."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as T
from .cer import ConditionalGenerator, MaskingPlan, complete_tokens, masked_reconstruction_loss, plan_masking
from .errors import ConfigurationError, ParameterError
from .evidence import EvidenceHead, HeadOutput, LinearHead
from .moe import BackboneOutput, MoEBackbone, SharedFFNBackbone, load_balance_loss
from .nn import Module
from .tensor import Tensor, parameter
from .tokenize import STATIC_FILLED, ZERO_FILLED, ModalityCatalog, SubjectBatch, Tokenizer, TokenSet, build_token_sets

COMPLETIONS = ("cer", "static_fill", "zero_fill")
HEADS = ("evidence_decomposition", "plain_linear")
BACKBONES = ("moe", "shared_ffn")


@dataclass
class TrainConfig:
    """Hyperparameters; defaults follow the reference training protocol."""

    lr: float = 1e-4
    batch_size: int = 8
    epochs: int = 50
    warmup_epochs: int = 5
    warmup_mode: str = "reconstruction"
    dropout: float = 0.5
    hidden: int = 128
    tokens: int = 16
    experts: int = 16
    top_k: int = 4
    heads: int = 4
    generator_layers: int = 2
    encoder_depth: int = 2
    activation: str = "quick_gelu"
    routing_temperature: float = 1.0
    attribution_temperature: float = 1.0
    rec_weight: float = 1.0
    rec_norm: str = "mse"
    rec_exhaustive: bool = False
    sequential_completion: bool = False
    detach_target: bool = True
    completion: str = "cer"
    head: str = "evidence_decomposition"
    backbone: str = "moe"
    literal_sum: bool = False
    load_balance: float = 0.0
    eval_batch_size: int = 512
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigurationError(f"unknown training config keys: {unknown}")
        return cls(**d).validate()

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **changes) -> "TrainConfig":
        return TrainConfig.from_dict({**self.to_dict(), **changes})

    def validate(self) -> "TrainConfig":
        positive = ("lr", "batch_size", "hidden", "tokens", "experts", "top_k", "heads", "generator_layers",
                    "routing_temperature", "attribution_temperature", "eval_batch_size")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ParameterError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("epochs", "warmup_epochs", "encoder_depth", "rec_weight", "load_balance"):
            if getattr(self, name) < 0:
                raise ParameterError(f"{name} must be non-negative, got {getattr(self, name)}")
        if not 0.0 <= self.dropout < 1.0:
            raise ParameterError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.top_k > self.experts:
            raise ParameterError(f"top_k={self.top_k} exceeds experts={self.experts}")
        if self.hidden % self.heads:
            raise ParameterError(f"hidden={self.hidden} is not divisible by heads={self.heads}")
        choices = {
            "completion": COMPLETIONS,
            "head": HEADS,
            "backbone": BACKBONES,
            "warmup_mode": ("reconstruction", "lr"),
            "rec_norm": ("mse", "l1"),
            "activation": ("quick_gelu",),
        }
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                raise ConfigurationError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        return self


def desk_config(**changes) -> TrainConfig:
    """Reduced token grid (D=16, P=4) sized for the synthetic benchmark."""
    return TrainConfig(hidden=16, tokens=4).replace(**changes)


@dataclass
class ForwardOutput:
    tokens: TokenSet
    completed: TokenSet
    backbone: BackboneOutput
    head: HeadOutput

    @property
    def logits(self) -> Tensor:
        return self.head.logits


class CERDModel(Module):
    def __init__(self, catalog: ModalityCatalog, num_classes: int, config: TrainConfig, seed: int | None = None):
        config.validate()
        seeds = np.random.SeedSequence(config.seed if seed is None else seed).spawn(2)
        rng = np.random.default_rng(seeds[0])
        self.dropout_rng = np.random.default_rng(seeds[1])
        self.catalog = catalog
        self.num_classes = num_classes
        self.config = config
        m, p, d = len(catalog), catalog.tokens, catalog.hidden

        self.tokenizers = [Tokenizer(dim, p, d, rng) for dim in catalog.dims]
        self.generators = None
        self.static_fill = None
        if config.completion == "cer":
            self.generators = [
                ConditionalGenerator(i, p, d, config.heads, config.generator_layers, rng) for i in range(m)
            ]
        elif config.completion == "static_fill":
            self.static_fill = [parameter(rng.normal(0.0, 0.02, size=(p, d))) for _ in range(m)]

        if config.backbone == "moe":
            self.backbone = MoEBackbone(
                d, m, config.heads, config.encoder_depth, config.experts, config.top_k,
                config.routing_temperature, rng, config.dropout, self.dropout_rng, config.literal_sum,
            )
        else:
            self.backbone = SharedFFNBackbone(d, m, config.heads, config.encoder_depth, rng, config.dropout, self.dropout_rng)

        if config.head == "evidence_decomposition":
            self.head = EvidenceHead(d, m, num_classes, config.heads, rng, config.attribution_temperature)
        else:
            self.head = LinearHead(d, num_classes, rng)

    @classmethod
    def for_dataset(cls, modalities, dims, num_classes: int, config: TrainConfig) -> "CERDModel":
        catalog = ModalityCatalog(tuple(modalities), tuple(dims), config.tokens, config.hidden)
        return cls(catalog, num_classes, config)

    def tokenize(self, batch: SubjectBatch) -> TokenSet:
        return build_token_sets(self.tokenizers, batch)

    def complete(self, tokens: TokenSet, trace: list | None = None) -> TokenSet:
        if self.generators is not None:
            return complete_tokens(tokens, self.generators, self.config.sequential_completion, trace)
        gaps = tokens.gaps
        blocks = list(tokens.blocks)
        provenance = tokens.provenance.copy()
        tag = STATIC_FILLED if self.static_fill is not None else ZERO_FILLED
        for m in range(len(blocks)):
            if not gaps[:, m].any():
                continue
            fill = self.static_fill[m] if self.static_fill is not None else 0.0
            blocks[m] = T.where(~gaps[:, m][:, None, None], blocks[m], fill)
            provenance[gaps[:, m], m] = tag
        return TokenSet(blocks, provenance)

    def forward(self, batch: SubjectBatch, trace: list | None = None) -> ForwardOutput:
        tokens = self.tokenize(batch)
        completed = self.complete(tokens, trace)
        fused = self.backbone(completed, batch.mask)
        return ForwardOutput(tokens, completed, fused, self.head(fused.features))

    def reconstruction_loss(self, tokens: TokenSet, rng: np.random.Generator, plan: MaskingPlan | None = None) -> Tensor | None:
        """Masked reconstruction loss over the fully observed subjects of ``tokens``."""
        if self.generators is None:
            return None
        rows = np.flatnonzero(tokens.mask.all(axis=1))
        if rows.size == 0:
            return None
        if plan is None:
            plan = plan_masking(rows, len(self.tokenizers), rng, self.config.rec_exhaustive)
        return masked_reconstruction_loss(tokens, self.generators, plan, self.config.rec_norm, self.config.detach_target)

    def auxiliary_loss(self, out: ForwardOutput) -> Tensor | None:
        if self.config.load_balance == 0 or out.backbone.decision is None:
            return None
        return load_balance_loss(out.backbone.decision.gates) * self.config.load_balance
