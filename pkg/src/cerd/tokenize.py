"""Modality tokenization and availability-mask bookkeeping."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError, DataIntegrityError, DimensionError, ParameterError
from .nn import Linear, Module
from .tensor import Tensor, parameter

OBSERVED = "observed"
RECONSTRUCTED = "reconstructed"
STATIC_FILLED = "static_filled"
ZERO_FILLED = "zero_filled"
PENDING = "pending"


@dataclass(frozen=True)
class ModalityCatalog:
    """Ordered modalities with their raw widths, plus the token grid (P, D)."""

    names: tuple[str, ...]
    dims: tuple[int, ...]
    tokens: int
    hidden: int

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if len(set(self.names)) != len(self.names):
            raise ParameterError(f"modality names must be unique: {self.names}")
        if len(self.names) != len(self.dims):
            raise ParameterError("one raw dimensionality per modality is required")
        if not self.names:
            raise ParameterError("catalog needs at least one modality")
        if self.tokens <= 0 or self.hidden <= 0 or any(d <= 0 for d in self.dims):
            raise ParameterError("token count, hidden size and modality dims must be positive")

    def __len__(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)


@dataclass
class SubjectBatch:
    """Raw per-modality rows for a set of subjects.

    ``features[m]`` has shape (n, d_m); rows of unobserved modalities hold the
    NaN sentinel.  ``mask`` is (n, |M|) boolean and is the sole authority on
    availability downstream.
    """

    features: list[np.ndarray]
    mask: np.ndarray
    labels: np.ndarray
    subject_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if not self.subject_ids:
            self.subject_ids = [str(i) for i in range(len(self.mask))]

    def __len__(self) -> int:
        return len(self.mask)

    def validate(self) -> "SubjectBatch":
        n = len(self.mask)
        for m, x in enumerate(self.features):
            if x.shape[0] != n:
                raise DimensionError(f"modality {m} has {x.shape[0]} rows for {n} subjects")
            sentinel = np.isnan(x).all(axis=1)
            bad = np.flatnonzero(sentinel == self.mask[:, m])
            if bad.size:
                sid = self.subject_ids[bad[0]]
                raise DataIntegrityError(
                    f"availability mask disagrees with sentinel rows for modality {m}, subject {sid}"
                )
        empty = np.flatnonzero(~self.mask.any(axis=1))
        if empty.size:
            raise DataIntegrityError(f"subject {self.subject_ids[empty[0]]} has no observed modality")
        return self

    def subset(self, rows) -> "SubjectBatch":
        rows = np.asarray(rows)
        return SubjectBatch(
            [x[rows] for x in self.features],
            self.mask[rows],
            self.labels[rows],
            [self.subject_ids[i] for i in rows],
        )

    @property
    def full_coverage(self) -> np.ndarray:
        return self.mask.all(axis=1)


class Tokenizer(Module):
    """One affine layer d_m -> P*D, reshaped to (P, D), plus a modality-type embedding."""

    def __init__(self, in_dim: int, tokens: int, hidden: int, rng: np.random.Generator):
        self.tokens = tokens
        self.hidden = hidden
        self.proj = Linear(in_dim, tokens * hidden, rng)
        self.type_embedding = parameter(rng.normal(0.0, 0.02, size=hidden))

    def forward(self, x: Tensor) -> Tensor:
        z = self.proj(x)
        z = z.reshape(x.shape[:-1] + (self.tokens, self.hidden))
        return z + self.type_embedding


def tokenize_modality(tokenizer: Tokenizer, x) -> Tensor:
    """Tokens (P, D) for one observed raw feature vector."""
    x = np.asarray(x, dtype=np.float64)
    if np.isnan(x).any():
        raise DataIntegrityError("sentinel value inside an observed modality row")
    if x.shape[-1] != tokenizer.proj.in_features:
        raise DimensionError(f"tokenizer expects {tokenizer.proj.in_features} features, got {x.shape[-1]}")
    return tokenizer(Tensor(x))


@dataclass
class TokenSet:
    """Per-modality token blocks for a batch, each (n, P, D), with provenance.

    Blocks of pending (gap) entries are placeholders and must not be read
    until completion replaces them.
    """

    blocks: list[Tensor]
    provenance: np.ndarray

    @property
    def mask(self) -> np.ndarray:
        return self.provenance == OBSERVED

    @property
    def gaps(self) -> np.ndarray:
        return self.provenance == PENDING

    def __len__(self) -> int:
        return self.provenance.shape[0]


def build_token_sets(tokenizers, batch: SubjectBatch) -> TokenSet:
    """Tokenize observed modalities; leave unobserved ones as pending gaps.

    Raw rows of unobserved modalities are replaced by zeros before the affine
    map, so sentinel entries never enter any arithmetic.
    """
    mask = batch.mask
    empty = np.flatnonzero(~mask.any(axis=1))
    if empty.size:
        raise DataIntegrityError(f"subject {batch.subject_ids[empty[0]]} has no observed modality")
    blocks = []
    for m, (tok, x) in enumerate(zip(tokenizers, batch.features)):
        present = mask[:, m]
        if np.isnan(x[present]).any():
            row = np.flatnonzero(present & np.isnan(x).any(axis=1))[0]
            raise DataIntegrityError(f"sentinel inside observed modality {m} for subject {batch.subject_ids[row]}")
        safe = np.where(present[:, None], x, 0.0)
        blocks.append(tok(Tensor(safe)))
    provenance = np.where(mask, OBSERVED, PENDING).astype(object)
    return TokenSet(blocks, provenance)


def concat_blocks(blocks, axis: int = -2) -> Tensor:
    return T.concat(blocks, axis=axis)


def require_complete(tokens: TokenSet) -> None:
    if tokens.gaps.any():
        raise ContractError("token set still contains unresolved gaps")
