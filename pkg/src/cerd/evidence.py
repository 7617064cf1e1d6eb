"""Shared/private evidence decomposition with additive logit attribution.

Logits are built as ``f_S(s) + sum_m w_m f_m(u_m)`` so each modality's
contribution to each class logit can be read off directly.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConsistencyError, ContractError, DimensionError, ParameterError
from .nn import FeedForward, LayerNorm, Linear, Module, MultiHeadAttention
from .tensor import Tensor

IDENTITY_TOL = 1e-9


class EvidenceHead(Module):
    """Extractor, private projections, linear heads and attribution gate."""

    def __init__(
        self,
        dim: int,
        num_modalities: int,
        num_classes: int,
        heads: int,
        rng: np.random.Generator,
        temperature: float = 1.0,
        private_dim: int | None = None,
    ):
        if temperature <= 0:
            raise ParameterError(f"attribution temperature must be positive, got {temperature}")
        du = private_dim or dim
        self.num_modalities = num_modalities
        self.temperature = temperature
        self.extract_norm = LayerNorm(dim)
        self.extractor = MultiHeadAttention(dim, heads, rng)
        self.private = [Linear(dim, du, rng) for _ in range(num_modalities)]
        self.shared_head = Linear(dim, num_classes, rng)
        self.modality_heads = [Linear(du, num_classes, rng) for _ in range(num_modalities)]
        self.attribution_gate = FeedForward(num_modalities * du, dim, rng, out_dim=num_modalities)

    def forward(self, features: Tensor) -> "HeadOutput":
        shared, private, _ = decompose(self, features)
        weights = modality_weights(self, private)
        return attribute_logits(self, shared, private, weights)

    def identity_extractor(self) -> None:
        """Zero the extractor's output projection so it passes rows through."""
        self.extractor.o_proj.weight.data[...] = 0.0
        self.extractor.o_proj.bias.data[...] = 0.0


def decompose(head: EvidenceHead, features: Tensor) -> tuple[Tensor, list[Tensor], Tensor]:
    """Refine the modality sequence, pool a shared summary, project residuals.

    ``features`` is (n, |M|, D).  Returns s (n, D), the list of u_m
    (n, D_u) and the refined rows (n, |M|, D).
    """
    if features.shape[-2] != head.num_modalities:
        raise ContractError(f"expected {head.num_modalities} modality rows, got {features.shape[-2]}")
    h = head.extract_norm(features)
    refined = features + head.extractor(h, h)
    shared = T.mean(refined, axis=-2)
    residual = refined - T.reshape(shared, shared.shape[:-1] + (1, shared.shape[-1]))
    private = [
        proj(T.getitem(residual, (..., m, slice(None)))) for m, proj in enumerate(head.private)
    ]
    return shared, private, refined


def modality_weights(head: EvidenceHead, private: list[Tensor], temperature: float | None = None) -> Tensor:
    """Softmax of the attribution gate scores over modalities."""
    scores = head.attribution_gate(T.concat(private, axis=-1))
    return T.softmax(scores, temperature=head.temperature if temperature is None else temperature)


@dataclass
class HeadOutput:
    logits: Tensor
    shared: Tensor | None = None
    contributions: list[Tensor] | None = None
    weights: Tensor | None = None


def attribute_logits(head: EvidenceHead, shared: Tensor, private: list[Tensor], weights: Tensor) -> HeadOutput:
    shared_logits = head.shared_head(shared)
    contributions = []
    for m, (f_m, u) in enumerate(zip(head.modality_heads, private)):
        w = T.getitem(weights, (..., slice(m, m + 1)))
        contributions.append(w * f_m(u))
    logits = shared_logits
    for c in contributions:
        logits = logits + c
    return HeadOutput(logits, shared_logits, contributions, weights)


class LinearHead(Module):
    """Ablation head: one linear layer on the mean of the modality features."""

    def __init__(self, dim: int, num_classes: int, rng: np.random.Generator):
        self.fc = Linear(dim, num_classes, rng)

    def forward(self, features: Tensor) -> HeadOutput:
        return HeadOutput(self.fc(T.mean(features, axis=-2)))


@dataclass
class EvidenceReport:
    subject_id: str
    logits: np.ndarray
    shared: np.ndarray
    contributions: dict[str, np.ndarray]
    weights: dict[str, float]
    predicted_class: int

    def residual(self) -> float:
        total = self.shared.copy()
        for c in self.contributions.values():
            total = total + c
        return float(np.max(np.abs(self.logits - total)))

    def verify(self, tol: float = IDENTITY_TOL) -> "EvidenceReport":
        r = self.residual()
        if not r < tol:
            raise ConsistencyError(f"additive attribution off by {r:.3e} for subject {self.subject_id}")
        return self

    def to_dict(self) -> dict:
        return {
            "subject_id": self.subject_id,
            "logits": self.logits.tolist(),
            "shared": self.shared.tolist(),
            "contributions": {k: v.tolist() for k, v in self.contributions.items()},
            "weights": dict(self.weights),
            "predicted_class": self.predicted_class,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def build_reports(output: HeadOutput, modality_names, subject_ids) -> list[EvidenceReport]:
    """Split a batched head output into one report per subject."""
    if output.contributions is None:
        raise ContractError("attribution needs the evidence-decomposition head")
    shared = output.shared.data
    contribs = [c.data for c in output.contributions]
    weights = output.weights.data
    reports = []
    for i, sid in enumerate(subject_ids):
        logits = output.logits.data[i]
        reports.append(
            EvidenceReport(
                subject_id=str(sid),
                logits=logits.copy(),
                shared=shared[i].copy(),
                contributions={name: c[i].copy() for name, c in zip(modality_names, contribs)},
                weights={name: float(weights[i, m]) for m, name in enumerate(modality_names)},
                predicted_class=int(np.argmax(logits)),
            )
        )
    return reports


@dataclass
class ImportanceSummary:
    modalities: list[str]
    classes: list[str]
    mean_weight: np.ndarray
    mean_abs_contribution: np.ndarray
    signed_mean: np.ndarray  # (|M|, C)
    count: int

    def top_modality(self) -> str:
        return self.modalities[int(np.argmax(self.mean_abs_contribution))]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["modality", "mean_weight", "mean_abs_contribution"] + [f"mean_{c}" for c in self.classes])
        for m, name in enumerate(self.modalities):
            writer.writerow(
                [name, repr(float(self.mean_weight[m])), repr(float(self.mean_abs_contribution[m]))]
                + [repr(float(v)) for v in self.signed_mean[m]]
            )
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "count": self.count,
            "modalities": {
                name: {
                    "mean_weight": float(self.mean_weight[m]),
                    "mean_abs_contribution": float(self.mean_abs_contribution[m]),
                    "signed_mean": dict(zip(self.classes, map(float, self.signed_mean[m]))),
                }
                for m, name in enumerate(self.modalities)
            },
        }


def importance_summary(reports: list[EvidenceReport], classes) -> ImportanceSummary:
    """Per-modality mean weight, mean L1 norm of contribution and signed per-class mean."""
    if not reports:
        raise ContractError("importance summary needs at least one report")
    names = list(reports[0].contributions)
    classes = list(classes)
    w = np.array([[r.weights[n] for n in names] for r in reports])
    c = np.array([[r.contributions[n] for n in names] for r in reports])
    if c.shape[-1] != len(classes):
        raise DimensionError(f"{c.shape[-1]} logits per contribution but {len(classes)} class names")
    return ImportanceSummary(
        modalities=names,
        classes=[str(k) for k in classes],
        mean_weight=w.mean(axis=0),
        mean_abs_contribution=np.abs(c).sum(axis=-1).mean(axis=0),
        signed_mean=c.mean(axis=0),
        count=len(reports),
    )
