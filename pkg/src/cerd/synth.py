"""Synthetic multimodal benchmark with planted shared and private signal.

Every subject draws a shared latent ``h`` and one private latent ``q_m`` per
modality.  Each modality's features are an affine image of ``(h, q_m)`` plus
Gaussian noise, so the shared part of any modality is linearly predictable
from the others.  Labels are sampled from a softmax over class scores built
from the latents with the requested signal allocation.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from .data_io import Dataset
from .errors import ConfigurationError
from .tensor import softmax


@dataclass(frozen=True)
class SyntheticSpec:
    n_subjects: int = 1200
    n_classes: int = 3
    modality_names: tuple[str, ...] = ("A", "B", "C", "D")
    modality_dims: tuple[int, ...] = (24, 40, 18, 32)
    class_names: tuple[str, ...] = ("CN", "MCI", "AD")
    shared_dim: int = 4
    private_dim: int = 2
    missing_rates: tuple[float, ...] = (0.1, 0.35, 0.35, 0.4)
    shared_signal: float = 0.4
    private_signal: tuple[float, ...] = (0.15, 0.15, 0.15, 0.15)
    signal_strength: float = 4.0
    private_scale: float = 0.6
    noise: float = 0.4
    missingness: str = "independent"
    seed: int = 0

    def __post_init__(self):
        for name in ("modality_names", "modality_dims", "class_names", "missing_rates", "private_signal"):
            object.__setattr__(self, name, tuple(getattr(self, name)))

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigurationError(f"unknown synthetic spec keys: {unknown}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    def validate(self) -> "SyntheticSpec":
        m = len(self.modality_names)
        if self.n_subjects < 20:
            raise ConfigurationError(f"need at least 20 subjects, got {self.n_subjects}")
        if self.n_classes < 2 or len(self.class_names) != self.n_classes:
            raise ConfigurationError("class_names must list n_classes >= 2 names")
        if len(set(self.modality_names)) != m or not m:
            raise ConfigurationError("modality names must be unique and non-empty")
        if len(self.modality_dims) != m or len(self.missing_rates) != m or len(self.private_signal) != m:
            raise ConfigurationError("modality_dims, missing_rates and private_signal need one entry per modality")
        if any(d <= 0 for d in self.modality_dims) or self.shared_dim <= 0 or self.private_dim <= 0:
            raise ConfigurationError("dimensions must be positive")
        if any(not 0.0 <= r < 1.0 for r in self.missing_rates):
            raise ConfigurationError(f"missing rates must lie in [0, 1), got {self.missing_rates}")
        fractions = (self.shared_signal,) + self.private_signal
        if any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
            raise ConfigurationError(f"signal fractions must be non-negative and sum to 1, got {fractions}")
        if self.missingness not in ("independent", "block"):
            raise ConfigurationError(f"unknown missingness pattern {self.missingness!r}")
        if self.noise < 0 or self.signal_strength < 0 or self.private_scale < 0:
            raise ConfigurationError("noise, signal_strength and private_scale must be non-negative")
        return self


def planted_importance(spec: SyntheticSpec) -> dict[str, float]:
    """Signal fractions used at generation: ``shared`` plus one entry per modality."""
    out = {"shared": float(spec.shared_signal)}
    out.update({name: float(f) for name, f in zip(spec.modality_names, spec.private_signal)})
    return out


def _draw_masks(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    n, m = spec.n_subjects, len(spec.modality_names)
    keep = 1.0 - np.asarray(spec.missing_rates)
    budget = max(1000, n)
    rejected = 0
    if spec.missingness == "block":
        phases = 3
        patterns = []
        for _ in range(phases):
            while True:
                p = rng.random(m) < keep
                if p.any():
                    break
                rejected += 1
                if rejected > budget:
                    raise ConfigurationError("missing rates leave almost every pattern empty")
            patterns.append(p)
        return np.asarray(patterns)[rng.integers(phases, size=n)]
    mask = rng.random((n, m)) < keep
    for i in range(n):
        while not mask[i].any():
            rejected += 1
            if rejected > budget:
                raise ConfigurationError(
                    f"missing rates {spec.missing_rates} make all-missing subjects the norm; "
                    f"rejection sampling exceeded {budget} redraws"
                )
            mask[i] = rng.random(m) < keep
    return mask


def _readouts(spec: SyntheticSpec, rng: np.random.Generator):
    """Latent-to-class-score maps, each carrying the same label variance.

    Columns are centred across classes (softmax ignores the shift) and the
    matrix is scaled to squared Frobenius norm C-1, so a latent block with
    signal fraction f contributes exactly f of the expected score variance.
    """
    c = spec.n_classes
    centre = np.eye(c) - 1.0 / c

    def draw(dim):
        r = rng.normal(size=(dim, c)) @ centre
        return r * math.sqrt(c - 1) / np.linalg.norm(r)

    shared = draw(spec.shared_dim)
    private = [draw(spec.private_dim) for _ in spec.modality_names]
    return shared, private


def _class_probs(spec: SyntheticSpec, readouts, h: np.ndarray, q: list[np.ndarray]) -> np.ndarray:
    shared_readout, private_readout = readouts
    scores = math.sqrt(spec.shared_signal) * (h @ shared_readout)
    for frac, qm, r in zip(spec.private_signal, q, private_readout):
        scores = scores + math.sqrt(frac) * (qm @ r)
    return softmax(spec.signal_strength * scores).data


def class_marginals(spec: SyntheticSpec, draws: int = 200_000, seed: int = 1) -> np.ndarray:
    """Monte Carlo estimate of the class frequencies implied by ``spec``.

    Uses the same readouts as :func:`generate` but fresh latents.
    """
    spec = spec.validate()
    readouts = _readouts(spec, np.random.default_rng(spec.seed))
    rng = np.random.default_rng([spec.seed, seed])
    h = rng.normal(size=(draws, spec.shared_dim))
    q = [rng.normal(size=(draws, spec.private_dim)) for _ in spec.modality_names]
    return _class_probs(spec, readouts, h, q).mean(axis=0)


def generate(spec: SyntheticSpec | None = None) -> Dataset:
    """Draw a dataset; identical specs give identical datasets."""
    spec = (spec or SyntheticSpec()).validate()
    rng = np.random.default_rng(spec.seed)
    n, c = spec.n_subjects, spec.n_classes
    names = spec.modality_names

    readouts = _readouts(spec, rng)
    loadings = []
    for d in spec.modality_dims:
        a = rng.normal(size=(spec.shared_dim, d)) / math.sqrt(spec.shared_dim)
        b = spec.private_scale * rng.normal(size=(spec.private_dim, d)) / math.sqrt(spec.private_dim)
        offset = rng.normal(size=d)
        loadings.append((a, b, offset))

    h = rng.normal(size=(n, spec.shared_dim))
    q = [rng.normal(size=(n, spec.private_dim)) for _ in names]

    probs = _class_probs(spec, readouts, h, q)
    u = rng.random(n)
    labels = np.minimum((probs.cumsum(axis=1) < u[:, None]).sum(axis=1), c - 1)

    features = []
    for (a, b, offset), qm, d in zip(loadings, q, spec.modality_dims):
        x = h @ a + qm @ b + offset + spec.noise * rng.normal(size=(n, d))
        features.append(x)

    mask = _draw_masks(spec, rng)
    for m, x in enumerate(features):
        x[~mask[:, m]] = np.nan

    width = len(str(n - 1))
    ids = [f"S{i:0{width}d}" for i in range(n)]
    return Dataset(names, features, mask, labels, spec.class_names, ids, split_seed=spec.seed)
