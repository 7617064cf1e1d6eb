"""Training, evaluation, checkpoints and the ablation runner."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .cer import build_context, reconstruction_loss
from .data_io import Dataset, Standardizer
from .errors import CompatibilityError, ConfigurationError, LabelError, TrainingDivergenceError
from .evidence import EvidenceReport, build_reports
from .metrics import classification_metrics
from .model import CERDModel, TrainConfig
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "cerd-checkpoint"
CHECKPOINT_VERSION = 1

VARIANTS = {
    "full": {},
    "no_ed": {"head": "plain_linear"},
    "static_fill": {"completion": "static_fill"},
    "no_cer": {"completion": "zero_fill"},
    "no_moe": {"backbone": "shared_ffn"},
}


# ---------------------------------------------------------------- losses


def cross_entropy(logits: Tensor, labels) -> Tensor:
    labels = np.asarray(labels, dtype=np.intp)
    n, c = logits.shape
    if labels.shape != (n,) or (labels < 0).any() or (labels >= c).any():
        raise LabelError(f"labels must be {n} class indices in [0, {c})")
    logp = T.log_softmax(logits, axis=-1)
    return -T.mean(T.getitem(logp, (np.arange(n), labels)))


def total_loss(logits: Tensor, labels, rec_loss: Tensor | None, rec_weight: float) -> Tensor:
    """Cross-entropy on the logits plus ``rec_weight`` times the reconstruction loss."""
    loss = cross_entropy(logits, labels)
    if rec_loss is not None and rec_weight:
        loss = loss + rec_loss * rec_weight
    return loss


# ---------------------------------------------------------------- optimiser


def adam_step(param, grad, m, v, t: int, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update; returns new (param, m, v)."""
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    return param - lr * m_hat / (np.sqrt(v_hat) + eps), m, v


class Adam:
    """Adam over named parameters.

    Parameters with no gradient this step are skipped entirely; gradients
    are cleared after every step.
    """

    def __init__(self, named_parameters, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(named_parameters)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        for name, p in self.params:
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise TrainingDivergenceError(name)
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        step = lr / (1.0 - b1**self.t)
        inv_bc2 = 1.0 / (1.0 - b2**self.t)
        # in-place form of adam_step
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data -= step * m / (np.sqrt(v * inv_bc2) + self.eps)
        self.zero_grad()

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None


# ---------------------------------------------------------------- records


@dataclass
class MetricsRecord:
    epoch: int
    phase: str
    train_loss: float
    rec_loss: float
    cls_loss: float
    val_acc: float
    val_f1: float
    val_auc: float
    expert_load: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return dict(vars(self))


@dataclass
class Checkpoint:
    config: TrainConfig
    modalities: tuple[str, ...]
    dims: tuple[int, ...]
    classes: tuple[str, ...]
    standardizer: Standardizer
    state: dict[str, np.ndarray]
    best_epoch: int = 0

    def build_model(self) -> CERDModel:
        model = CERDModel.for_dataset(self.modalities, self.dims, len(self.classes), self.config)
        model.load_state_dict(self.state)
        return model.eval()

    def check_compatible(self, dataset: Dataset) -> None:
        if tuple(dataset.modalities) != tuple(self.modalities) or tuple(dataset.dims) != tuple(self.dims):
            raise CompatibilityError(
                f"checkpoint modalities {list(zip(self.modalities, self.dims))} do not match "
                f"data modalities {list(zip(dataset.modalities, dataset.dims))}"
            )
        if tuple(dataset.classes) != tuple(self.classes):
            raise CompatibilityError(f"checkpoint classes {self.classes} differ from data classes {dataset.classes}")

    def to_dict(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "seed": self.config.seed,
            "config": self.config.to_dict(),
            "modalities": [{"name": n, "dim": d} for n, d in zip(self.modalities, self.dims)],
            "classes": list(self.classes),
            "standardizer": self.standardizer.to_dict(),
            "best_epoch": self.best_epoch,
            "parameters": {k: {"shape": list(v.shape), "values": v.reshape(-1).tolist()} for k, v in self.state.items()},
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n", encoding="utf-8")

    @classmethod
    def from_dict(cls, d: dict) -> "Checkpoint":
        if d.get("format") != CHECKPOINT_FORMAT or d.get("version") != CHECKPOINT_VERSION:
            raise CompatibilityError(f"unsupported checkpoint format {d.get('format')!r} v{d.get('version')}")
        state = {
            k: np.asarray(v["values"], dtype=np.float64).reshape(v["shape"]) for k, v in d["parameters"].items()
        }
        return cls(
            config=TrainConfig.from_dict(d["config"]),
            modalities=tuple(m["name"] for m in d["modalities"]),
            dims=tuple(int(m["dim"]) for m in d["modalities"]),
            classes=tuple(d["classes"]),
            standardizer=Standardizer.from_dict(d["standardizer"]),
            state=state,
            best_epoch=int(d.get("best_epoch", 0)),
        )

    @classmethod
    def load(cls, path) -> "Checkpoint":
        try:
            return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
        except FileNotFoundError:
            raise ConfigurationError(f"checkpoint {path} does not exist") from None


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[MetricsRecord]
    test: dict[str, float]

    @property
    def model(self) -> CERDModel:
        return self.checkpoint.build_model()


# ---------------------------------------------------------------- evaluation


def predict_scores(model: CERDModel, dataset: Dataset, rows, standardizer: Standardizer, batch_size: int = 512) -> np.ndarray:
    model.eval()
    rows = np.asarray(rows, dtype=np.intp)
    out = []
    with no_grad():
        for start in range(0, rows.size, batch_size):
            batch = dataset.batch(rows[start : start + batch_size], standardizer)
            out.append(T.softmax(model(batch).logits).data)
    return np.concatenate(out, axis=0) if out else np.zeros((0, model.num_classes))


def evaluate_model(model: CERDModel, dataset: Dataset, rows, standardizer: Standardizer) -> dict[str, float]:
    rows = np.asarray(rows, dtype=np.intp)
    if rows.size == 0:
        raise ConfigurationError("cannot evaluate an empty split")
    scores = predict_scores(model, dataset, rows, standardizer, model.config.eval_batch_size)
    return classification_metrics(dataset.labels[rows], scores)


def evaluate(checkpoint: Checkpoint, dataset: Dataset, split: str = "test") -> dict[str, float]:
    """Accuracy, macro-F1 and macro one-vs-rest AUC of a checkpoint on a split."""
    checkpoint.check_compatible(dataset)
    return evaluate_model(checkpoint.build_model(), dataset, dataset.rows(split), checkpoint.standardizer)


def attribute(checkpoint: Checkpoint, dataset: Dataset, split: str = "test") -> list[EvidenceReport]:
    """Per-subject evidence reports, each verified against the additive identity."""
    checkpoint.check_compatible(dataset)
    model = checkpoint.build_model()
    rows = dataset.rows(split)
    reports = []
    with no_grad():
        for start in range(0, rows.size, model.config.eval_batch_size):
            chunk = rows[start : start + model.config.eval_batch_size]
            batch = dataset.batch(chunk, checkpoint.standardizer)
            out = model(batch)
            reports.extend(r.verify() for r in build_reports(out.head, dataset.modalities, batch.subject_ids))
    return reports


def reconstruction_errors(model: CERDModel, dataset: Dataset, rows, standardizer: Standardizer) -> np.ndarray:
    """Per-modality masked-reconstruction MSE over the fully observed subjects among ``rows``.

    Each modality is hidden in turn and regenerated from all the others.
    """
    if model.generators is None:
        raise ConfigurationError("model has no reconstruction generators")
    rows = np.asarray(rows, dtype=np.intp)
    rows = rows[dataset.full_coverage[rows]]
    if rows.size == 0:
        raise ConfigurationError("no fully observed subjects to reconstruct")
    model.eval()
    errors = []
    with no_grad():
        tokens = model.tokenize(dataset.batch(rows, standardizer))
        for m, gen in enumerate(model.generators):
            predicted = gen(build_context(tokens, m))
            errors.append(reconstruction_loss(predicted, tokens.blocks[m]).item())
    return np.asarray(errors)


# ---------------------------------------------------------------- training


def _batches(rows: np.ndarray, size: int, rng: np.random.Generator):
    order = rng.permutation(rows)
    for start in range(0, order.size, size):
        yield order[start : start + size]


def run_training(config: TrainConfig, dataset: Dataset, on_epoch=None) -> TrainResult:
    """Train on the train split, keep the best-validation-AUC parameters, score the test split.

    With reconstruction warm-up, the first ``warmup_epochs`` epochs update
    tokenizers and generators on fully observed training subjects only.
    """
    config.validate()
    train_rows, val_rows, test_rows = (dataset.rows(s) for s in ("train", "val", "test"))
    if config.completion == "cer" and not dataset.full_coverage[train_rows].any():
        raise ConfigurationError("reconstruction needs at least one fully observed training subject")
    shuffle_rng, mask_rng = (np.random.default_rng(s) for s in np.random.SeedSequence([config.seed, 1]).spawn(2))
    standardizer = Standardizer.fit(dataset, train_rows)
    model = CERDModel.for_dataset(dataset.modalities, dataset.dims, len(dataset.classes), config)
    opt = Adam(model.named_parameters(), config.lr)

    def checkpoint(state, best_epoch):
        return Checkpoint(config, dataset.modalities, dataset.dims, dataset.classes, standardizer, state, best_epoch)

    history: list[MetricsRecord] = []
    if config.epochs == 0:
        ckpt = checkpoint(model.state_dict(), 0)
        return TrainResult(ckpt, history, {})

    full_train = train_rows[dataset.full_coverage[train_rows]]
    best_auc, best_state, best_epoch = -math.inf, model.state_dict(), 0
    num_experts = config.experts if config.backbone == "moe" else 0
    for epoch in range(1, config.epochs + 1):
        warm = epoch <= config.warmup_epochs
        load = np.zeros(num_experts, dtype=int)
        sums = np.zeros(3)
        steps = 0
        model.train()
        if warm and config.warmup_mode == "reconstruction":
            phase = "warmup"
            if model.generators is not None:
                for rows in _batches(full_train, config.batch_size, shuffle_rng):
                    tokens = model.tokenize(dataset.batch(rows, standardizer))
                    rec = model.reconstruction_loss(tokens, mask_rng)
                    rec.backward()
                    opt.step()
                    sums += (rec.item(), rec.item(), 0.0)
                    steps += 1
        else:
            phase = "train"
            lr = config.lr * (epoch / (config.warmup_epochs + 1) if warm else 1.0)
            for rows in _batches(train_rows, config.batch_size, shuffle_rng):
                batch = dataset.batch(rows, standardizer)
                out = model(batch)
                rec = model.reconstruction_loss(out.tokens, mask_rng)
                loss = total_loss(out.logits, batch.labels, rec, config.rec_weight)
                aux = model.auxiliary_loss(out)
                if aux is not None:
                    loss = loss + aux
                loss.backward()
                opt.step(lr)
                rec_v = rec.item() if rec is not None else 0.0
                sums += (loss.item(), rec_v, loss.item() - config.rec_weight * rec_v)
                steps += 1
                if out.backbone.decision is not None:
                    load += np.bincount(out.backbone.decision.selected.reshape(-1), minlength=num_experts)
        val = evaluate_model(model, dataset, val_rows, standardizer)
        means = sums / max(steps, 1)
        record = MetricsRecord(epoch, phase, *map(float, means), val["acc"], val["f1"], val["auc"], load.tolist())
        history.append(record)
        if on_epoch is not None:
            on_epoch(record)
        log.info("epoch %d %s loss=%.4f val_auc=%.4f", epoch, phase, record.train_loss, record.val_auc)
        if phase == "train" and val["auc"] >= best_auc:
            best_auc, best_state, best_epoch = val["auc"], model.state_dict(), epoch

    ckpt = checkpoint(best_state, best_epoch)
    test = evaluate(ckpt, dataset, "test")
    return TrainResult(ckpt, history, test)


# ---------------------------------------------------------------- ablation


@dataclass
class AblationRow:
    variant: str
    n_params: int
    runs: dict[int, dict[str, float]]

    def median(self, metric: str) -> float:
        return float(np.median([r[metric] for r in self.runs.values()]))


def run_ablation(base: TrainConfig, dataset: Dataset, seeds=(0,), variants=None, on_run=None) -> list[AblationRow]:
    """Train every ablation variant with identical seeds; test metrics per seed."""
    rows = []
    for name in variants or VARIANTS:
        changes = VARIANTS[name]
        runs = {}
        n_params = 0
        for seed in seeds:
            cfg = base.replace(seed=seed, **changes)
            result = run_training(cfg, dataset)
            runs[seed] = result.test
            n_params = int(sum(v.size for v in result.checkpoint.state.values()))
            if on_run is not None:
                on_run(name, seed, result)
        rows.append(AblationRow(name, n_params, runs))
    return rows
