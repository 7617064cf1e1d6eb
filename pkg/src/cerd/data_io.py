"""Subject-aligned matrix bundles: loading, writing, validation and splits.

A bundle is one CSV per modality (first column ``subject_id``, then the
features; a subject without that modality has every feature set to the
literal ``NaN``), a labels CSV, an optional explicit mask CSV and a
``manifest.json`` that fixes the modality order and class names.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import networkx as nx
import numpy as np

from .errors import (
    AlignmentError,
    ConfigurationError,
    DataIntegrityError,
    LabelError,
    ParameterError,
    StratificationError,
)
from .tokenize import SubjectBatch

SPLIT_RATIOS = (0.7, 0.15, 0.15)
SPLIT_NAMES = ("train", "val", "test")


@dataclass
class Dataset:
    modalities: tuple[str, ...]
    features: list[np.ndarray]
    mask: np.ndarray
    labels: np.ndarray
    classes: tuple[str, ...]
    subject_ids: list[str]
    splits: dict[str, np.ndarray] = field(default_factory=dict)
    split_seed: int = 0

    def __post_init__(self):
        self.modalities = tuple(self.modalities)
        self.classes = tuple(self.classes)
        self.mask = np.asarray(self.mask, dtype=bool)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if not self.splits:
            self.splits = dict(zip(SPLIT_NAMES, split(self.labels, SPLIT_RATIOS, self.split_seed)))

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(x.shape[1] for x in self.features)

    @property
    def full_coverage(self) -> np.ndarray:
        return self.mask.all(axis=1)

    def rows(self, split_name: str) -> np.ndarray:
        try:
            return self.splits[split_name]
        except KeyError:
            raise ConfigurationError(f"unknown split {split_name!r}; expected one of {SPLIT_NAMES}") from None

    def batch(self, rows, standardizer: "Standardizer | None" = None) -> SubjectBatch:
        rows = np.asarray(rows, dtype=np.intp)
        feats = [x[rows] for x in self.features]
        if standardizer is not None:
            feats = standardizer.transform(feats)
        return SubjectBatch(feats, self.mask[rows], self.labels[rows], [self.subject_ids[i] for i in rows])

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.modalities == other.modalities
            and self.classes == other.classes
            and self.subject_ids == other.subject_ids
            and np.array_equal(self.mask, other.mask)
            and np.array_equal(self.labels, other.labels)
            and len(self.features) == len(other.features)
            and all(np.array_equal(a, b, equal_nan=True) for a, b in zip(self.features, other.features))
            and all(np.array_equal(self.splits[k], other.splits[k]) for k in SPLIT_NAMES)
        )

    def validate(self) -> "Dataset":
        SubjectBatch(self.features, self.mask, self.labels, self.subject_ids).validate()
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= len(self.classes)):
            raise LabelError("label index outside the class list")
        return self


@dataclass
class Standardizer:
    """Per-feature mean and deviation estimated on observed training rows."""

    means: list[np.ndarray]
    stds: list[np.ndarray]

    @classmethod
    def fit(cls, dataset: Dataset, rows) -> "Standardizer":
        rows = np.asarray(rows, dtype=np.intp)
        means, stds = [], []
        for m, x in enumerate(dataset.features):
            obs = x[rows][dataset.mask[rows, m]]
            if obs.shape[0] == 0:
                mu, sd = np.zeros(x.shape[1]), np.ones(x.shape[1])
            else:
                mu = obs.mean(axis=0)
                sd = obs.std(axis=0)
                sd = np.where(sd > 0, sd, 1.0)
            means.append(mu)
            stds.append(sd)
        return cls(means, stds)

    def transform(self, features: list[np.ndarray]) -> list[np.ndarray]:
        return [(x - mu) / sd for x, mu, sd in zip(features, self.means, self.stds)]

    def to_dict(self) -> dict:
        return {"means": [m.tolist() for m in self.means], "stds": [s.tolist() for s in self.stds]}

    @classmethod
    def from_dict(cls, d: dict) -> "Standardizer":
        return cls([np.asarray(m, dtype=np.float64) for m in d["means"]], [np.asarray(s, dtype=np.float64) for s in d["stds"]])


# ---------------------------------------------------------------- splits


def _apportion(total: int, ratios) -> np.ndarray:
    """Integer sizes summing to ``total`` by largest remainder."""
    ideal = np.asarray(ratios) * total
    sizes = np.floor(ideal).astype(int)
    order = np.argsort(-(ideal - sizes), kind="stable")
    sizes[order[: total - sizes.sum()]] += 1
    return sizes


def _controlled_rounding(ideal: np.ndarray, col_totals: np.ndarray) -> np.ndarray:
    """Round a matrix with integer row sums so every entry is its floor or ceil and column sums hit ``col_totals``."""
    base = np.floor(ideal + 1e-9).astype(int)
    frac = ideal - base
    row_need = np.rint(ideal.sum(axis=1)).astype(int) - base.sum(axis=1)
    col_need = col_totals - base.sum(axis=0)
    g = nx.DiGraph()
    for c, need in enumerate(row_need):
        g.add_edge("src", ("r", c), capacity=int(need))
        for s in range(ideal.shape[1]):
            if frac[c, s] > 1e-9:
                g.add_edge(("r", c), ("c", s), capacity=1)
    for s, need in enumerate(col_need):
        g.add_edge(("c", s), "sink", capacity=int(need))
    value, flow = nx.maximum_flow(g, "src", "sink")
    if value != row_need.sum():
        raise StratificationError("no stratified rounding exists for these class counts")
    out = base.copy()
    for c in range(ideal.shape[0]):
        for s in range(ideal.shape[1]):
            out[c, s] += flow.get(("r", c), {}).get(("c", s), 0)
    return out


def split(labels, ratios=SPLIT_RATIOS, seed: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Class-stratified train/val/test indices.

    Split sizes follow ``ratios`` by largest remainder; each class's count in
    each split is the floor or ceiling of its proportional share.
    """
    labels = np.asarray(labels, dtype=np.int64)
    ratios = np.asarray(ratios, dtype=np.float64)
    if ratios.shape != (3,) or (ratios <= 0).any() or abs(ratios.sum() - 1.0) > 1e-9:
        raise ParameterError(f"split ratios must be three positive numbers summing to 1, got {ratios.tolist()}")
    n = labels.size
    classes = np.unique(labels)
    counts = np.array([(labels == c).sum() for c in classes])
    table = _controlled_rounding(np.outer(counts, ratios), _apportion(n, ratios))
    if (table[:, 0] == 0).any():
        missing = classes[table[:, 0] == 0].tolist()
        raise StratificationError(f"classes {missing} would be absent from the training split")
    rng = np.random.default_rng(seed)
    parts: list[list[int]] = [[], [], []]
    for c, row in zip(classes, table):
        members = rng.permutation(np.flatnonzero(labels == c))
        bounds = np.cumsum(row)
        for s, chunk in enumerate(np.split(members, bounds[:-1])):
            parts[s].extend(chunk.tolist())
    return tuple(np.sort(np.asarray(p, dtype=np.intp)) for p in parts)


# ---------------------------------------------------------------- files


def _fmt(v: float) -> str:
    return "NaN" if math.isnan(v) else repr(float(v))


def _write_matrix(path: Path, header: list[str], ids: list[str], values: np.ndarray) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for sid, row in zip(ids, values):
            w.writerow([sid] + [_fmt(v) for v in row])


def write(dataset: Dataset, out_dir, write_mask: bool = False) -> Path:
    """Write ``dataset`` as a bundle; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, x in zip(dataset.modalities, dataset.features):
        fname = f"{name}.csv"
        _write_matrix(out / fname, ["subject_id"] + [f"{name}_{j}" for j in range(x.shape[1])], dataset.subject_ids, x)
        entries.append({"name": name, "file": fname, "dim": int(x.shape[1])})
    with open(out / "labels.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "class"])
        for sid, y in zip(dataset.subject_ids, dataset.labels):
            w.writerow([sid, dataset.classes[y]])
    manifest = {
        "modalities": entries,
        "labels_file": "labels.csv",
        "classes": list(dataset.classes),
        "split_seed": dataset.split_seed,
    }
    if write_mask:
        with open(out / "mask.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["subject_id"] + list(dataset.modalities))
            for sid, row in zip(dataset.subject_ids, dataset.mask):
                w.writerow([sid] + [int(v) for v in row])
        manifest["mask_file"] = "mask.csv"
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return path


def _read_table(path: Path) -> tuple[list[str], list[str], list[list[str]]]:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except FileNotFoundError:
        raise DataIntegrityError(f"missing bundle file {path}") from None
    if not rows:
        raise DataIntegrityError(f"{path} has no header row")
    header, body = rows[0], rows[1:]
    return header, [r[0] for r in body], [r[1:] for r in body]


def _check_alignment(reference: list[str], ids: list[str], what: str) -> None:
    if ids == reference:
        return
    ref, got = set(reference), set(ids)
    offenders = sorted(ref ^ got)
    if not offenders:
        offenders = [a for a, b in zip(reference, ids) if a != b][:10]
        raise AlignmentError(f"{what}: subject order differs from labels file, first offenders {offenders}")
    raise AlignmentError(f"{what}: subject_id sets differ, offenders {offenders[:20]}")


def load(manifest_path, column_fill: bool = False, split_seed: int | None = None) -> Dataset:
    """Read a bundle into a :class:`Dataset` without imputing anything.

    ``column_fill`` replaces isolated NaN entries inside observed rows by the
    training-split column median; otherwise such entries are an integrity
    error.  Availability comes from the mask file when present, else from
    all-NaN rows.
    """
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DataIntegrityError(f"manifest {manifest_path} does not exist") from None
    root = manifest_path.parent
    classes = tuple(manifest["classes"])
    class_index = {c: i for i, c in enumerate(classes)}

    _, ids, body = _read_table(root / manifest["labels_file"])
    labels = []
    for sid, row in zip(ids, body):
        if row[0] not in class_index:
            raise LabelError(f"subject {sid}: unknown class label {row[0]!r}")
        labels.append(class_index[row[0]])
    labels = np.asarray(labels, dtype=np.int64)

    names, features = [], []
    for entry in manifest["modalities"]:
        header, mids, rows = _read_table(root / entry["file"])
        _check_alignment(ids, mids, entry["name"])
        x = np.array([[float(v) for v in r] for r in rows], dtype=np.float64).reshape(len(rows), -1)
        if x.shape[1] != int(entry["dim"]):
            raise DataIntegrityError(f"{entry['name']}: manifest says {entry['dim']} features, file has {x.shape[1]}")
        names.append(entry["name"])
        features.append(x)

    sentinel = np.stack([np.isnan(x).all(axis=1) for x in features], axis=1)
    if manifest.get("mask_file"):
        mheader, mids, mrows = _read_table(root / manifest["mask_file"])
        _check_alignment(ids, mids, "mask")
        if mheader[1:] != names:
            raise DataIntegrityError(f"mask columns {mheader[1:]} do not match modalities {names}")
        mask = np.array([[int(v) for v in r] for r in mrows], dtype=int).astype(bool)
        bad = np.argwhere(mask == sentinel)
        if bad.size:
            i, m = bad[0]
            state = "observed" if mask[i, m] else "missing"
            raise DataIntegrityError(
                f"mask marks subject {ids[i]} modality {names[m]} {state} but its row "
                f"{'is all sentinel' if sentinel[i, m] else 'holds values'}"
            )
    else:
        mask = ~sentinel

    seed = int(manifest.get("split_seed", 0)) if split_seed is None else split_seed
    dataset = Dataset(tuple(names), features, mask, labels, classes, list(ids), split_seed=seed)

    for m, x in enumerate(features):
        holes = np.isnan(x) & mask[:, [m]]
        if not holes.any():
            continue
        if not column_fill:
            i = int(np.argwhere(holes)[0][0])
            raise DataIntegrityError(f"observed row of subject {ids[i]} in modality {names[m]} contains a sentinel")
        train = dataset.splits["train"]
        ref = x[train][mask[train, m]]
        medians = np.nanmedian(ref, axis=0) if ref.size else np.zeros(x.shape[1])
        medians = np.where(np.isnan(medians), 0.0, medians)
        r, c = np.nonzero(holes)
        x[r, c] = medians[c]
    return dataset.validate()
