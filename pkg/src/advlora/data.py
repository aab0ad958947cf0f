"""Synthetic blob datasets, CSV I/O, few-shot sampling and base/new class splits."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DataFormatError, InsufficientDataError
from .linalg import TAG_DATA, TAG_SHUFFLE, keyed_rng


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"
    name: str = "dataset"
    # Row identifiers; sampling keeps them so selections can be traced back.
    ids: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("features and labels disagree in length")
        if self.ids is None:
            self.ids = np.arange(len(self.labels))
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if not np.all(np.isfinite(self.features)):
            raise ValueError("feature rows must be finite")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("labels out of range")
        if self.split == "train" and len(self.labels):
            missing = [k for k, c in enumerate(self.class_counts()) if c == 0]
            if missing:
                raise ValueError(f"train split has no samples for classes {missing}")

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def class_counts(self) -> list:
        return np.bincount(self.labels, minlength=self.num_classes).tolist()

    def subset(self, rows, **changes) -> "Dataset":
        rows = np.asarray(rows, dtype=np.int64)
        return replace(self, features=self.features[rows], labels=self.labels[rows], ids=self.ids[rows], meta=dict(self.meta), **changes)

    def metadata(self) -> dict:
        return {"name": self.name, "split": self.split, "K": self.num_classes, "n": self.dim, "counts": self.class_counts(), **self.meta}


def nearest_center_accuracy(features, labels, centers) -> float:
    d2 = ((features[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    return float(np.mean(np.argmin(d2, axis=1) == labels))


def class_means(ds: Dataset) -> np.ndarray:
    """Per-class mean feature vector (``K x n``); empty classes give zero rows."""
    out = np.zeros((ds.num_classes, ds.dim))
    for c in range(ds.num_classes):
        rows = ds.features[ds.labels == c]
        if len(rows):
            out[c] = rows.mean(axis=0)
    return out


def make_blobs(K: int, n: int, per_class: int, spread: float, seed: int = 0, name: str = "blobs"):
    """Gaussian blobs around ``K`` random unit-norm centres.

    Each class gets ``per_class`` samples; the first ``per_class // 2`` go to
    train and the rest to test. The nearest-centre test accuracy is stored in
    ``meta["nearest_center_acc"]`` as a reference level for the task.
    """
    if K < 2 or per_class < 2:
        raise ValueError("make_blobs needs K >= 2 and per_class >= 2")
    rng = keyed_rng(seed, TAG_DATA)
    centers = rng.normal(size=(K, n))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    noise = rng.normal(0.0, 1.0, size=(K, per_class, n)) * spread
    samples = centers[:, None, :] + noise
    n_train = per_class // 2
    tr = samples[:, :n_train].reshape(-1, n)
    te = samples[:, n_train:].reshape(-1, n)
    ytr = np.repeat(np.arange(K), n_train)
    yte = np.repeat(np.arange(K), per_class - n_train)
    proxy = nearest_center_accuracy(te, yte, centers)
    meta = {"generator": "blobs", "seed": seed, "spread": spread, "nearest_center_acc": proxy}
    train = Dataset(tr, ytr, K, "train", name, meta=dict(meta))
    test = Dataset(te, yte, K, "test", name, ids=np.arange(len(yte)) + len(ytr), meta=dict(meta))
    train.meta["centers"] = test.meta["centers"] = centers.tolist()
    return train, test


# -- CSV ---------------------------------------------------------------------

def load_csv(path, name: str | None = None, split: str = "train") -> Dataset:
    """Parse ``label,f0,...,f{n-1}`` rows. ``K`` is inferred as max label + 1."""
    path = Path(path)
    with open(path, newline="") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DataFormatError("empty file, expected a header", line=1)
    header = lines[0].split(",")
    if header[0] != "label" or any(h != f"f{i}" for i, h in enumerate(header[1:])) or len(header) < 2:
        raise DataFormatError("missing or malformed header; expected 'label,f0,f1,...'", line=1)
    width = len(header)
    labels, rows = [], []
    for lineno, text in enumerate(lines[1:], start=2):
        if text == "":
            continue
        fields = text.split(",")
        if len(fields) != width:
            raise DataFormatError(f"expected {width} fields, found {len(fields)}", line=lineno)
        try:
            label = int(fields[0])
            vals = [float(f) for f in fields[1:]]
        except ValueError as exc:
            raise DataFormatError(f"non-numeric field ({exc})", line=lineno) from None
        if label < 0:
            raise DataFormatError("negative label", line=lineno)
        labels.append(label)
        rows.append(vals)
    if not rows:
        raise DataFormatError("no data rows", line=2)
    labels = np.array(labels, dtype=np.int64)
    return Dataset(np.array(rows), labels, int(labels.max()) + 1, split, name or path.stem)


def format_float(x: float) -> str:
    # repr gives the shortest string that round-trips to the same double.
    return repr(float(x))


def save_csv(ds: Dataset, path) -> None:
    lines = ["label," + ",".join(f"f{i}" for i in range(ds.dim))]
    for label, row in zip(ds.labels, ds.features):
        lines.append(str(int(label)) + "," + ",".join(format_float(v) for v in row))
    with open(path, "w", newline="") as fh:
        fh.write("\n".join(lines) + "\n")


def save_metadata(ds: Dataset, path) -> None:
    meta = {k: v for k, v in ds.metadata().items() if k != "centers"}
    Path(path).write_text(json.dumps(meta, indent=2) + "\n")


# -- sampling ----------------------------------------------------------------

def sample_few_shot(ds: Dataset, shots: int, seed: int = 0) -> Dataset:
    """Exactly ``shots`` samples per class, chosen by a seeded shuffle within each class."""
    chosen = []
    for k in range(ds.num_classes):
        rows = np.flatnonzero(ds.labels == k)
        if len(rows) < shots:
            raise InsufficientDataError(f"class {k} has {len(rows)} samples, {shots} requested")
        perm = keyed_rng(seed, TAG_SHUFFLE, k).permutation(len(rows))
        chosen.append(np.sort(rows[perm[:shots]]))
    out = ds.subset(np.concatenate(chosen), name=f"{ds.name}-{shots}shot")
    out.meta["shots"] = shots
    out.meta["sample_seed"] = seed
    return out


def split_base_new(ds: Dataset, seed: int = 0):
    """Lower ``ceil(K/2)`` class ids become "base", the rest "new"; labels are re-indexed.

    ``seed`` is accepted for a future randomized split and currently unused.
    """
    K = ds.num_classes
    if K < 2:
        raise ValueError("split_base_new needs at least 2 classes")
    classes = np.arange(K)
    n_base = math.ceil(K / 2)
    parts = []
    for part_name, cls in (("base", classes[:n_base]), ("new", classes[n_base:])):
        remap = {int(c): i for i, c in enumerate(cls)}
        rows = np.flatnonzero(np.isin(ds.labels, cls))
        labels = np.array([remap[int(v)] for v in ds.labels[rows]], dtype=np.int64)
        sub = Dataset(ds.features[rows], labels, len(cls), ds.split, f"{ds.name}-{part_name}", ds.ids[rows], dict(ds.meta))
        sub.meta["class_mapping"] = {str(orig): new for orig, new in remap.items()}
        sub.meta["split_convention"] = "sorted class ids, first ceil(K/2) are base"
        parts.append(sub)
    return parts[0], parts[1]
