"""Synthetic class-disjoint datasets and CSV ingestion.

Features always live in [0, 1] so perturbation budgets quoted as pixel
fractions (8/255 and friends) keep their usual meaning. Train/test splits
partition classes, never samples: evaluation is zero-shot.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataFormatError, NumericError
from .rng import Rng


@dataclass
class Dataset:
    x: np.ndarray        # [n, dim], values in [0, 1]
    labels: np.ndarray   # [n] integer class ids
    role: str = "train"
    meta: dict = field(default_factory=dict)

    @property
    def classes(self) -> np.ndarray:
        return np.unique(self.labels)

    def validate(self) -> None:
        if self.x.ndim != 2 or self.labels.shape != (self.x.shape[0],):
            raise ConfigError("features must be [n, dim] with one label per row")
        if not np.all(np.isfinite(self.x)):
            raise NumericError("dataset features contain non-finite values")
        if self.x.size and (self.x.min() < 0.0 or self.x.max() > 1.0):
            raise ConfigError("features must lie in [0, 1]")
        _, counts = np.unique(self.labels, return_counts=True)
        if np.any(counts < 2):
            raise ConfigError("every class needs at least 2 samples")


def gen_synthetic(
    n_classes: int, per_class: int, dim: int, spread: float, rng: Rng
) -> Dataset:
    """Gaussian blobs around well-separated class centers.

    Centers are drawn uniformly in [0.2, 0.8]^dim and redrawn until every
    pair is at least 4 * spread apart; samples are center + N(0, spread^2)
    noise clamped to [0, 1].
    """
    if n_classes < 2 or per_class < 2:
        raise ConfigError("need n_classes >= 2 and per_class >= 2")
    if not spread > 0:
        raise ConfigError(f"spread must be > 0, got {spread}")
    min_sep = 4.0 * spread
    center_rng = rng.split("centers")
    centers = np.empty((n_classes, dim))
    retries = 0
    placed = 0
    while placed < n_classes:
        cand = center_rng.uniform(0.2, 0.8, size=dim)
        if placed == 0 or np.linalg.norm(centers[:placed] - cand, axis=1).min() >= min_sep:
            centers[placed] = cand
            placed += 1
        else:
            retries += 1
            if retries > 10_000:
                raise ConfigError(
                    "could not place class centers with the required separation; "
                    "increase dim or decrease spread"
                )
    noise_rng = rng.split("noise")
    x = np.repeat(centers, per_class, axis=0) + noise_rng.normal(
        0.0, spread, size=(n_classes * per_class, dim)
    )
    x = np.clip(x, 0.0, 1.0)
    labels = np.repeat(np.arange(n_classes), per_class)
    sep = _min_center_separation(centers)
    assert sep >= min_sep
    ds = Dataset(
        x=x,
        labels=labels,
        role="train",
        meta={
            "generator": "synthetic",
            "n_classes": n_classes,
            "per_class": per_class,
            "dim": dim,
            "spread": spread,
            "min_center_separation": sep,
        },
    )
    ds.validate()
    return ds


def _min_center_separation(centers: np.ndarray) -> float:
    diffs = centers[:, None, :] - centers[None, :, :]
    d = np.sqrt((diffs * diffs).sum(axis=2))
    np.fill_diagonal(d, np.inf)
    return float(d.min())


def class_disjoint_split(ds: Dataset, train_fraction: float, rng: Rng):
    """Partition classes (not samples) into a train and a test dataset."""
    classes = ds.classes
    n_train = int(round(train_fraction * len(classes)))
    if n_train < 2 or len(classes) - n_train < 2:
        raise ConfigError(
            f"split leaves fewer than 2 classes on one side "
            f"({n_train} train / {len(classes) - n_train} test)"
        )
    order = rng.permutation(len(classes))
    train_classes = set(classes[order[:n_train]].tolist())
    in_train = np.array([lab in train_classes for lab in ds.labels])
    train = Dataset(ds.x[in_train].copy(), ds.labels[in_train].copy(), "train", dict(ds.meta))
    test = Dataset(ds.x[~in_train].copy(), ds.labels[~in_train].copy(), "test", dict(ds.meta))
    train.validate()
    test.validate()
    return train, test


def save_csv(ds: Dataset, path) -> None:
    """Write `f0,...,f{d-1},label` rows; floats keep full f64 fidelity."""
    dim = ds.x.shape[1]
    with open(path, "w") as fh:
        fh.write(",".join([f"f{j}" for j in range(dim)] + ["label"]) + "\n")
        for row, lab in zip(ds.x, ds.labels):
            fh.write(",".join(repr(float(v)) for v in row) + f",{int(lab)}\n")
    meta = dict(ds.meta)
    meta["role"] = ds.role
    with open(str(path) + ".meta.json", "w") as fh:
        json.dump(meta, fh, sort_keys=True, indent=1)


def load_csv(path, role: str = "train") -> Dataset:
    """Read a feature CSV, rescaling to [0, 1] if any value falls outside.

    The applied affine transform (offset, scale) is recorded in the dataset
    metadata so the mapping back to raw units stays available.
    """
    try:
        fh = open(path)
    except FileNotFoundError:
        raise ConfigError(f"dataset file not found: {path}") from None
    with fh:
        header = fh.readline()
        if not header:
            raise DataFormatError("empty file", line=1)
        cols = header.strip().split(",")
        if cols[-1] != "label" or any(c != f"f{j}" for j, c in enumerate(cols[:-1])):
            raise DataFormatError(
                "header must be f0,...,f{d-1},label", line=1
            )
        dim = len(cols) - 1
        feats, labels = [], []
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            parts = line.strip().split(",")
            if len(parts) != dim + 1:
                raise DataFormatError(
                    f"expected {dim + 1} fields, found {len(parts)}", line=lineno
                )
            try:
                feats.append([float(v) for v in parts[:-1]])
            except ValueError:
                raise DataFormatError("non-numeric feature value", line=lineno) from None
            try:
                labels.append(int(parts[-1]))
            except ValueError:
                raise DataFormatError("label must be an integer", line=lineno) from None
    x = np.array(feats, dtype=float)
    y = np.array(labels, dtype=int)
    if x.size == 0:
        raise DataFormatError("no data rows", line=2)
    if not np.all(np.isfinite(x)):
        raise DataFormatError("non-finite feature value")
    meta = {"source": str(path)}
    lo, hi = float(x.min()), float(x.max())
    if lo < 0.0 or hi > 1.0:
        scale = hi - lo
        if scale == 0.0:
            raise DataFormatError("features are constant and outside [0, 1]")
        x = (x - lo) / scale
        meta["rescale"] = {"offset": lo, "scale": scale}
    sidecar = str(path) + ".meta.json"
    try:
        with open(sidecar) as mh:
            meta.update(json.load(mh))
    except FileNotFoundError:
        pass
    ds = Dataset(x=x, labels=y, role=role, meta=meta)
    ds.validate()
    return ds
