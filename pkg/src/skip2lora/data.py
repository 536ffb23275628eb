"""Datasets: CSV ingestion, standardisation and a seeded drift generator."""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from . import seeding
from .errors import DataError


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = ""
    label_map: tuple = ()

    def __post_init__(self):
        f = np.ascontiguousarray(self.features, dtype=np.float32)
        y = np.ascontiguousarray(self.labels, dtype=np.int64)
        if f.ndim != 2 or f.shape[0] < 1:
            raise DataError(f"{self.name or 'dataset'}: features must be a non-empty 2-D array")
        if y.shape != (f.shape[0],):
            raise DataError(f"{self.name or 'dataset'}: {y.shape[0]} labels for {f.shape[0]} rows")
        if y.min() < 0 or y.max() >= self.num_classes:
            raise DataError(f"{self.name or 'dataset'}: labels must lie in [0, {self.num_classes})")
        if not np.isfinite(f).all():
            raise DataError(f"{self.name or 'dataset'}: non-finite feature values")
        f.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "labels", y)
        if not self.label_map:
            object.__setattr__(self, "label_map", tuple(range(self.num_classes)))

    def __len__(self):
        return self.features.shape[0]

    @property
    def num_features(self) -> int:
        return self.features.shape[1]


def _parse_label(cell: str, row: int, col: int):
    try:
        v = float(cell)
    except ValueError:
        raise DataError(f"row {row}, column {col}: label {cell!r} is not numeric") from None
    if not v.is_integer():
        raise DataError(f"row {row}, column {col}: label {cell!r} is not integral")
    return int(v)


def load_csv(path, label_column: int | str = -1, label_map=None, name: str | None = None) -> Dataset:
    """Read a comma-separated file with one sample per row.

    A first line containing any non-numeric cell is treated as a header.
    ``label_column`` is a column index (negative counts from the end) or a
    header name.  Labels are remapped to ``0..C-1`` in sorted order unless
    ``label_map`` (original labels, in class order) is supplied.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if not rows:
        raise DataError(f"{path}: file is empty")
    header = None
    first = rows[0]
    try:
        [float(c) for c in first]
    except ValueError:
        header = [c.strip() for c in first]
        rows = rows[1:]
    if not rows:
        raise DataError(f"{path}: no data rows")
    width = len(header) if header is not None else len(rows[0])
    if isinstance(label_column, str) and not label_column.lstrip("-").isdigit():
        if header is None or label_column not in header:
            raise DataError(f"{path}: unknown label column {label_column!r}")
        lc = header.index(label_column)
    else:
        lc = int(label_column)
        if not -width <= lc < width:
            raise DataError(f"{path}: label column {lc} out of range for {width} columns")
        lc %= width
    line0 = 2 if header is not None else 1
    feats = np.empty((len(rows), width - 1), dtype=np.float32)
    raw = []
    for r, row in enumerate(rows):
        lineno = line0 + r
        if len(row) != width:
            raise DataError(f"{path}: row {lineno} has {len(row)} columns, expected {width}")
        raw.append(_parse_label(row[lc], lineno, lc))
        j = 0
        for c, cell in enumerate(row):
            if c == lc:
                continue
            try:
                feats[r, j] = float(cell)
            except ValueError:
                raise DataError(f"{path}: row {lineno}, column {c}: {cell!r} is not numeric") from None
            j += 1
    if label_map is None:
        label_map = tuple(sorted(set(raw)))
    lookup = {v: i for i, v in enumerate(label_map)}
    try:
        labels = np.array([lookup[v] for v in raw], dtype=np.int64)
    except KeyError as e:
        raise DataError(f"{path}: label {e.args[0]} not in label map {label_map}") from None
    return Dataset(feats, labels, len(label_map), name or os.path.basename(str(path)), tuple(label_map))


def write_csv(ds: Dataset, path, header: bool = True) -> None:
    """Features then the original label; floats in shortest round-trip form."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        if header:
            w.writerow([f"f{j}" for j in range(ds.num_features)] + ["label"])
        for x, y in zip(ds.features, ds.labels):
            w.writerow([np.format_float_positional(v, unique=True, trim="-") for v in x]
                       + [ds.label_map[y]])


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, ds: Dataset) -> Dataset:
        scale = np.where(self.std > 0, 1.0 / np.where(self.std > 0, self.std, 1.0), 0.0)
        f = ((ds.features.astype(np.float64) - self.mean) * scale).astype(np.float32)
        return Dataset(f, ds.labels, ds.num_classes, ds.name, ds.label_map)


def fit_norm(ds: Dataset) -> NormStats:
    f = ds.features.astype(np.float64)
    return NormStats(f.mean(axis=0), f.std(axis=0))


def normalize(train: Dataset, others=()):
    """Standardise with ``train`` statistics; zero-variance features become 0."""
    stats = fit_norm(train)
    return stats.apply(train), [stats.apply(o) for o in others], stats


@dataclass(frozen=True)
class DriftSpec:
    """Gaussian-blob classification task with a shifted, noisier deployment domain.

    Pre-train samples come from the base blobs.  Fine-tune and test samples
    come from the drifted blobs: every class centre moves by ``drift_shift``
    along a common direction that leans towards class 0, then by a per-class
    offset of ``drift_shift * class_jitter``, and the noise scale is
    multiplied by ``drift_noise``.
    """

    num_classes: int = 3
    feature_dim: int = 256
    n_pretrain: int = 470
    n_finetune: int = 470
    n_test: int = 470
    separation: float = 5.0
    noise: float = 1.0
    drift_shift: float = 12.0
    drift_noise: float = 1.25
    class_jitter: float = 0.25
    seed: int = 0

    def validate(self):
        if self.num_classes < 2:
            raise DataError("need at least 2 classes")
        if self.feature_dim < 1:
            raise DataError("feature_dim must be >= 1")
        for name in ("n_pretrain", "n_finetune", "n_test"):
            if getattr(self, name) < self.num_classes:
                raise DataError(f"{name}={getattr(self, name)} leaves a class with zero samples")
        if self.noise < 0 or self.drift_noise < 0 or self.separation < 0:
            raise DataError("separation and noise parameters must be non-negative")


def _unit(v):
    nrm = np.linalg.norm(v)
    return v / nrm if nrm > 0 else v


def gen_drifted(spec: DriftSpec) -> tuple[Dataset, Dataset, Dataset]:
    spec.validate()
    rng = seeding.stream(spec.seed, seeding.DATA)
    C, D = spec.num_classes, spec.feature_dim
    # centres sit separation / sqrt(2) from the origin on random unit directions
    dirs = np.array([_unit(rng.standard_normal(D)) for _ in range(C)])
    centres = dirs * (spec.separation / np.sqrt(2.0))
    common = _unit(0.5 * _unit(rng.standard_normal(D)) + _unit(centres[0] - centres.mean(axis=0)))
    jitter = np.array([_unit(rng.standard_normal(D)) for _ in range(C)])
    drifted = centres + spec.drift_shift * (common + spec.class_jitter * jitter)

    def draw(n, cs, sigma, name):
        labels = np.arange(n) % C
        rng.shuffle(labels)
        x = cs[labels] + sigma * rng.standard_normal((n, D))
        return Dataset(x.astype(np.float32), labels, C, name)

    pre = draw(spec.n_pretrain, centres, spec.noise, "pretrain")
    ft = draw(spec.n_finetune, drifted, spec.noise * spec.drift_noise, "finetune")
    te = draw(spec.n_test, drifted, spec.noise * spec.drift_noise, "test")
    return pre, ft, te
