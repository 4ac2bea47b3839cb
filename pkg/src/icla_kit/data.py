"""Seeded synthetic datasets, splits and CSV round-tripping."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from icla_kit.errors import DataError, ParameterError

# half-moons geometry: class-0 arc is the upper unit semicircle, class 1 is
# the mirrored arc shifted by this offset
MOONS_OFFSET = (1.0, 0.5)
MOONS_CENTROID = (0.5, 0.25)


@dataclass(frozen=True)
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int | None = None  # None means regression
    name: str = field(default="dataset", compare=False)

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        if x.ndim != 2:
            raise DataError(f"features must be a 2-D matrix, got shape {x.shape}")
        if len(x) == 0:
            raise DataError("dataset is empty")
        if not np.all(np.isfinite(x)):
            raise DataError("features contain non-finite values")
        if self.n_classes is None:
            y = np.asarray(self.labels, dtype=np.float64)
            if not np.all(np.isfinite(y)):
                raise DataError("regression targets contain non-finite values")
        else:
            y = np.asarray(self.labels)
            if y.dtype.kind == "f":
                if not np.all(y == np.round(y)):
                    raise DataError("classification labels must be integers")
            y = y.astype(np.int64)
            if y.size and (y.min() < 0 or y.max() >= self.n_classes):
                raise DataError(f"labels must lie in [0, {self.n_classes})")
        if y.shape != (len(x),):
            raise DataError(f"expected {len(x)} labels, got shape {y.shape}")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    def __len__(self):
        return len(self.features)

    @property
    def is_classification(self) -> bool:
        return self.n_classes is not None

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx, name: str | None = None) -> "LabeledDataset":
        return LabeledDataset(self.features[idx], self.labels[idx], self.n_classes,
                              name or self.name)


def gen_half_moons(n: int = 400, noise: float = 0.1, seed: int = 0) -> LabeledDataset:
    if n < 2:
        raise ParameterError("half-moons needs n >= 2")
    if noise < 0:
        raise ParameterError("noise must be non-negative")
    rng = np.random.default_rng(seed)
    n0 = n // 2
    n1 = n - n0
    t0 = np.linspace(0.0, math.pi, n0)
    t1 = np.linspace(0.0, math.pi, n1)
    upper = np.column_stack([np.cos(t0), np.sin(t0)])
    lower = np.column_stack([MOONS_OFFSET[0] - np.cos(t1), MOONS_OFFSET[1] - np.sin(t1)])
    x = np.vstack([upper, lower])
    y = np.concatenate([np.zeros(n0, dtype=np.int64), np.ones(n1, dtype=np.int64)])
    if noise > 0:
        x = x + rng.normal(scale=noise, size=x.shape)
    perm = rng.permutation(n)
    return LabeledDataset(x[perm], y[perm], 2, "half-moons")


def gen_outliers(k: int = 10, radius: float = 3.0, seed: int = 0) -> np.ndarray:
    """Place ``k`` points evenly on a ring around the half-moons centroid.

    The seed only rotates the ring, so the points stay ``radius`` away from
    the centroid for any seed.
    """
    if k < 1:
        raise ParameterError("need at least one outlier")
    if radius <= 0:
        raise ParameterError("radius must be positive")
    phase = np.random.default_rng(seed).uniform(0.0, 2 * math.pi)
    angles = phase + 2 * math.pi * np.arange(k) / k
    return np.column_stack([MOONS_CENTROID[0] + radius * np.cos(angles),
                            MOONS_CENTROID[1] + radius * np.sin(angles)])


def gen_sinusoid(n: int = 200, noise: float = 0.1, x_range=(-4.0, 4.0),
                 seed: int = 0) -> LabeledDataset:
    lo, hi = float(x_range[0]), float(x_range[1])
    if n < 2:
        raise ParameterError("sinusoid needs n >= 2")
    if not hi > lo:
        raise ParameterError(f"degenerate x range [{lo}, {hi}]")
    rng = np.random.default_rng(seed)
    x = rng.uniform(lo, hi, size=n)
    y = np.sin(x)
    if noise > 0:
        y = y + rng.normal(scale=noise, size=n)
    return LabeledDataset(x[:, None], y, None, "sinusoid")


def blob_centers(c: int, radius: float, dim: int, seed: int = 0) -> np.ndarray:
    if dim == 2:
        angles = 2 * math.pi * np.arange(c) / c
        dirs = np.column_stack([np.cos(angles), np.sin(angles)])
    else:
        rng = np.random.default_rng([seed, 0xB10B])
        g = rng.normal(size=(dim, max(c, dim)))
        q, _ = np.linalg.qr(g)
        dirs = q[:, :c].T if c <= dim else g.T / np.linalg.norm(g.T, axis=1, keepdims=True)
        dirs = dirs[:c]
    return radius * dirs


def gen_blobs(c: int = 5, n_per_class: int = 100, radius: float = 4.0, sigma: float = 1.0,
              dim: int = 2, seed: int = 0, label_noise: float = 0.0) -> LabeledDataset:
    """Isotropic Gaussian classes whose means sit ``radius`` from the origin.

    Separability is governed by ``radius / sigma``. Directions are evenly
    spaced on the circle for ``dim == 2`` and orthonormal otherwise (random
    unit vectors when there are more classes than dimensions). With
    ``label_noise`` each label is replaced by a uniformly drawn class with
    that probability; the flips depend on the seed only, not on ``radius``.
    """
    if c < 2:
        raise ParameterError("blobs need at least 2 classes")
    if dim < 2:
        raise ParameterError("blobs need dim >= 2")
    if radius < 0 or sigma <= 0 or n_per_class < 1:
        raise ParameterError("need radius >= 0, sigma > 0, n_per_class >= 1")
    centers = blob_centers(c, radius, dim, seed)
    rng = np.random.default_rng(seed)
    x = np.repeat(centers, n_per_class, axis=0) + rng.normal(scale=sigma, size=(c * n_per_class, dim))
    y = np.repeat(np.arange(c, dtype=np.int64), n_per_class)
    y = flip_labels(y, c, label_noise, seed)
    perm = rng.permutation(len(y))
    return LabeledDataset(x[perm], y[perm], c, "blobs")


def flip_labels(labels: np.ndarray, n_classes: int, p: float, seed: int = 0) -> np.ndarray:
    """Replace each label by a uniform draw over ``n_classes`` with probability ``p``."""
    if not 0 <= p <= 1:
        raise ParameterError("label noise must lie in [0, 1]")
    y = np.array(labels, dtype=np.int64)
    if p == 0:
        return y
    rng = np.random.default_rng([seed, 0xF11B])
    flip = rng.random(len(y)) < p
    y[flip] = rng.integers(0, n_classes, size=int(flip.sum()))
    return y


def _allocate(sizes: np.ndarray, frac: float) -> np.ndarray:
    """Per-group counts near ``frac * size`` whose total is ``round(frac * sum)``.

    Largest-remainder rounding: every group gets the floor, then the groups
    with the largest fractional parts (lowest index first on ties) get one more.
    """
    ideal = frac * sizes
    base = np.floor(ideal + 1e-9).astype(np.int64)
    extra = int(round(frac * sizes.sum())) - int(base.sum())
    order = np.argsort(-(ideal - base), kind="stable")
    base[order[:max(extra, 0)]] += 1
    return np.minimum(base, sizes)


def split(ds: LabeledDataset, fractions=(0.8, 0.1, 0.1), seed: int = 0):
    """Seeded train/val/test split, stratified by class for classification.

    Split sizes are ``round(fraction * N)`` overall and each class is within
    one sample of its proportional share.
    """
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.shape != (3,) or np.any(fr <= 0) or abs(fr.sum() - 1.0) > 1e-9:
        raise ParameterError(f"fractions must be three positive numbers summing to 1, got {fractions}")
    rng = np.random.default_rng(seed)
    if ds.is_classification:
        groups = [np.flatnonzero(ds.labels == k) for k in range(ds.n_classes)]
        groups = [g for g in groups if len(g)]
    else:
        groups = [np.arange(len(ds))]
    sizes = np.array([len(g) for g in groups])
    cut1 = _allocate(sizes, fr[0])
    cut2 = np.maximum(_allocate(sizes, fr[0] + fr[1]), cut1)
    parts = [[], [], []]
    for idx, a, b in zip(groups, cut1, cut2):
        idx = idx[rng.permutation(len(idx))]
        for part, chunk in zip(parts, np.split(idx, [a, b])):
            part.append(chunk)
    out = []
    for name, part in zip(("train", "val", "test"), parts):
        idx = np.sort(np.concatenate(part))
        if len(idx) == 0:
            raise ParameterError(f"{name} split is empty")
        out.append(ds.subset(idx, f"{ds.name}-{name}"))
    return tuple(out)


def save_csv(ds: LabeledDataset, path) -> None:
    path = Path(path)
    header = [f"f{i}" for i in range(ds.dim)] + ["label"]
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row, lab in zip(ds.features, ds.labels):
            label = str(int(lab)) if ds.is_classification else repr(float(lab))
            w.writerow([repr(float(v)) for v in row] + [label])


def load_csv(path, n_classes: int | None = None) -> LabeledDataset:
    """Read a dataset written by :func:`save_csv`.

    Integer labels mean classification; ``n_classes`` defaults to
    ``max(label) + 1``. Float labels mean regression.
    """
    path = Path(path)
    with path.open("r", encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: missing header")
    header = rows[0]
    if len(header) < 2 or header[-1] != "label" or header[:-1] != [f"f{i}" for i in range(len(header) - 1)]:
        raise DataError(f"{path}:1: bad header {header!r}")
    body = rows[1:]
    if not body:
        raise DataError(f"{path}: dataset is empty")
    width = len(header)
    feats, raw_labels = [], []
    for lineno, row in enumerate(body, start=2):
        if len(row) != width:
            raise DataError(f"{path}:{lineno}: expected {width} columns, got {len(row)}")
        try:
            feats.append([float(v) for v in row[:-1]])
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from None
        raw_labels.append(row[-1])
    int_like = [_is_int(s) for s in raw_labels]
    if all(int_like):
        labels = np.array([int(s) for s in raw_labels], dtype=np.int64)
        if labels.min() < 0:
            raise DataError(f"{path}: classification labels must be non-negative")
        k = n_classes if n_classes is not None else int(labels.max()) + 1
        return LabeledDataset(np.array(feats), labels, k, path.stem)
    if any(int_like):
        raise DataError(f"{path}: mixed integer and real labels")
    try:
        labels = np.array([float(s) for s in raw_labels])
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None
    return LabeledDataset(np.array(feats), labels, None, path.stem)


def load_features_csv(path) -> np.ndarray:
    """Features of a CSV file, tolerating an absent or empty label column."""
    path = Path(path)
    with path.open("r", encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise DataError(f"{path}: no rows")
    header = rows[0]
    n_feat = sum(1 for h in header if h.startswith("f"))
    try:
        return np.array([[float(v) for v in r[:n_feat]] for r in rows[1:]])
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None


def _is_int(s: str) -> bool:
    s = s.strip()
    return s.isdigit() or (s.startswith("-") and s[1:].isdigit())
