"""OOD detection, calibration and feature-separability measures."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

from icla_kit.errors import DataError

PAIR_ENUMERATION_LIMIT = 10**6
NLL_FLOOR = 1e-12
DEFAULT_ECE_BINS = 15


def _finite_scores(s, name):
    s = np.asarray(s, dtype=np.float64).ravel()
    if len(s) == 0:
        raise DataError(f"{name} is empty")
    if not np.all(np.isfinite(s)):
        raise DataError(f"{name} contains non-finite scores")
    return s


def auroc(id_scores, ood_scores) -> float:
    """Probability that an OOD score exceeds an ID score (ties count half).

    OOD is the positive class. Small problems enumerate all pairs; larger
    ones use the Mann-Whitney rank sum.
    """
    a = _finite_scores(id_scores, "id_scores")
    b = _finite_scores(ood_scores, "ood_scores")
    n, m = len(a), len(b)
    if n * m <= PAIR_ENUMERATION_LIMIT:
        diff = b[:, None] - a[None, :]
        wins = np.count_nonzero(diff > 0) + 0.5 * np.count_nonzero(diff == 0)
        return float(wins / (n * m))
    ranks = rankdata(np.concatenate([a, b]))
    u = ranks[n:].sum() - m * (m + 1) / 2.0
    return float(u / (n * m))


def _check_probs(probs, labels):
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels)
    if p.ndim != 2 or len(p) == 0:
        raise DataError("probabilities must be a non-empty (N, C) array")
    if y.shape != (len(p),):
        raise DataError(f"expected {len(p)} labels, got shape {y.shape}")
    if np.any(y < 0) or np.any(y >= p.shape[1]):
        raise DataError("label outside the probability columns")
    return p, y.astype(np.int64)


def ece(probs, labels, n_bins: int = DEFAULT_ECE_BINS) -> float:
    """Expected calibration error over right-closed confidence bins ``((t-1)/T, t/T]``."""
    p, y = _check_probs(probs, labels)
    if n_bins < 1:
        raise DataError("n_bins must be positive")
    conf = p.max(axis=1)
    correct = (p.argmax(axis=1) == y).astype(np.float64)
    bins = np.clip(np.ceil(conf * n_bins).astype(np.int64) - 1, 0, n_bins - 1)
    total = 0.0
    for t in range(n_bins):
        sel = bins == t
        k = np.count_nonzero(sel)
        if k:
            total += k / len(p) * abs(correct[sel].mean() - conf[sel].mean())
    return float(total)


def nll(probs, labels) -> float:
    p, y = _check_probs(probs, labels)
    picked = np.clip(p[np.arange(len(y)), y], NLL_FLOOR, None)
    return float(-np.mean(np.log(picked)))


def brier(probs, labels) -> float:
    p, y = _check_probs(probs, labels)
    onehot = np.zeros_like(p)
    onehot[np.arange(len(y)), y] = 1.0
    return float(np.mean(np.sum((p - onehot) ** 2, axis=1)))


def mccs(features, labels) -> float:
    """Mean cosine similarity over every pair of features from different classes."""
    f = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    if f.ndim != 2 or len(f) != len(y):
        raise DataError("features must be (N, L) with one label per row")
    norms = np.linalg.norm(f, axis=1)
    if np.any(norms == 0):
        raise DataError("zero-norm feature vector")
    u = f / norms[:, None]
    classes = np.unique(y)
    if len(classes) < 2:
        raise DataError("need at least two classes")
    sums = np.array([u[y == c].sum(axis=0) for c in classes])
    counts = np.array([np.count_nonzero(y == c) for c in classes], dtype=np.float64)
    gram = sums @ sums.T
    iu = np.triu_indices(len(classes), k=1)
    pair_sum = gram[iu].sum()
    pair_count = np.outer(counts, counts)[iu].sum()
    return float(np.clip(pair_sum / pair_count, -1.0, 1.0))


def performance_gap(icla_near: float, icla_far: float, llla_near: float, llla_far: float) -> float:
    return ((icla_near - llla_near) + (icla_far - llla_far)) / 2.0


def mean_std(values) -> tuple[float, float]:
    """Mean and sample standard deviation (0 for a single value)."""
    v = np.asarray(values, dtype=np.float64)
    if len(v) == 0:
        return math.nan, math.nan
    return float(v.mean()), float(v.std(ddof=1)) if len(v) > 1 else 0.0


@dataclass
class EvalReport:
    method_name: str
    seed: int
    lam: float | None
    auroc: dict = field(default_factory=dict)  # OOD source name -> AUROC
    ece: float = math.nan
    nll: float = math.nan
    brier: float = math.nan
    accuracy: float = math.nan
    mccs: float = math.nan
    mean_id_entropy: float = math.nan
    mean_ood_entropy: dict = field(default_factory=dict)
    spectrum: dict | None = None
    warnings: list = field(default_factory=list)

    @property
    def near_auroc(self):
        return self.auroc.get("near")

    @property
    def far_auroc(self):
        return self.auroc.get("far")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        d["near_auroc"] = self.near_auroc
        d["far_auroc"] = self.far_auroc
        return d
