"""Last-layer curvature estimates and their spectra.

Every fitter walks the dataset in contiguous batches of ``batch_size``,
sums the per-sample contributions within each batch and returns the mean
of those batch sums. For K-FAC the two factors are plain sample means.

Parameter order is the last-layer order of :mod:`icla_kit.nn`: ``C*L``
weights (row-major by class) followed by ``C`` biases. K-FAC factors are
stored as ``A`` (``(L+1) x (L+1)``, input second moment with a trailing
bias coordinate) and ``B`` (``C x C``, output-gradient second moment);
:func:`kron_expand` maps them into that order.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from icla_kit import nn
from icla_kit.errors import DataError, NumericError, ShapeError, UnsupportedKindError

KINDS = ("diag_ef", "diag_ggn", "kfac", "full_ef", "zero")
DEFAULT_BATCH_SIZE = 32
MAX_FULL_DIM = 4096


@dataclass(frozen=True)
class CurvatureEstimate:
    kind: str
    d: int
    diag: np.ndarray | None = None
    A: np.ndarray | None = None
    B: np.ndarray | None = None
    matrix: np.ndarray | None = None
    n_samples: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise UnsupportedKindError(f"unknown curvature kind {self.kind!r}")
        if self.kind in ("diag_ef", "diag_ggn"):
            if self.diag is None or self.diag.shape != (self.d,):
                raise ShapeError(f"{self.kind} needs a diagonal of length {self.d}")
        elif self.kind == "kfac":
            if self.A is None or self.B is None:
                raise ShapeError("kfac needs both factors")
            if self.A.shape[0] * self.B.shape[0] != self.d:
                raise ShapeError(f"factor sizes {self.A.shape}, {self.B.shape} do not give d={self.d}")
        elif self.kind == "full_ef":
            if self.matrix is None or self.matrix.shape != (self.d, self.d):
                raise ShapeError(f"full_ef needs a {self.d}x{self.d} matrix")

    @classmethod
    def zero(cls, d: int) -> "CurvatureEstimate":
        return cls("zero", d)

    def eigenvalues(self) -> np.ndarray:
        """All ``d`` eigenvalues, unsorted for diagonal kinds."""
        if self.kind == "zero":
            return np.zeros(self.d)
        if self.kind in ("diag_ef", "diag_ggn"):
            return self.diag.copy()
        if self.kind == "kfac":
            ea = np.linalg.eigvalsh(self.A)
            eb = np.linalg.eigvalsh(self.B)
            return np.outer(ea, eb).ravel()
        return np.linalg.eigvalsh(self.matrix)

    def dense(self) -> np.ndarray:
        if self.kind == "zero":
            return np.zeros((self.d, self.d))
        if self.kind in ("diag_ef", "diag_ggn"):
            return np.diag(self.diag)
        if self.kind == "kfac":
            return kron_expand(self.A, self.B)
        return self.matrix.copy()


@dataclass(frozen=True)
class SpectrumStats:
    eigenvalues: np.ndarray
    mean_eigenvalue: float
    tail_mass_top1pct: float

    @property
    def top_count(self) -> int:
        return top_count(len(self.eigenvalues))

    @property
    def uniform_share(self) -> float:
        return self.top_count / len(self.eigenvalues)


def top_count(d: int) -> int:
    return max(1, math.ceil(0.01 * d))


def _batches(n: int, batch_size: int):
    if batch_size < 1:
        raise DataError("batch_size must be positive")
    return [(s, min(s + batch_size, n)) for s in range(0, n, batch_size)]


def _last_layer_terms(model: nn.MlpModel, dataset):
    x, y = nn._check_targets(model, dataset.features, dataset.labels)
    cache = nn._forward_cache(model, x)
    return cache.acts[-2], cache.acts[-1], y


def _require_data(dataset):
    if dataset is None or len(dataset) == 0:
        raise DataError("dataset is empty")


def fit_diag_ef(model: nn.MlpModel, dataset, batch_size: int = DEFAULT_BATCH_SIZE) -> CurvatureEstimate:
    _require_data(dataset)
    g = nn.per_sample_loglik_grads(model, dataset.features, dataset.labels)
    sq = g * g
    parts = [sq[a:b].sum(axis=0) for a, b in _batches(len(g), batch_size)]
    diag = np.sum(parts, axis=0) / len(parts)
    return CurvatureEstimate("diag_ef", g.shape[1], diag=diag, n_samples=len(g))


def fit_diag_ggn(model: nn.MlpModel, dataset, batch_size: int = DEFAULT_BATCH_SIZE) -> CurvatureEstimate:
    """Diagonal of ``J^T (diag(p) - p p^T) J`` for the softmax likelihood."""
    _require_data(dataset)
    if not model.is_classification:
        raise UnsupportedKindError("diag_ggn is only implemented for classification")
    feats, logits, _ = _last_layer_terms(model, dataset)
    p = nn.softmax(logits)
    lam_diag = p * (1.0 - p)  # diagonal of the softmax Hessian block
    n = len(feats)
    per = np.concatenate([(lam_diag[:, :, None] * (feats * feats)[:, None, :]).reshape(n, -1),
                          lam_diag], axis=1)
    parts = [per[a:b].sum(axis=0) for a, b in _batches(n, batch_size)]
    diag = np.sum(parts, axis=0) / len(parts)
    return CurvatureEstimate("diag_ggn", per.shape[1], diag=diag, n_samples=n)


def fit_kfac_last_layer(model: nn.MlpModel, dataset) -> CurvatureEstimate:
    _require_data(dataset)
    feats, logits, y = _last_layer_terms(model, dataset)
    n = len(feats)
    h = np.hstack([feats, np.ones((n, 1))])
    g = -nn._output_residual(model, logits, y)
    A = h.T @ h / n
    B = g.T @ g / n
    A = 0.5 * (A + A.T)
    B = 0.5 * (B + B.T)
    return CurvatureEstimate("kfac", A.shape[0] * B.shape[0], A=A, B=B, n_samples=n)


def fit_full_ef_last_layer(model: nn.MlpModel, dataset,
                           batch_size: int = DEFAULT_BATCH_SIZE) -> CurvatureEstimate:
    """Dense empirical Fisher of the last layer; a small-scale oracle."""
    _require_data(dataset)
    d = model.n_last_params
    if d > MAX_FULL_DIM:
        raise ShapeError(f"full empirical Fisher limited to d <= {MAX_FULL_DIM}, got {d}")
    g = nn.per_sample_loglik_grads(model, dataset.features, dataset.labels)
    parts = [g[a:b].T @ g[a:b] for a, b in _batches(len(g), batch_size)]
    F = np.sum(parts, axis=0) / len(parts)
    F = 0.5 * (F + F.T)
    return CurvatureEstimate("full_ef", d, matrix=F, n_samples=len(g))


def kron_permutation(m: int, n: int) -> np.ndarray:
    """Index map from class-major ``B (x) A`` order to last-layer order.

    ``A`` is ``m x m`` with its final coordinate the bias; ``B`` is ``n x n``.
    """
    L = m - 1
    perm = np.empty(m * n, dtype=np.int64)
    for c in range(n):
        for l in range(L):
            perm[c * L + l] = c * m + l
        perm[n * L + c] = c * m + L
    return perm


def kron_expand(A, B) -> np.ndarray:
    """Dense ``A (x) B`` laid out in last-layer parameter order."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1] or B.ndim != 2 or B.shape[0] != B.shape[1]:
        raise ShapeError(f"kron_expand needs square factors, got {A.shape} and {B.shape}")
    perm = kron_permutation(A.shape[0], B.shape[0])
    K = np.kron(B, A)
    return K[np.ix_(perm, perm)]


def spectrum(curv: CurvatureEstimate) -> SpectrumStats:
    ev = curv.eigenvalues()
    if not np.all(np.isfinite(ev)):
        raise NumericError("curvature has non-finite entries")
    ev = np.sort(np.clip(ev, 0.0, None))[::-1]
    trace = float(ev.sum())
    k = top_count(len(ev))
    tail = float(ev[:k].sum() / trace) if trace > 0 else 0.0
    return SpectrumStats(ev, trace / len(ev), min(tail, 1.0))


def write_spectrum_csv(stats: SpectrumStats, path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "eigenvalue"])
        for i, v in enumerate(stats.eigenvalues):
            w.writerow([i, repr(float(v))])


FITTERS = {
    "diag_ef": fit_diag_ef,
    "diag_ggn": fit_diag_ggn,
    "kfac": lambda model, ds, batch_size=DEFAULT_BATCH_SIZE: fit_kfac_last_layer(model, ds),
    "full_ef": fit_full_ef_last_layer,
}


def fit(kind: str, model: nn.MlpModel, dataset, batch_size: int = DEFAULT_BATCH_SIZE) -> CurvatureEstimate:
    if kind == "zero":
        return CurvatureEstimate.zero(model.n_last_params)
    if kind not in FITTERS:
        raise UnsupportedKindError(f"unknown curvature kind {kind!r}")
    return FITTERS[kind](model, dataset, batch_size)
