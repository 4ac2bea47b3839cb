"""Last-layer Laplace posteriors, prior-precision selection and predictives.

The posterior precision is ``H + lam * I`` over the flattened last layer.
With zero curvature it is ``lam * I`` (identity curvature, ICLA).
Predictive covariances are taken in logit space, ``J P^-1 J^T`` with
``J = [I_C (x) nu^T | I_C]`` the ``C x d`` Jacobian of the logits.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from icla_kit import curvature as cv
from icla_kit import nn
from icla_kit.errors import NumericError, ParameterError, ShapeError, UnsupportedKindError

log = logging.getLogger(__name__)

LAMBDA_FLOOR_SQ = 1e-8
DEFAULT_SIGMA_OBS = 0.1


@dataclass(frozen=True)
class PosteriorSpec:
    w_map: np.ndarray
    curvature: cv.CurvatureEstimate
    lam: float

    def __post_init__(self):
        w = np.asarray(self.w_map, dtype=np.float64)
        if w.ndim != 1 or len(w) != self.curvature.d:
            raise ShapeError(f"w_map length {w.shape} does not match curvature d={self.curvature.d}")
        if not (self.lam > 0 and math.isfinite(self.lam)):
            raise ParameterError(f"prior precision must be positive, got {self.lam}")
        object.__setattr__(self, "w_map", w)
        object.__setattr__(self, "lam", float(self.lam))

    @property
    def d(self) -> int:
        return len(self.w_map)

    @property
    def is_identity(self) -> bool:
        return self.curvature.kind == "zero"

    def precision(self) -> np.ndarray:
        return self.curvature.dense() + self.lam * np.eye(self.d)


@dataclass(frozen=True)
class PredictiveDistribution:
    mean: np.ndarray  # (C,) or (N, C)
    covariance: np.ndarray  # (C, C) or (N, C, C); regression keeps C = 1


@dataclass(frozen=True)
class MarglikConfig:
    """Prior-precision search settings.

    ``optimizer="adam"`` runs Adam on ``log lam`` with step halving on any
    evidence decrease; ``"sgd"`` is plain gradient ascent on ``lam**2``
    with step ``lr``.
    """

    lr: float = 0.1
    steps: int = 100
    lambda_init: float = 1.0
    optimizer: str = "adam"

    def __post_init__(self):
        if self.lr < 0 or self.steps < 1 or self.lambda_init <= 0:
            raise ParameterError("marglik needs lr >= 0, steps >= 1, lambda_init > 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ParameterError(f"unknown marglik optimizer {self.optimizer!r}")


@dataclass
class MarglikResult:
    lam: float
    lambdas: list = field(default_factory=list)
    evidences: list = field(default_factory=list)
    warnings: list = field(default_factory=list)


def build_posterior(w_map, curv: cv.CurvatureEstimate, lam: float) -> PosteriorSpec:
    return PosteriorSpec(np.asarray(w_map, dtype=np.float64), curv, lam)


class Evidence:
    """Laplace log evidence of the last layer as a function of ``lam``.

    ``log p(D|theta) - lam/2 ||w||^2 + d/2 log lam - 1/2 log det(H + lam I)``
    with additive constants dropped. For zero curvature the Occam term
    cancels the prior normaliser exactly and the objective would push
    ``lam`` to 0, so it is dropped there: the objective becomes the prior
    log density of ``w``, maximised at ``lam = d / ||w||^2``.
    """

    def __init__(self, model: nn.MlpModel, curv: cv.CurvatureEstimate, dataset):
        w = nn.last_layer_vector(model)
        if len(w) != curv.d:
            raise ShapeError(f"curvature d={curv.d} does not match model last layer {len(w)}")
        self.d = len(w)
        self.w_sq = float(w @ w)
        self.occam = curv.kind != "zero"
        self.eig = np.clip(curv.eigenvalues(), 0.0, None)
        x, y = nn._check_targets(model, dataset.features, dataset.labels)
        logits = nn._forward_cache(model, x).acts[-1]
        self.loglik = -float(nn._data_loss(model, logits, y).sum())

    def value(self, lam: float) -> float:
        v = self.loglik - 0.5 * lam * self.w_sq + 0.5 * self.d * math.log(lam)
        if self.occam:
            v -= 0.5 * float(np.sum(np.log(self.eig + lam)))
        return v

    def grad(self, lam: float) -> float:
        """Derivative with respect to ``lam``."""
        g = -0.5 * self.w_sq + 0.5 * self.d / lam
        if self.occam:
            g -= 0.5 * float(np.sum(1.0 / (self.eig + lam)))
        return g

    def grad_sq(self, lam: float) -> float:
        """Derivative with respect to ``lam**2``."""
        return self.grad(lam) / (2.0 * lam)


def marglik_trace(model: nn.MlpModel, curv: cv.CurvatureEstimate, dataset,
                  cfg: MarglikConfig = MarglikConfig()) -> MarglikResult:
    """Maximise the evidence over ``lam`` for ``cfg.steps`` steps, recording the path."""
    ev = Evidence(model, curv, dataset)
    lam = cfg.lambda_init
    res = MarglikResult(lam, [lam], [ev.value(lam)])
    if cfg.optimizer == "sgd":
        lam_sq = lam * lam
        for t in range(cfg.steps):
            lam_sq = lam_sq + cfg.lr * ev.grad_sq(math.sqrt(lam_sq))
            if not lam_sq > 0:
                msg = f"step {t}: lambda^2 became {lam_sq:.3g}, clamped to {LAMBDA_FLOOR_SQ}"
                log.warning(msg)
                res.warnings.append(msg)
                lam_sq = LAMBDA_FLOOR_SQ
            lam = math.sqrt(lam_sq)
            res.lambdas.append(lam)
            res.evidences.append(ev.value(lam))
    else:
        # Adam on log lam. A step that would lower the evidence is rejected,
        # the step size is halved and the moment estimates restart, so the
        # recorded trajectory never decreases.
        b1, b2, eps = 0.9, 0.999, 1e-8
        lr, m, v, t = cfg.lr, 0.0, 0.0, 0
        current = res.evidences[0]
        for _ in range(cfg.steps):
            t += 1
            g = lam * ev.grad(lam)  # d evidence / d log lam
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            step = lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
            proposal = lam * math.exp(step)
            value = ev.value(proposal)
            if value >= current:
                lam, current = proposal, value
            else:
                lr, m, v, t = 0.5 * lr, 0.0, 0.0, 0
            res.lambdas.append(lam)
            res.evidences.append(current)
    res.lam = lam
    return res


def marglik_optimize(model: nn.MlpModel, curv: cv.CurvatureEstimate, dataset,
                     cfg: MarglikConfig = MarglikConfig()) -> float:
    return marglik_trace(model, curv, dataset, cfg).lam


def icla_fit(model: nn.MlpModel, val_dataset, cfg: MarglikConfig = MarglikConfig(),
             zero_variant: bool = False, batch_size: int = cv.DEFAULT_BATCH_SIZE,
             result: MarglikResult | None = None) -> PosteriorSpec:
    """Identity-curvature posterior with marginal-likelihood ``lam``.

    The diagonal empirical Fisher is fitted on ``val_dataset`` (skipped for
    the zero variant) and only used while choosing ``lam``; the returned
    posterior has precision ``lam * I``.
    """
    d = model.n_last_params
    H = cv.CurvatureEstimate.zero(d)
    if not zero_variant:
        H = cv.fit_diag_ef(model, val_dataset, batch_size)
    trace = marglik_trace(model, H, val_dataset, cfg)
    if result is not None:
        result.__dict__.update(trace.__dict__)
    return build_posterior(nn.last_layer_vector(model), cv.CurvatureEstimate.zero(d), trace.lam)


def _jacobian_cov(post: PosteriorSpec, feats: np.ndarray, n_out: int) -> np.ndarray:
    """``J P^-1 J^T`` for each row of ``feats``; shape (N, C, C)."""
    n, L = feats.shape
    if n_out * (L + 1) != post.d:
        raise ShapeError(f"features of width {L} do not match posterior d={post.d}")
    lam = post.lam
    curv = post.curvature
    eye = np.eye(n_out)
    if curv.kind == "zero":
        s = (np.sum(feats * feats, axis=1) + 1.0) / lam
        return s[:, None, None] * eye
    if curv.kind in ("diag_ef", "diag_ggn"):
        prec = curv.diag + lam
        w_prec = prec[: n_out * L].reshape(n_out, L)
        b_prec = prec[n_out * L:]
        var = (feats * feats) @ (1.0 / w_prec).T + 1.0 / b_prec
        return var[:, :, None] * eye
    if curv.kind == "kfac":
        sa, Ua = np.linalg.eigh(curv.A)
        sb, Ub = np.linalg.eigh(curv.B)
        h = np.hstack([feats, np.ones((n, 1))])
        a2 = (h @ Ua) ** 2
        m = a2 @ (1.0 / (np.outer(sa, sb) + lam))  # (N, C)
        return np.einsum("ci,ni,ki->nck", Ub, m, Ub)
    if curv.kind == "full_ef":
        P = post.precision()
        h = np.hstack([feats, np.ones((n, 1))])
        perm = cv.kron_permutation(L + 1, n_out)
        inv = np.linalg.inv(P)
        # reorder to class-major blocks where J = I_C (x) h^T
        inv_k = np.empty_like(inv)
        inv_k[np.ix_(perm, perm)] = inv
        blocks = inv_k.reshape(n_out, L + 1, n_out, L + 1)
        return np.einsum("nl,clkm,nm->nck", h, blocks, h)
    raise UnsupportedKindError(f"no predictive for curvature kind {curv.kind!r}")


def predictive(model: nn.MlpModel, post: PosteriorSpec, x) -> PredictiveDistribution:
    """Linearized Gaussian over the logits for one input or a batch."""
    single = np.asarray(x).ndim == 1
    out = nn.forward(model, np.atleast_2d(np.asarray(x, dtype=np.float64)))
    if not np.array_equal(nn.last_layer_vector(model), post.w_map):
        raise ShapeError("posterior mean does not match the model's last layer")
    cov = _jacobian_cov(post, out.penultimate, model.n_outputs)
    cov = 0.5 * (cov + np.swapaxes(cov, 1, 2))
    if single:
        return PredictiveDistribution(out.logits[0], cov[0])
    return PredictiveDistribution(out.logits, cov)


def regression_predictive(model: nn.MlpModel, post: PosteriorSpec, x,
                          sigma_obs: float = DEFAULT_SIGMA_OBS) -> PredictiveDistribution:
    if model.is_classification:
        raise UnsupportedKindError("regression_predictive needs a regression model")
    dist = predictive(model, post, x)
    return PredictiveDistribution(dist.mean[..., 0], dist.covariance[..., 0, 0] + sigma_obs ** 2)


def predict_proba(dist: PredictiveDistribution) -> np.ndarray:
    """Probit-adjusted softmax ``softmax(mu_c / sqrt(1 + pi/8 * var_c))``."""
    mean = np.asarray(dist.mean, dtype=np.float64)
    var = np.diagonal(np.asarray(dist.covariance, dtype=np.float64), axis1=-2, axis2=-1)
    if np.any(var < -1e-9):
        raise NumericError(f"negative predictive variance {var.min():.3g}")
    var = np.clip(var, 0.0, None)
    return nn.softmax(mean / np.sqrt(1.0 + (math.pi / 8.0) * var))


def entropy_score(p) -> np.ndarray | float:
    """Shannon entropy in nats along the last axis, ``0 log 0 = 0``."""
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0):
        raise ParameterError("probabilities must be non-negative")
    if np.any(np.abs(p.sum(axis=-1) - 1.0) > 1e-9):
        raise ParameterError("probabilities must sum to 1")
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log(p), 0.0)
    h = terms.sum(axis=-1)
    return float(h) if h.ndim == 0 else h


def map_proba(model: nn.MlpModel, x) -> np.ndarray:
    return nn.softmax(nn.forward(model, np.atleast_2d(x)).logits)


def posterior_proba(model: nn.MlpModel, post: PosteriorSpec | None, x, probit: bool = True):
    """Class probabilities for a batch; ``post=None`` means the MAP softmax."""
    if post is None or not probit:
        return map_proba(model, x)
    return predict_proba(predictive(model, post, np.atleast_2d(x)))
