"""End-to-end pipelines: train, fit a posterior, score ID and OOD data.

The desk-scale stand-in for the separable / non-separable benchmark pairs
is a blob task. Seven Gaussian classes are drawn around the origin; the
first five are in-distribution and the remaining two are held out as the
"near" OOD source. The "far" source is a wide isotropic Gaussian. A small
amount of label noise on the in-distribution labels keeps validation
residuals non-zero at every separability, so curvature estimates stay
informative for well separated classes as well.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.stats import spearmanr

from icla_kit import curvature as cv
from icla_kit import data, laplace as la, metrics as mt, nn
from icla_kit.errors import ParameterError

METHODS = ("map", "llla-ef", "llla-ggn", "llla-kfac", "icla", "icla-zero")
DEFAULT_GRIDS = {"lambda": [1.0, 3.0, 5.0, 7.0], "fisher-alpha": [0.0, 1e-3, "asam"],
                 "separability": [0.5, 1.0, 2.0, 4.0, 8.0]}
METHOD_CURVATURE = {"llla-ef": "diag_ef", "llla-ggn": "diag_ggn", "llla-kfac": "kfac"}


@dataclass(frozen=True)
class BlobsOodConfig:
    radius: float = 8.0
    sigma: float = 1.0
    dim: int = 8
    n_id_classes: int = 5
    n_near_classes: int = 2
    n_per_class: int = 400
    n_far: int = 400
    far_scale: float = 3.0
    label_noise: float = 0.1
    fractions: tuple = (0.7, 0.15, 0.15)
    hidden: tuple = (32, 32)
    train: nn.TrainConfig = field(default_factory=lambda: nn.TrainConfig(
        epochs=50, batch_size=32, lr_initial=0.05, lr_final=1e-4, momentum=0.9,
        weight_decay=5e-3))

    @property
    def arch(self):
        return [self.dim, *self.hidden, self.n_id_classes]


@dataclass
class OodTask:
    train: data.LabeledDataset
    val: data.LabeledDataset
    test: data.LabeledDataset
    ood_val: dict
    ood_test: dict


def make_blobs_ood(cfg: BlobsOodConfig, seed: int) -> OodTask:
    c_all = cfg.n_id_classes + cfg.n_near_classes
    full = data.gen_blobs(c_all, cfg.n_per_class, cfg.radius, cfg.sigma, cfg.dim, seed)
    is_id = full.labels < cfg.n_id_classes
    labels = data.flip_labels(full.labels[is_id], cfg.n_id_classes, cfg.label_noise, seed)
    id_ds = data.LabeledDataset(full.features[is_id], labels, cfg.n_id_classes, "blobs-id")
    train, val, test = data.split(id_ds, cfg.fractions, seed)
    near = full.features[~is_id]
    rng = np.random.default_rng([seed, 0xFA2])
    far_std = cfg.far_scale * (cfg.sigma + cfg.radius / math.sqrt(cfg.dim))
    far = rng.normal(scale=far_std, size=(2 * cfg.n_far, cfg.dim))
    half_near = len(near) // 2
    return OodTask(train, val, test,
                   {"near": near[:half_near], "far": far[:cfg.n_far]},
                   {"near": near[half_near:], "far": far[cfg.n_far:]})


def fit_method(model: nn.MlpModel, val: data.LabeledDataset, method: str,
               mcfg: la.MarglikConfig = la.MarglikConfig(),
               batch_size: int = cv.DEFAULT_BATCH_SIZE):
    """Posterior for ``method`` (``None`` for MAP) and the marglik record."""
    if method not in METHODS:
        raise ParameterError(f"unknown method {method!r}; choose from {METHODS}")
    if method == "map":
        return None, None
    res = la.MarglikResult(mcfg.lambda_init)
    if method in ("icla", "icla-zero"):
        post = la.icla_fit(model, val, mcfg, zero_variant=method == "icla-zero",
                           batch_size=batch_size, result=res)
        return post, res
    curv = cv.fit(METHOD_CURVATURE[method], model, val, batch_size)
    res = la.marglik_trace(model, curv, val, mcfg)
    return la.build_posterior(nn.last_layer_vector(model), curv, res.lam), res


def scores(model, post, x, score: str = "entropy", probit: bool = True) -> np.ndarray:
    p = la.posterior_proba(model, post, x, probit=probit)
    if score == "entropy":
        return la.entropy_score(p)
    if score == "max-prob":
        return -p.max(axis=1)
    raise ParameterError(f"unknown score {score!r}")


def evaluate(model, post, test: data.LabeledDataset, ood: dict, method: str = "",
             seed: int = 0, score: str = "entropy", probit: bool = True,
             ece_bins: int = mt.DEFAULT_ECE_BINS) -> mt.EvalReport:
    probs = la.posterior_proba(model, post, test.features, probit=probit)
    s_id = scores(model, post, test.features, score, probit)
    rep = mt.EvalReport(method, seed, post.lam if post is not None else None)
    ent_id = la.entropy_score(probs)
    rep.mean_id_entropy = float(np.mean(ent_id))
    for name, x in ood.items():
        s_ood = scores(model, post, x, score, probit)
        rep.auroc[name] = mt.auroc(s_id, s_ood)
        rep.mean_ood_entropy[name] = float(np.mean(la.entropy_score(
            la.posterior_proba(model, post, x, probit=probit))))
    if test.is_classification:
        rep.ece = mt.ece(probs, test.labels, ece_bins)
        rep.nll = mt.nll(probs, test.labels)
        rep.brier = mt.brier(probs, test.labels)
        rep.accuracy = float(np.mean(probs.argmax(axis=1) == test.labels))
        rep.mccs = feature_mccs(model, test)
    return rep


def feature_mccs(model, ds: data.LabeledDataset) -> float:
    """MCCS of penultimate features; all-zero (dead) feature rows are skipped."""
    feats = nn.forward(model, ds.features).penultimate
    keep = np.linalg.norm(feats, axis=1) > 0
    if len(np.unique(ds.labels[keep])) < 2:
        return math.nan
    return mt.mccs(feats[keep], ds.labels[keep])


def mean_auroc(rep: mt.EvalReport) -> float:
    return float(np.mean(list(rep.auroc.values())))


def gap(icla: mt.EvalReport, llla: mt.EvalReport) -> float:
    return mt.performance_gap(icla.auroc["near"], icla.auroc["far"],
                              llla.auroc["near"], llla.auroc["far"])


def run_blobs(cfg: BlobsOodConfig, seed: int, methods=("icla", "llla-ef"),
              mcfg: la.MarglikConfig = la.MarglikConfig()) -> dict:
    """Train once, evaluate each method on the test split."""
    task = make_blobs_ood(cfg, seed)
    model = nn.train_map(task.train, cfg.arch, replace(cfg.train, seed=seed))
    out = {"model": model, "task": task, "reports": {}}
    for method in methods:
        post, res = fit_method(model, task.val, method, mcfg)
        rep = evaluate(model, post, task.test, task.ood_test, method, seed)
        if res is not None:
            rep.warnings.extend(res.warnings)
        out["reports"][method] = rep
    ef = cv.fit_diag_ef(model, task.train)
    out["mean_eigenvalue"] = cv.spectrum(ef).mean_eigenvalue
    return out


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("ICLA_KIT_THREADS", "1")))
    except ValueError:
        return 1


def _pmap(fn, jobs):
    """Ordered map, fanned out to ICLA_KIT_THREADS worker processes."""
    n = _threads()
    if n == 1 or len(jobs) < 2:
        return [fn(*j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n) as ex:
        return list(ex.map(fn, *zip(*jobs)))


def _separability_point(cfg: BlobsOodConfig, seed: int) -> dict:
    r = run_blobs(cfg, seed, ("icla", "llla-ef"))
    icla, llla = r["reports"]["icla"], r["reports"]["llla-ef"]
    return {"mccs": icla.mccs, "gap": gap(icla, llla), "icla_auroc": mean_auroc(icla),
            "llla_auroc": mean_auroc(llla), "mean_eigenvalue": r["mean_eigenvalue"],
            "lambda": icla.lam}


def _lambda_point(cfg: BlobsOodConfig, seed: int, grid) -> dict:
    """ICLA AUROC on the validation OOD split for fixed lambdas and the marglik lambda."""
    task = make_blobs_ood(cfg, seed)
    model = nn.train_map(task.train, cfg.arch, replace(cfg.train, seed=seed))
    zero = cv.CurvatureEstimate.zero(model.n_last_params)
    w = nn.last_layer_vector(model)
    out = {}
    for lam in grid:
        rep = evaluate(model, la.build_posterior(w, zero, lam), task.val, task.ood_val, "icla", seed)
        out[repr(float(lam))] = mean_auroc(rep)
    post, _ = fit_method(model, task.val, "icla")
    out["marglik"] = mean_auroc(evaluate(model, post, task.val, task.ood_val, "icla", seed))
    out["marglik_lambda"] = post.lam
    return out


def _summarise(points: list, keys) -> dict:
    agg = {}
    for k in keys:
        vals = [p[k] for p in points if isinstance(p, dict) and k in p]
        agg[k] = dict(zip(("mean", "std"), mt.mean_std(vals)))
    return agg


def sweep(kind: str, grid, seeds, base: BlobsOodConfig | None = None) -> dict:
    """Run a sweep; rows are in grid order, then seed order.

    ``separability`` varies the blob radius, ``fisher-alpha`` the Fisher
    penalty strength (``"asam"`` as a grid entry trains with ASAM instead)
    and ``lambda`` the fixed ICLA prior precision.
    """
    base = base or BlobsOodConfig()
    seeds = list(seeds)
    grid = list(grid)
    points = []
    if kind == "separability":
        jobs = [(replace(base, radius=float(g)), s) for g in grid for s in seeds]
        results = _pmap(_safe(_separability_point), jobs)
    elif kind == "fisher-alpha":
        jobs = []
        for g in grid:
            if g == "asam":
                tc = replace(base.train, fisher_penalty_alpha=0.0, asam=nn.AsamConfig())
            else:
                tc = replace(base.train, fisher_penalty_alpha=float(g), asam=None)
            jobs += [(replace(base, train=tc), s) for s in seeds]
        results = _pmap(_safe(_separability_point), jobs)
    elif kind == "lambda":
        jobs = [(base, s, tuple(float(g) for g in grid)) for s in seeds]
        per_seed = _pmap(_safe(_lambda_point), jobs)
        return _lambda_summary(grid, seeds, per_seed)
    else:
        raise ParameterError(f"unknown sweep kind {kind!r}")
    i = 0
    rows = []
    for g in grid:
        pts = results[i:i + len(seeds)]
        i += len(seeds)
        errors = [p["error"] for p in pts if "error" in p]
        good = [p for p in pts if "error" not in p]
        rows.append({"point": g, "seeds": seeds, "per_seed": pts,
                     **_summarise(good, ("mccs", "gap", "icla_auroc", "llla_auroc",
                                         "mean_eigenvalue", "lambda")),
                     "errors": errors})
        points.extend(good)
    out = {"kind": kind, "grid": grid, "seeds": seeds, "rows": rows}
    if kind == "separability" and len(rows) > 1:
        mcs = [r["mccs"]["mean"] for r in rows]
        gaps = [r["gap"]["mean"] for r in rows]
        out["spearman_mccs_gap"] = float(spearmanr(mcs, gaps)[0])
    return out


def _lambda_summary(grid, seeds, per_seed) -> dict:
    errors = [p["error"] for p in per_seed if "error" in p]
    good = [p for p in per_seed if "error" not in p]
    rows = []
    for g in grid:
        vals = [p[repr(float(g))] for p in good]
        m, s = mt.mean_std(vals)
        rows.append({"point": g, "auroc": {"mean": m, "std": s}, "per_seed": vals})
    m, s = mt.mean_std([p["marglik"] for p in good])
    return {"kind": "lambda", "grid": grid, "seeds": list(seeds), "rows": rows,
            "marglik": {"auroc": {"mean": m, "std": s},
                        "lambda": dict(zip(("mean", "std"),
                                           mt.mean_std([p["marglik_lambda"] for p in good])))},
            "errors": errors}


class _safe:
    """Record a failed grid point instead of aborting the sweep."""

    def __init__(self, fn):
        self.fn = fn

    def __call__(self, *args):
        try:
            return self.fn(*args)
        except Exception as exc:  # noqa: BLE001 - reported per point
            return {"error": f"{type(exc).__name__}: {exc}"}


def half_moons_demo(seed: int, n: int = 400, noise: float = 0.1, n_outliers: int = 10,
                    outlier_radius: float = 3.0, epochs: int = 200,
                    mcfg: la.MarglikConfig = la.MarglikConfig()) -> dict:
    """Mean outlier entropy of MAP, LLLA (diag EF) and ICLA on half-moons."""
    ds = data.gen_half_moons(n, noise, seed)
    train, val, test = data.split(ds, (0.8, 0.1, 0.1), seed)
    cfg = nn.TrainConfig(epochs=epochs, batch_size=32, lr_initial=0.1, lr_final=1e-4,
                         weight_decay=5e-4, seed=seed)
    model = nn.train_map(train, [2, 20, 20, 2], cfg)
    outliers = data.gen_outliers(n_outliers, outlier_radius, seed)
    out = {"train_accuracy": nn.accuracy(model, train), "test_accuracy": nn.accuracy(model, test)}
    for method in ("map", "llla-ef", "icla"):
        post, _ = fit_method(model, val, method, mcfg)
        ent = la.entropy_score(la.posterior_proba(model, post, outliers))
        out[method] = {"mean_outlier_entropy": float(np.mean(ent)),
                       "mean_test_entropy": float(np.mean(la.entropy_score(
                           la.posterior_proba(model, post, test.features)))),
                       "lambda": post.lam if post is not None else None}
    return out


def config_dict(cfg: BlobsOodConfig) -> dict:
    d = asdict(cfg)
    d["fractions"] = list(cfg.fractions)
    d["hidden"] = list(cfg.hidden)
    return d


def flatness_run(seed: int, alpha: float = 0.0, dim: int = 8, hidden=(32, 32),
                 radius: float = 4.0, epochs: int = 100, weight_decay: float = 5e-4) -> dict:
    """Diag-EF spectrum of a 5-class blob model, measured on its training set."""
    ds = data.gen_blobs(5, 100, radius, 1.0, dim, seed)
    cfg = nn.TrainConfig(epochs=epochs, batch_size=32, lr_initial=0.05, lr_final=1e-4,
                         weight_decay=weight_decay, fisher_penalty_alpha=alpha, seed=seed)
    model = nn.train_map(ds, [dim, *hidden, 5], cfg)
    stats = cv.spectrum(cv.fit_diag_ef(model, ds))
    return {"mean_eigenvalue": stats.mean_eigenvalue, "tail_mass": stats.tail_mass_top1pct,
            "uniform_share": stats.uniform_share, "accuracy": nn.accuracy(model, ds)}
