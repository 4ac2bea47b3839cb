"""``icla-kit`` command line.

Exit codes: 0 success, 2 I/O or unreadable input, 3 training divergence
(or every sweep point failed), 4 configuration or shape mismatch.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from icla_kit import curvature as cv
from icla_kit import data, experiments as ex, files, laplace as la, metrics as mt, nn
from icla_kit.errors import DataError, IclaError, NumericError, ParameterError, ShapeError, TrainingDiverged

EXIT_OK, EXIT_IO, EXIT_DIVERGED, EXIT_CONFIG = 0, 2, 3, 4


def _ints(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _grid(text: str) -> list:
    out = []
    for t in (t.strip() for t in text.split(",")):
        if not t:
            continue
        try:
            out.append(float(t))
        except ValueError:
            out.append(t)
    return out


def _save_points_csv(x: np.ndarray, path) -> None:
    """Unlabelled points (OOD sources, outliers) with an empty label column."""
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"f{i}" for i in range(x.shape[1])] + ["label"])
        for row in x:
            w.writerow([repr(float(v)) for v in row] + [""])


def _load_for_model(path, model: nn.MlpModel) -> data.LabeledDataset:
    """Load a labelled CSV and check it against the model's input and output sizes."""
    ds = data.load_csv(path)
    if ds.dim != model.input_dim:
        raise ShapeError(f"{path}: {ds.dim} features, model expects {model.input_dim}")
    if ds.is_classification != model.is_classification:
        raise ShapeError(f"{path}: data and model disagree on classification vs regression")
    if ds.is_classification:
        if ds.n_classes > model.n_classes:
            raise ShapeError(f"{path}: label {ds.n_classes - 1} outside the model's "
                             f"{model.n_classes} classes")
        ds = data.LabeledDataset(ds.features, ds.labels, model.n_classes, ds.name)
    return ds


# -- gen-data -----------------------------------------------------------------

def cmd_gen_data(args) -> int:
    kind = args.kind
    if kind == "half-moons":
        ds = data.gen_half_moons(args.n, args.noise, args.seed)
    elif kind == "sinusoid":
        ds = data.gen_sinusoid(args.n, args.noise, (args.x_min, args.x_max), args.seed)
    elif kind == "blobs":
        ds = data.gen_blobs(args.classes, args.n_per_class, args.radius, args.sigma, args.dim,
                            args.seed, args.label_noise)
    elif kind == "outliers":
        pts = data.gen_outliers(args.k, args.outlier_radius, args.seed)
        _save_points_csv(pts, args.output)
        print(f"{args.output}: {len(pts)} rows")
        return EXIT_OK
    else:  # blobs-ood: a directory of splits and OOD sources
        cfg = ex.BlobsOodConfig(radius=args.radius, sigma=args.sigma, dim=args.dim,
                                n_per_class=args.n_per_class, label_noise=args.label_noise)
        task = ex.make_blobs_ood(cfg, args.seed)
        out = Path(args.output)
        out.mkdir(parents=True, exist_ok=True)
        for name, ds in (("train", task.train), ("val", task.val), ("test", task.test)):
            data.save_csv(ds, out / f"{name}.csv")
            print(f"{out / f'{name}.csv'}: {len(ds)} rows")
        for split, sources in (("val", task.ood_val), ("test", task.ood_test)):
            for src, x in sources.items():
                p = out / f"{src}_{split}.csv"
                _save_points_csv(x, p)
                print(f"{p}: {len(x)} rows")
        return EXIT_OK
    data.save_csv(ds, args.output)
    print(f"{args.output}: {len(ds)} rows")
    return EXIT_OK


# -- train --------------------------------------------------------------------

def _train_config(args) -> nn.TrainConfig:
    asam = nn.AsamConfig(args.asam_rho, args.asam_eta) if args.asam else None
    return nn.TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr_initial=args.lr,
                          lr_final=args.lr_final, momentum=args.momentum,
                          weight_decay=args.weight_decay,
                          fisher_penalty_alpha=args.fisher_penalty_alpha, asam=asam, seed=args.seed)


def cmd_train(args) -> int:
    ds = data.load_csv(args.data, args.classes)
    out_dim = ds.n_classes if ds.is_classification else 1
    arch = [ds.dim, *args.hidden, out_dim]
    cfg = _train_config(args)
    model = nn.train_map(ds, arch, cfg)
    loss, _ = nn.loss_and_grad(model, ds.features, ds.labels)
    summary = {"final_train_loss": loss}
    if ds.is_classification:
        summary["train_accuracy"] = nn.accuracy(model, ds)
        summary["mean_fisher_eigenvalue"] = cv.spectrum(cv.fit_diag_ef(model, ds)).mean_eigenvalue
    training = {"epochs": cfg.epochs, "batch_size": cfg.batch_size, "lr_initial": cfg.lr_initial,
                "lr_final": cfg.lr_final, "momentum": cfg.momentum,
                "weight_decay": cfg.weight_decay, "fisher_penalty_alpha": cfg.fisher_penalty_alpha,
                "asam": None if cfg.asam is None else {"rho": cfg.asam.rho, "eta": cfg.asam.eta},
                "seed": cfg.seed, **summary}
    files.save_model(model, args.output, training)
    print(json.dumps(files._plain(summary), sort_keys=True))
    return EXIT_OK


# -- fit ----------------------------------------------------------------------

def _marglik_config(args) -> la.MarglikConfig:
    return la.MarglikConfig(lr=args.marglik_lr, steps=args.marglik_steps,
                            lambda_init=args.lambda_init, optimizer=args.marglik_optimizer)


def cmd_fit(args) -> int:
    model = files.load_model(args.model)
    val = _load_for_model(args.val, model)
    post, res = ex.fit_method(model, val, args.method, _marglik_config(args), args.batch_size)
    if post is None:
        raise ParameterError("method 'map' has no posterior to fit")
    files.save_posterior(post, args.output, args.method, res)
    ev = res.evidences
    print(json.dumps(files._plain({
        "method": args.method, "lambda": post.lam, "curvature": post.curvature.kind,
        "evidence_initial": ev[0] if ev else None, "evidence_final": ev[-1] if ev else None,
        "steps": len(res.lambdas), "warnings": res.warnings}), sort_keys=True))
    return EXIT_OK


# -- eval-ood -----------------------------------------------------------------

def _ood_sources(specs) -> list[tuple[str, str]]:
    out = []
    for spec in specs:
        name, sep, path = spec.partition("=")
        if not sep:
            name, path = Path(spec).stem, spec
        out.append((name, path))
    names = [n for n, _ in out]
    if len(set(names)) != len(names):
        raise ParameterError(f"duplicate OOD source names {names}")
    return out


def _report_from_scores(path, method: str, seed: int) -> mt.EvalReport:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    try:
        id_scores, ood = doc["id"], doc["ood"]
    except (KeyError, TypeError):
        raise DataError(f"{path}: expected keys 'id' and 'ood'") from None
    if not isinstance(ood, dict):
        ood = {"ood": ood}
    rep = mt.EvalReport(method, seed, None)
    for name, s in ood.items():
        rep.auroc[name] = mt.auroc(id_scores, s)
    return rep


def cmd_eval_ood(args) -> int:
    if args.scores_from:
        rep = _report_from_scores(args.scores_from, args.method or "scores", args.seed)
    else:
        if not (args.model and args.id and args.ood):
            raise ParameterError("eval-ood needs --model, --id and at least one --ood (or --scores-from)")
        model = files.load_model(args.model)
        if not model.is_classification:
            raise ParameterError("eval-ood scores classifiers only")
        post, method = None, "map"
        if args.posterior:
            post, method = files.load_posterior(args.posterior)
        test = _load_for_model(args.id, model)
        ood = {}
        for name, path in _ood_sources(args.ood):
            x = data.load_features_csv(path)
            if x.ndim != 2 or x.shape[1] != model.input_dim:
                raise ShapeError(f"{path}: {x.shape[-1]} features, model expects {model.input_dim}")
            ood[name] = x
        rep = ex.evaluate(model, post, test, ood, args.method or method, args.seed,
                          score=args.score, probit=not args.no_probit, ece_bins=args.ece_bins)
        if args.spectrum and post is not None and post.curvature.kind != "zero":
            stats = cv.spectrum(post.curvature)
            rep.spectrum = {"mean_eigenvalue": stats.mean_eigenvalue,
                            "tail_mass_top1pct": stats.tail_mass_top1pct}
    files.dump_json(files.report_doc(rep), args.output)
    print(json.dumps(files._plain({"auroc": rep.auroc, "ece": rep.ece, "accuracy": rep.accuracy}),
                     sort_keys=True))
    return EXIT_OK


# -- sweep --------------------------------------------------------------------

TREND_KEYS = ("mccs", "gap", "icla_auroc", "llla_auroc", "mean_eigenvalue", "lambda")


def _write_trend_csv(result: dict, path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if result["kind"] == "lambda":
            w.writerow(["point", "auroc_mean", "auroc_std"])
            for r in result["rows"]:
                w.writerow([r["point"], repr(r["auroc"]["mean"]), repr(r["auroc"]["std"])])
            m = result["marglik"]
            w.writerow(["marglik", repr(m["auroc"]["mean"]), repr(m["auroc"]["std"])])
            return
        cols = [f"{k}_{s}" for k in TREND_KEYS for s in ("mean", "std")]
        w.writerow(["point", *cols, "n_errors"])
        for r in result["rows"]:
            w.writerow([r["point"], *(repr(float(r[k][s])) for k in TREND_KEYS for s in ("mean", "std")),
                        len(r["errors"])])


def cmd_sweep(args) -> int:
    base = ex.BlobsOodConfig(radius=args.radius, dim=args.dim, n_per_class=args.n_per_class)
    base = replace(base, train=replace(base.train, epochs=args.epochs))
    grid = args.grid if args.grid is not None else ex.DEFAULT_GRIDS[args.kind]
    result = ex.sweep(args.kind, grid, args.seeds, base)
    result["config"] = ex.config_dict(base)
    files.dump_json({"schema_version": files.SCHEMA_VERSION, "type": "sweep", **result}, args.output)
    if args.csv:
        _write_trend_csv(result, args.csv)
    n_points = len(grid) * len(args.seeds) if args.kind != "lambda" else len(args.seeds)
    errors = [e for r in result.get("rows", []) for e in r.get("errors", [])] + result.get("errors", [])
    for e in errors:
        print(f"warning: {e}", file=sys.stderr)
    print(f"{args.output}: {len(grid)} grid points x {len(args.seeds)} seeds, {len(errors)} failed")
    return EXIT_DIVERGED if errors and len(errors) >= n_points else EXIT_OK


# -- analyze ------------------------------------------------------------------

def cmd_analyze(args) -> int:
    model = files.load_model(args.model)
    ds = _load_for_model(args.data, model)
    stats = cv.spectrum(cv.fit_diag_ef(model, ds, args.batch_size))
    cv.write_spectrum_csv(stats, args.output)
    summary = {"d": len(stats.eigenvalues), "mean_eigenvalue": stats.mean_eigenvalue,
               "tail_mass_top1pct": stats.tail_mass_top1pct, "top_count": stats.top_count,
               "uniform_share": stats.uniform_share}
    if args.summary:
        files.dump_json({"schema_version": files.SCHEMA_VERSION, "type": "spectrum_summary",
                         **summary}, args.summary)
    print(json.dumps(files._plain(summary), sort_keys=True))
    return EXIT_OK


# -- parser -------------------------------------------------------------------

def _add_marglik_flags(p):
    p.add_argument("--marglik-lr", type=float, default=0.1)
    p.add_argument("--marglik-steps", type=int, default=100)
    p.add_argument("--lambda-init", type=float, default=1.0)
    p.add_argument("--marglik-optimizer", choices=("adam", "sgd"), default="adam")
    p.add_argument("--batch-size", type=int, default=cv.DEFAULT_BATCH_SIZE)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="icla-kit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic dataset as CSV")
    g.add_argument("kind", choices=("half-moons", "outliers", "sinusoid", "blobs", "blobs-ood"))
    g.add_argument("-o", "--output", required=True, help="CSV path (a directory for blobs-ood)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n", type=int, default=400)
    g.add_argument("--noise", type=float, default=0.1)
    g.add_argument("--x-min", type=float, default=-4.0)
    g.add_argument("--x-max", type=float, default=4.0)
    g.add_argument("--classes", type=int, default=5)
    g.add_argument("--n-per-class", type=int, default=100)
    g.add_argument("--radius", type=float, default=4.0)
    g.add_argument("--sigma", type=float, default=1.0)
    g.add_argument("--dim", type=int, default=2)
    g.add_argument("--label-noise", type=float, default=0.0)
    g.add_argument("--k", type=int, default=10, help="number of outliers")
    g.add_argument("--outlier-radius", type=float, default=3.0)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a MAP network")
    t.add_argument("data")
    t.add_argument("-o", "--output", required=True)
    t.add_argument("--classes", type=int, default=None, help="override the number of classes")
    t.add_argument("--hidden", type=_ints, default=[20, 20])
    t.add_argument("--epochs", type=int, default=200)
    t.add_argument("--batch-size", type=int, default=32)
    t.add_argument("--lr", type=float, default=0.1)
    t.add_argument("--lr-final", type=float, default=1e-6)
    t.add_argument("--momentum", type=float, default=0.9)
    t.add_argument("--weight-decay", type=float, default=5e-4)
    t.add_argument("--fisher-penalty-alpha", type=float, default=0.0)
    t.add_argument("--asam", action="store_true")
    t.add_argument("--asam-rho", type=float, default=0.5)
    t.add_argument("--asam-eta", type=float, default=0.01)
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(func=cmd_train)

    f = sub.add_parser("fit", help="fit a last-layer posterior")
    f.add_argument("--model", required=True)
    f.add_argument("--val", required=True)
    f.add_argument("--method", choices=ex.METHODS[1:], default="icla")
    f.add_argument("-o", "--output", required=True)
    _add_marglik_flags(f)
    f.set_defaults(func=cmd_fit)

    e = sub.add_parser("eval-ood", help="score ID and OOD data, write an EvalReport")
    e.add_argument("--model")
    e.add_argument("--posterior", help="omit for the MAP baseline")
    e.add_argument("--id", help="labelled in-distribution test CSV")
    e.add_argument("--ood", action="append", default=[], help="[name=]path; repeatable")
    e.add_argument("--scores-from", help="JSON with precomputed 'id' and 'ood' scores")
    e.add_argument("--score", choices=("entropy", "max-prob"), default="entropy")
    e.add_argument("--no-probit", action="store_true", help="use the MAP softmax for scoring")
    e.add_argument("--ece-bins", type=int, default=mt.DEFAULT_ECE_BINS)
    e.add_argument("--spectrum", action="store_true", help="include curvature spectrum stats")
    e.add_argument("--method", default=None, help="name recorded in the report")
    e.add_argument("--seed", type=int, default=0, help="seed recorded in the report")
    e.add_argument("-o", "--output", required=True)
    e.set_defaults(func=cmd_eval_ood)

    s = sub.add_parser("sweep", help="blob-task sweeps over lambda, Fisher alpha or radius")
    s.add_argument("kind", choices=("lambda", "fisher-alpha", "separability"))
    s.add_argument("--grid", type=_grid, default=None,
                   help="comma-separated points; 'asam' is allowed for fisher-alpha")
    s.add_argument("--seeds", type=_ints, default=[0, 1, 2])
    s.add_argument("--radius", type=float, default=8.0, help="blob radius when not swept")
    s.add_argument("--dim", type=int, default=8)
    s.add_argument("--n-per-class", type=int, default=400)
    s.add_argument("--epochs", type=int, default=50)
    s.add_argument("-o", "--output", required=True)
    s.add_argument("--csv", help="trend CSV (one row per grid point)")
    s.set_defaults(func=cmd_sweep)

    a = sub.add_parser("analyze", help="diag-EF spectrum of a trained model")
    a.add_argument("--model", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("-o", "--output", required=True, help="spectrum CSV")
    a.add_argument("--summary", help="summary JSON")
    a.add_argument("--batch-size", type=int, default=cv.DEFAULT_BATCH_SIZE)
    a.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "seeds", None) == []:
        parser.error("--seeds must not be empty")
    try:
        return args.func(args)
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (IclaError, NumericError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
