"""Versioned JSON documents for models, posteriors and reports.

Floats are written with ``repr`` precision (the ``json`` default), so a
load after a save reproduces every parameter bit for bit. NaN and infinite
report fields are written as ``null``.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from icla_kit import curvature as cv
from icla_kit import laplace as la
from icla_kit import nn
from icla_kit.errors import DataError

SCHEMA_VERSION = 1


def _plain(obj):
    """Convert numpy containers and non-finite floats into JSON-safe values."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def dump_json(doc: dict, path) -> None:
    text = json.dumps(_plain(doc), indent=2, allow_nan=False) + "\n"
    Path(path).write_text(text, encoding="utf-8")


def load_json(path, kind: str | None = None) -> dict:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict) or doc.get("schema_version") != SCHEMA_VERSION:
        raise DataError(f"{path}: expected schema_version {SCHEMA_VERSION}")
    if kind is not None and doc.get("type") != kind:
        raise DataError(f"{path}: expected a {kind} document, found {doc.get('type')!r}")
    return doc


def model_doc(model: nn.MlpModel, training: dict | None = None) -> dict:
    doc = {
        "schema_version": SCHEMA_VERSION,
        "type": "model",
        "arch": model.arch,
        "n_classes": model.n_classes,
        "layers": [{"W": W, "b": b} for W, b in model.layers],
    }
    if training is not None:
        doc["training"] = training
    return doc


def model_from_doc(doc: dict) -> nn.MlpModel:
    try:
        layers = tuple((np.array(l["W"], dtype=np.float64), np.array(l["b"], dtype=np.float64))
                       for l in doc["layers"])
        return nn.MlpModel(layers, doc["n_classes"])
    except (KeyError, TypeError) as exc:
        raise DataError(f"malformed model document: {exc!r}") from None


def save_model(model, path, training: dict | None = None) -> None:
    dump_json(model_doc(model, training), path)


def load_model(path) -> nn.MlpModel:
    return model_from_doc(load_json(path, "model"))


def _curvature_payload(c: cv.CurvatureEstimate) -> dict:
    out = {"kind": c.kind, "d": c.d, "n_samples": c.n_samples}
    if c.diag is not None:
        out["diag"] = c.diag
    if c.A is not None:
        out["A"] = c.A
        out["B"] = c.B
    if c.matrix is not None:
        out["matrix"] = c.matrix
    return out


def _curvature_from_payload(p: dict) -> cv.CurvatureEstimate:
    arr = lambda key: None if key not in p else np.array(p[key], dtype=np.float64)  # noqa: E731
    return cv.CurvatureEstimate(p["kind"], int(p["d"]), diag=arr("diag"), A=arr("A"), B=arr("B"),
                                matrix=arr("matrix"), n_samples=int(p.get("n_samples", 0)))


def posterior_doc(post: la.PosteriorSpec, method: str,
                  marglik: la.MarglikResult | None = None) -> dict:
    doc = {
        "schema_version": SCHEMA_VERSION,
        "type": "posterior",
        "method": method,
        "d": post.d,
        "lambda": post.lam,
        "w_map": post.w_map,
        "curvature": _curvature_payload(post.curvature),
    }
    if marglik is not None:
        doc["marglik"] = {"lambdas": marglik.lambdas, "evidences": marglik.evidences,
                          "warnings": marglik.warnings}
    return doc


def save_posterior(post, path, method: str, marglik=None) -> None:
    dump_json(posterior_doc(post, method, marglik), path)


def load_posterior(path) -> tuple[la.PosteriorSpec, str]:
    doc = load_json(path, "posterior")
    try:
        curv = _curvature_from_payload(doc["curvature"])
        return la.build_posterior(np.array(doc["w_map"], dtype=np.float64), curv,
                                  float(doc["lambda"])), doc["method"]
    except (KeyError, TypeError) as exc:
        raise DataError(f"{path}: malformed posterior document: {exc!r}") from None


def report_doc(report) -> dict:
    return {"schema_version": SCHEMA_VERSION, "type": "eval_report", **report.to_dict()}
