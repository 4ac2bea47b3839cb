import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from icla_kit import curvature as cv, data, laplace as la, nn
from icla_kit.errors import NumericError, ParameterError, ShapeError


def _ones_model(L=3, C=2):
    """Identity hidden layer; for input (1,...,1) the features are all ones."""
    first = (np.eye(L), np.zeros(L))
    last = (np.full((C, L), 0.5), np.zeros(C))
    return nn.MlpModel((first, last), C)


def _toy(seed=0, n=20, c=3, hidden=5):
    rng = np.random.default_rng(seed)
    ds = data.LabeledDataset(rng.normal(size=(n, 2)), rng.integers(0, c, size=n), c)
    return nn.init_mlp([2, hidden, c], c, seed=seed), ds


def _dense_cov(model, post, x):
    feats = nn.forward(model, x).penultimate
    C = model.n_outputs
    inv = np.linalg.inv(post.precision())
    out = []
    for nu in feats:
        J = np.hstack([np.kron(np.eye(C), nu[None, :]), np.eye(C)])
        out.append(J @ inv @ J.T)
    return np.array(out)


def test_build_posterior_precisions():
    z = la.build_posterior(np.zeros(3), cv.CurvatureEstimate.zero(3), 2.0)
    np.testing.assert_array_equal(z.precision(), np.diag([2.0, 2.0, 2.0]))
    d = la.build_posterior(np.zeros(3), cv.CurvatureEstimate("diag_ef", 3, diag=np.array([1.0, 0.0, 4.0])), 1.0)
    np.testing.assert_array_equal(d.precision(), np.diag([2.0, 1.0, 5.0]))
    m, ds = _toy()
    k = cv.fit_kfac_last_layer(m, ds)
    p = la.build_posterior(nn.last_layer_vector(m), k, 0.7)
    np.testing.assert_allclose(p.precision(), cv.kron_expand(k.A, k.B) + 0.7 * np.eye(k.d), atol=1e-10)
    with pytest.raises(ParameterError):
        la.build_posterior(np.zeros(3), cv.CurvatureEstimate.zero(3), 0.0)
    with pytest.raises(ShapeError):
        la.build_posterior(np.zeros(4), cv.CurvatureEstimate.zero(3), 1.0)


def test_icla_covariance_closed_form_hand_case():
    m = _ones_model(L=3, C=2)
    post = la.build_posterior(nn.last_layer_vector(m), cv.CurvatureEstimate.zero(8), 2.0)
    dist = la.predictive(m, post, np.ones(3))
    np.testing.assert_allclose(dist.covariance, 2.0 * np.eye(2), atol=1e-15)
    np.testing.assert_array_equal(dist.mean, nn.forward(m, np.ones(3)).logits)


@pytest.mark.parametrize("kind", ["diag_ef", "diag_ggn", "kfac", "full_ef", "zero"])
def test_predictive_matches_dense_oracle(kind):
    m, ds = _toy(seed=2)
    post = la.build_posterior(nn.last_layer_vector(m), cv.fit(kind, m, ds), 0.8)
    x = np.random.default_rng(1).normal(size=(6, 2))
    np.testing.assert_allclose(la.predictive(m, post, x).covariance, _dense_cov(m, post, x), atol=1e-10)


def test_predictive_rejects_stale_mean():
    m, _ = _toy()
    post = la.build_posterior(nn.last_layer_vector(m) + 1e-3, cv.CurvatureEstimate.zero(m.n_last_params), 1.0)
    with pytest.raises(ShapeError):
        la.predictive(m, post, np.zeros(2))


def test_regression_predictive():
    m = nn.MlpModel(((np.zeros((2, 1)), np.zeros(2)), (np.ones((1, 2)), np.zeros(1))), None)
    post = la.build_posterior(nn.last_layer_vector(m), cv.CurvatureEstimate.zero(3), 1.0)
    dist = la.regression_predictive(m, post, np.array([[0.3]]), sigma_obs=0.1)
    assert dist.covariance[0] == pytest.approx(1.0 + 0.01, abs=1e-15)  # features are zero
    big = la.build_posterior(nn.last_layer_vector(m), cv.CurvatureEstimate.zero(3), 1e12)
    assert la.regression_predictive(m, big, np.array([[0.3]])).covariance[0] == pytest.approx(0.01, rel=1e-9)

    m2 = nn.init_mlp([1, 4, 1], None, seed=3)
    ds = data.gen_sinusoid(30, seed=1)
    post = la.build_posterior(nn.last_layer_vector(m2), cv.fit_diag_ef(m2, ds), 0.5)
    x = np.linspace(-3, 3, 5)[:, None]
    got = la.regression_predictive(m2, post, x, sigma_obs=0.2).covariance
    np.testing.assert_allclose(got, _dense_cov(m2, post, x)[:, 0, 0] + 0.04, atol=1e-10)


def test_predict_proba_cases():
    mean = np.array([1.0, 0.0])
    zero = la.predict_proba(la.PredictiveDistribution(mean, np.zeros((2, 2))))
    np.testing.assert_allclose(zero, nn.softmax(mean), atol=1e-15)
    half = la.predict_proba(la.PredictiveDistribution(mean, np.diag([8.0 / math.pi * 3.0, 0.0])))
    e = math.exp(0.5)
    np.testing.assert_allclose(half, [e / (e + 1), 1 / (e + 1)], atol=1e-15)
    with pytest.raises(NumericError):
        la.predict_proba(la.PredictiveDistribution(mean, np.diag([-1e-6, 0.0])))
    ok = la.predict_proba(la.PredictiveDistribution(mean, np.diag([-1e-12, 0.0])))
    np.testing.assert_allclose(ok, nn.softmax(mean), atol=1e-12)


def test_entropy_score_cases():
    assert la.entropy_score(np.array([1.0, 0.0, 0.0])) == 0.0
    assert la.entropy_score(np.full(4, 0.25)) == pytest.approx(math.log(4), abs=1e-15)
    assert la.entropy_score(np.array([0.75, 0.25])) == pytest.approx(0.5623351446188083, abs=1e-15)
    with pytest.raises(ParameterError):
        la.entropy_score(np.array([1.2, -0.2]))


def test_marglik_closed_form_zero_curvature():
    m = nn.MlpModel(((np.eye(3), np.zeros(3)), (np.ones((2, 3)), np.ones(2))), 2)
    ds = data.LabeledDataset(np.ones((4, 3)), np.array([0, 1, 0, 1]), 2)
    cfg = la.MarglikConfig(lr=0.1, steps=300, lambda_init=0.2)
    lam = la.marglik_optimize(m, cv.CurvatureEstimate.zero(8), ds, cfg)
    assert lam == pytest.approx(1.0, rel=1e-3)


def test_marglik_no_step_returns_init():
    m, ds = _toy()
    lam = la.marglik_optimize(m, cv.fit_diag_ef(m, ds), ds, la.MarglikConfig(lr=0.0, steps=1, lambda_init=3.0))
    assert lam == 3.0
    lam = la.marglik_optimize(m, cv.fit_diag_ef(m, ds), ds,
                              la.MarglikConfig(lr=0.0, steps=1, lambda_init=3.0, optimizer="sgd"))
    assert lam == 3.0


def test_sgd_marglik_clamps_and_records_warning():
    # large last-layer weights: the first ascent step overshoots lambda^2 below zero
    m = nn.MlpModel(((np.eye(3), np.zeros(3)), (np.full((2, 3), 5.0), np.full(2, 5.0))), 2)
    ds = data.LabeledDataset(np.ones((4, 3)), np.array([0, 1, 0, 1]), 2)
    res = la.marglik_trace(m, cv.CurvatureEstimate.zero(m.n_last_params), ds,
                           la.MarglikConfig(lr=1.0, steps=3, lambda_init=1.0, optimizer="sgd"))
    assert res.warnings and "clamped" in res.warnings[0]
    assert min(res.lambdas) >= math.sqrt(la.LAMBDA_FLOOR_SQ) * (1 - 1e-12)


def test_zero_curvature_evidence_trajectory_rises_to_optimum():
    m, ds = _toy(seed=4)
    w = nn.last_layer_vector(m)
    lam_star = len(w) / float(w @ w)
    res = la.marglik_trace(m, cv.CurvatureEstimate.zero(len(w)), ds,
                           la.MarglikConfig(lr=0.05, steps=400, lambda_init=lam_star / 3))
    ev = la.Evidence(m, cv.CurvatureEstimate.zero(len(w)), ds)
    best = ev.value(lam_star)
    for a, b in zip(res.evidences, res.evidences[1:]):
        if best - a < 1e-6:
            break
        assert b >= a
    assert res.lam == pytest.approx(lam_star, rel=1e-3)


@pytest.mark.parametrize("kind", ["diag_ef", "kfac", "full_ef"])
def test_evidence_gradient_matches_finite_differences(kind):
    m, ds = _toy(seed=1)
    ev = la.Evidence(m, cv.fit(kind, m, ds), ds)
    for lam in (0.3, 1.0, 4.0):
        h = 1e-6 * lam
        fd = (ev.value(lam + h) - ev.value(lam - h)) / (2 * h)
        assert ev.grad(lam) == pytest.approx(fd, rel=1e-6)
        fd_sq = (ev.value(math.sqrt(lam**2 + h)) - ev.value(math.sqrt(lam**2 - h))) / (2 * h)
        assert ev.grad_sq(lam) == pytest.approx(fd_sq, rel=1e-5)


def test_icla_fit_is_identity_posterior_and_deterministic():
    m, ds = _toy(seed=5)
    a = la.icla_fit(m, ds)
    b = la.icla_fit(m, ds)
    z = la.icla_fit(m, ds, zero_variant=True)
    assert a.is_identity and z.is_identity
    np.testing.assert_array_equal(a.precision(), a.lam * np.eye(a.d))
    assert a.lam == b.lam
    assert a.lam != z.lam
    np.testing.assert_array_equal(a.w_map, nn.last_layer_vector(m))


def test_marglik_config_validation():
    with pytest.raises(ParameterError):
        la.MarglikConfig(steps=0)
    with pytest.raises(ParameterError):
        la.MarglikConfig(optimizer="lbfgs")


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.05, 50.0))
def test_icla_probit_preserves_argmax(seed, lam):
    m = nn.init_mlp([3, 6, 4], 4, seed=seed)
    x = np.random.default_rng(seed).normal(size=(20, 3)) * 3
    post = la.build_posterior(nn.last_layer_vector(m), cv.CurvatureEstimate.zero(m.n_last_params), lam)
    p = la.posterior_proba(m, post, x)
    np.testing.assert_array_equal(p.argmax(axis=1), la.map_proba(m, x).argmax(axis=1))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_icla_covariance_decreases_with_lambda(seed):
    m = nn.init_mlp([2, 5, 3], 3, seed=seed)
    x = np.random.default_rng(seed).normal(size=(3, 2))
    prev = None
    for lam in (0.5, 1.0, 2.0, 4.0):
        post = la.build_posterior(nn.last_layer_vector(m), cv.CurvatureEstimate.zero(m.n_last_params), lam)
        cov = la.predictive(m, post, x).covariance
        if prev is not None:
            assert np.all(np.diagonal(cov, axis1=1, axis2=2) < np.diagonal(prev, axis1=1, axis2=2))
        prev = cov
