import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from icla_kit import curvature as cv, data, nn
from icla_kit.errors import DataError, NumericError, ShapeError, UnsupportedKindError


def _toy(seed=0, n=8, c=3, d_in=2, hidden=4):
    rng = np.random.default_rng(seed)
    ds = data.LabeledDataset(rng.normal(size=(n, d_in)), rng.integers(0, c, size=n), c)
    return nn.init_mlp([d_in, hidden, c], c, seed=seed), ds


def _expected_fisher_diag(model, ds):
    """Sum over samples of the class-enumerated Fisher, sum_c p_c g_c g_c^T (diagonal)."""
    out = nn.forward(model, ds.features)
    p = nn.softmax(out.logits)
    C = p.shape[1]
    total = np.zeros(model.n_last_params)
    for n in range(len(ds)):
        for c in range(C):
            r = np.eye(C)[c] - p[n]
            g = np.concatenate([np.outer(r, out.penultimate[n]).ravel(), r])
            total += p[n, c] * g * g
    return total


def test_single_sample_diag_ef_is_squared_gradient():
    m, ds = _toy(n=1)
    g = nn.per_sample_loglik_grads(m, ds.features, ds.labels)[0]
    np.testing.assert_allclose(cv.fit_diag_ef(m, ds).diag, g * g, atol=1e-15)


def test_diag_ef_matches_full_ef_diagonal():
    m, ds = _toy(n=8)
    full = cv.fit_full_ef_last_layer(m, ds)
    np.testing.assert_allclose(cv.fit_diag_ef(m, ds).diag, np.diag(full.matrix), atol=1e-10)
    assert np.max(np.abs(full.matrix - full.matrix.T)) == 0.0
    assert np.linalg.eigvalsh(full.matrix).min() > -1e-12


def test_single_sample_full_ef_is_outer_product():
    m, ds = _toy(n=1)
    g = nn.per_sample_loglik_grads(m, ds.features, ds.labels)[0]
    np.testing.assert_allclose(cv.fit_full_ef_last_layer(m, ds).matrix, np.outer(g, g), atol=1e-15)


def test_diag_ef_zero_for_perfect_regression_fit():
    m = nn.init_mlp([1, 5, 1], None, seed=1)
    x = np.linspace(-1, 1, 7)[:, None]
    ds = data.LabeledDataset(x, nn.forward(m, x).logits[:, 0], None)
    assert np.all(cv.fit_diag_ef(m, ds).diag == 0)


def test_batch_aggregation_is_mean_of_batch_sums():
    m, ds = _toy(n=10)
    g = nn.per_sample_loglik_grads(m, ds.features, ds.labels)
    sq = g * g
    expected = (sq[:4].sum(0) + sq[4:8].sum(0) + sq[8:].sum(0)) / 3
    np.testing.assert_allclose(cv.fit_diag_ef(m, ds, batch_size=4).diag, expected, atol=1e-15)


@pytest.mark.parametrize("c", [2, 3, 5])
def test_diag_ggn_equals_expected_fisher(c):
    m, ds = _toy(seed=c, n=9, c=c)
    ggn = cv.fit_diag_ggn(m, ds, batch_size=len(ds))
    np.testing.assert_allclose(ggn.diag, _expected_fisher_diag(m, ds), atol=1e-10)


def test_diag_ggn_hand_two_class_case():
    # zero last layer -> p = (0.5, 0.5) and Lambda diagonal 0.25
    m, ds = _toy(n=1, c=2)
    W, b = m.layers[-1]
    m = nn.with_params(m, [m.layers[0], (np.zeros_like(W), np.zeros_like(b))])
    nu = nn.forward(m, ds.features).penultimate[0]
    expected = np.concatenate([0.25 * nu ** 2, 0.25 * nu ** 2, [0.25, 0.25]])
    np.testing.assert_allclose(cv.fit_diag_ggn(m, ds).diag, expected, atol=1e-15)


def test_diag_ggn_vanishes_for_confident_model():
    m, ds = _toy(n=4, c=3)
    W, b = m.layers[-1]
    m = nn.with_params(m, [m.layers[0], (np.zeros_like(W), np.array([200.0, 0.0, 0.0]))])
    assert cv.fit_diag_ggn(m, ds).diag.max() < 1e-80


def test_diag_ggn_rejects_regression():
    m = nn.init_mlp([1, 3, 1], None, seed=0)
    ds = data.gen_sinusoid(10, seed=0)
    with pytest.raises(UnsupportedKindError):
        cv.fit_diag_ggn(m, ds)


def test_kfac_single_sample_equals_full_ef():
    for seed in range(5):
        m, ds = _toy(seed=seed, n=1, c=3, hidden=5)
        k = cv.fit_kfac_last_layer(m, ds)
        full = cv.fit_full_ef_last_layer(m, ds)
        np.testing.assert_allclose(cv.kron_expand(k.A, k.B), full.matrix, atol=1e-10)


def test_kfac_zero_features_and_zero_gradients():
    m, ds = _toy(n=5)
    zero_hidden = [(np.zeros_like(W), np.zeros_like(b)) for W, b in m.layers[:-1]] + [m.layers[-1]]
    k = cv.fit_kfac_last_layer(nn.with_params(m, zero_hidden), ds)
    expected_A = np.zeros_like(k.A)
    expected_A[-1, -1] = 1.0
    np.testing.assert_array_equal(k.A, expected_A)

    reg = nn.init_mlp([2, 4, 1], None, seed=0)
    x = ds.features
    rds = data.LabeledDataset(x, nn.forward(reg, x).logits[:, 0], None)
    kr = cv.fit_kfac_last_layer(reg, rds)
    assert np.all(kr.B == 0)
    assert np.all(kr.dense() == 0)


def test_kfac_factors_symmetric_psd():
    m, ds = _toy(n=20, hidden=6)
    k = cv.fit_kfac_last_layer(m, ds)
    for F in (k.A, k.B):
        assert np.array_equal(F, F.T)
        assert np.linalg.eigvalsh(F).min() > -1e-12


def test_kron_expand_cases():
    np.testing.assert_array_equal(cv.kron_expand(np.eye(2), np.eye(3)), np.eye(6))
    B = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(cv.kron_expand(np.array([[2.0]]), B), 2 * B)
    # A is 2x2 with the bias in its second slot: order is (w0, w1, b0, b1)
    A = np.array([[1.0, 2.0], [3.0, 4.0]])
    B = np.array([[5.0, 6.0], [7.0, 8.0]])
    K = np.kron(B, A)  # class-major: (w0, b0, w1, b1)
    perm = [0, 2, 1, 3]
    np.testing.assert_array_equal(cv.kron_expand(A, B), K[np.ix_(perm, perm)])
    assert cv.kron_expand(A, B)[0, 1] == B[0, 1] * A[0, 0]
    with pytest.raises(ShapeError):
        cv.kron_expand(np.zeros((2, 3)), np.eye(2))


def test_spectrum_sorting_and_kfac_rule():
    s = cv.spectrum(cv.CurvatureEstimate("diag_ef", 3, diag=np.array([3.0, 1.0, 2.0])))
    np.testing.assert_array_equal(s.eigenvalues, [3.0, 2.0, 1.0])
    assert s.mean_eigenvalue == 2.0
    k = cv.CurvatureEstimate("kfac", 4, A=np.diag([2.0, 1.0]), B=np.diag([3.0, 1.0]))
    np.testing.assert_allclose(cv.spectrum(k).eigenvalues, [6.0, 3.0, 2.0, 1.0])
    with pytest.raises(NumericError):
        cv.spectrum(cv.CurvatureEstimate("diag_ef", 2, diag=np.array([np.nan, 1.0])))


def test_zero_curvature_and_degenerate_spectrum():
    z = cv.CurvatureEstimate.zero(6)
    assert np.all(z.dense() == 0)
    s = cv.spectrum(z)
    assert s.mean_eigenvalue == 0.0 and s.tail_mass_top1pct == 0.0


def test_trained_moons_spectrum_has_long_tail():
    ds = data.gen_half_moons(200, 0.1, 0)
    m = nn.train_map(ds, [2, 20, 20, 2], nn.TrainConfig(epochs=60, lr_final=1e-4, seed=0))
    s = cv.spectrum(cv.fit_diag_ef(m, ds))
    assert s.tail_mass_top1pct > s.uniform_share


def test_fit_dispatch_and_errors():
    m, ds = _toy()
    assert cv.fit("zero", m, ds).kind == "zero"
    with pytest.raises(UnsupportedKindError):
        cv.fit("bogus", m, ds)
    with pytest.raises(DataError):
        cv.fit_diag_ef(m, ds, batch_size=0)


def test_spectrum_csv(tmp_path):
    s = cv.spectrum(cv.CurvatureEstimate("diag_ef", 3, diag=np.array([3.0, 1.0, 2.0])))
    p = tmp_path / "s.csv"
    cv.write_spectrum_csv(s, p)
    assert p.read_text().splitlines() == ["index,eigenvalue", "0,3.0", "1,2.0", "2,1.0"]


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31))
def test_kron_expand_preserves_spectrum(m, n, seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(m + 1, m + 1))
    b = rng.normal(size=(n, n))
    A, B = a @ a.T, b @ b.T
    K = cv.kron_expand(A, B)
    np.testing.assert_allclose(np.sort(np.linalg.eigvalsh(K)),
                               np.sort(np.outer(np.linalg.eigvalsh(A), np.linalg.eigvalsh(B)).ravel()),
                               atol=1e-8 * (1 + np.abs(K).max()))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 12))
def test_diag_estimates_are_nonnegative(seed, n):
    m, ds = _toy(seed=seed % 1000, n=n)
    assert cv.fit_diag_ef(m, ds).diag.min() >= 0
    assert cv.fit_diag_ggn(m, ds).diag.min() >= 0
