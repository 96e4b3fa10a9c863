import math

import numpy as np
import pytest

from radiomaps.core import Dataset, FingerprintRecord, GridSpec, Position
from radiomaps.errors import InputError
from radiomaps.gp import (
    ArdParams,
    GpFitOptions,
    GpHyperparams,
    GpMapOptions,
    TrainedGp,
    ard_kernel,
    build_gp_radio_map,
    default_hyperparams,
    fit_gp,
    gp_predict,
    gp_predict_many,
    gram,
    log_marginal_likelihood,
    lml_gradient,
    se_kernel,
)

THETA = GpHyperparams(length_scale=1.5, signal_variance=2.0, noise_variance=0.3)


def naive_lml(X, Y, theta):
    """Independent oracle: direct dense evaluation of the marginal likelihood."""
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    n = len(Y)
    d2 = ((X[:, None, :] - X[None, :, :]) ** 2).sum(-1)
    K = theta.signal_variance * np.exp(-d2 / (2 * theta.length_scale**2))
    S = K + theta.noise_variance * np.eye(n)
    sign, logdet = np.linalg.slogdet(S)
    assert sign > 0
    return -0.5 * Y @ np.linalg.solve(S, Y) - 0.5 * logdet - 0.5 * n * math.log(2 * math.pi)


def random_instance(rng, n=8, duplicates=False):
    X = rng.uniform(0, 5, size=(n, 2))
    if duplicates:
        X[n // 2 :] = X[: n - n // 2]
    Y = rng.normal(0, 2, size=n)
    return X, Y


def test_se_kernel_zero_distance():
    theta = GpHyperparams(1.0, 2.0, 0.1)
    p = Position(1.0, 2.0)
    assert se_kernel(p, p, theta) == pytest.approx(2.0, abs=1e-15)


def test_se_kernel_at_one_length_scale():
    theta = GpHyperparams(3.0, 1.0, 0.1)
    assert se_kernel(Position(0, 0), Position(3.0, 0.0), theta) == pytest.approx(0.606531, abs=1e-6)
    assert se_kernel(Position(0, 0), Position(3.0, 0.0), theta) == pytest.approx(math.exp(-0.5), abs=1e-12)


def test_se_kernel_symmetry():
    rng = np.random.default_rng(0)
    for _ in range(10):
        p, q = Position(*rng.uniform(-5, 5, 2)), Position(*rng.uniform(-5, 5, 2))
        assert se_kernel(p, q, THETA) == pytest.approx(se_kernel(q, p, THETA), abs=1e-15)


def test_ard_kernel_basics():
    params = ArdParams(variance=2.5, weights=(0.7, 1.3))
    p = [0.3, -0.4]
    assert ard_kernel(p, p, params) == pytest.approx(2.5, abs=1e-15)
    with pytest.raises(InputError):
        ard_kernel([1.0], [1.0, 2.0], params)


def test_ard_matches_se_with_matching_weights():
    l = 1.7
    se = GpHyperparams(length_scale=l, signal_variance=2.0, noise_variance=0.1)
    ard = ArdParams(variance=2.0, weights=(1 / l**2, 1 / l**2))
    rng = np.random.default_rng(1)
    for _ in range(10):
        p, q = rng.uniform(-3, 3, 2), rng.uniform(-3, 3, 2)
        assert ard_kernel(p, q, ard) == pytest.approx(se_kernel(Position(*p), Position(*q), se), abs=1e-12)


def test_ard_tiny_weight_bounds_sensitivity():
    eps = 1e-8
    params = ArdParams(variance=2.0, weights=(1.0, eps))
    base = ard_kernel([0.0, 0.0], [0.5, 0.0], params)
    delta = 3.0
    moved = ard_kernel([0.0, 0.0], [0.5, delta], params)
    # first-order bound: changing the near-ignored coordinate moves the
    # output by at most variance * w * delta^2 / 2
    assert abs(moved - base) <= params.variance * eps * delta**2 / 2 + 1e-15


def test_gram_single_point():
    K = gram([Position(0, 0)], THETA, jitter=0.05)
    assert K.shape == (1, 1)
    assert K[0, 0] == pytest.approx(THETA.signal_variance + THETA.noise_variance + 0.05, abs=1e-15)


def test_gram_duplicate_inputs():
    K = gram([Position(1, 1), Position(1, 1)], THETA)
    assert K[0, 1] == pytest.approx(THETA.signal_variance, abs=1e-15)
    assert K[0, 0] == pytest.approx(THETA.signal_variance + THETA.noise_variance, abs=1e-15)
    np.linalg.cholesky(K)  # noise regularizes duplicates


def test_gram_positive_definite():
    rng = np.random.default_rng(2)
    X = rng.uniform(0, 4, size=(5, 2))
    eig = np.linalg.eigvalsh(gram(X, THETA))
    assert np.all(eig > 0)


def test_lml_single_point_closed_forms():
    theta = GpHyperparams(length_scale=1.0, signal_variance=1.0, noise_variance=1.0)
    lml0 = log_marginal_likelihood([Position(0, 0)], [0.0], theta)
    assert lml0 == pytest.approx(-0.5 * math.log(2) - 0.5 * math.log(2 * math.pi), abs=1e-12)
    assert lml0 == pytest.approx(-1.265512, abs=1e-6)
    lml2 = log_marginal_likelihood([Position(0, 0)], [2.0], theta)
    assert lml2 == pytest.approx(lml0 - 1.0, abs=1e-12)
    assert lml2 == pytest.approx(-2.265512, abs=1e-6)


def test_lml_single_point_equals_univariate_gaussian():
    from radiomaps.stats import gaussian_log_pdf

    rng = np.random.default_rng(3)
    for _ in range(5):
        theta = GpHyperparams(*rng.uniform(0.5, 3.0, 3))
        y = float(rng.normal())
        lml = log_marginal_likelihood([Position(1, 2)], [y], theta)
        expected = gaussian_log_pdf(y, 0.0, theta.signal_variance + theta.noise_variance)
        assert lml == pytest.approx(expected, abs=1e-12)


def test_lml_matches_naive_dense_oracle():
    rng = np.random.default_rng(4)
    for dup in (False, True):
        for _ in range(10):
            X, Y = random_instance(rng, n=9, duplicates=dup)
            theta = GpHyperparams(*rng.uniform(0.4, 3.0, 3))
            assert log_marginal_likelihood(X, Y, theta) == pytest.approx(naive_lml(X, Y, theta), rel=1e-10)


def fd_gradient(X, Y, theta, h=1e-5):
    log0 = theta.log_vector()
    grad = np.zeros(3)
    for j in range(3):
        up, dn = log0.copy(), log0.copy()
        up[j] += h
        dn[j] -= h
        grad[j] = (
            log_marginal_likelihood(X, Y, GpHyperparams.from_log_vector(up))
            - log_marginal_likelihood(X, Y, GpHyperparams.from_log_vector(dn))
        ) / (2 * h)
    return grad


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(5)
    for i in range(20):
        X, Y = random_instance(rng, n=8, duplicates=(i % 3 == 0))
        theta = GpHyperparams(*rng.uniform(0.5, 2.5, 3))
        analytic = lml_gradient(X, Y, theta)
        numeric = fd_gradient(X, Y, theta)
        np.testing.assert_allclose(analytic, numeric, rtol=1e-4, atol=1e-7)


def test_gradient_sign_of_noise_term_at_zero_y():
    rng = np.random.default_rng(6)
    X = rng.uniform(0, 5, size=(6, 2))
    Y = np.zeros(6)
    theta = GpHyperparams(1.0, 1.0, 0.5)
    analytic = lml_gradient(X, Y, theta)
    numeric = fd_gradient(X, Y, theta)
    assert analytic[2] < 0  # with Y=0 shrinking noise always helps the fit term
    np.testing.assert_allclose(analytic, numeric, rtol=1e-4, atol=1e-8)


def test_fit_recovers_known_hyperparameters():
    rng = np.random.default_rng(7)
    true = GpHyperparams(length_scale=2.0, signal_variance=9.0, noise_variance=1.0)
    n = 200
    X = rng.uniform(0, 10, size=(n, 2))
    d2 = ((X[:, None, :] - X[None, :, :]) ** 2).sum(-1)
    K = true.signal_variance * np.exp(-d2 / (2 * true.length_scale**2))
    f = rng.multivariate_normal(np.zeros(n), K + 1e-10 * np.eye(n))
    Y = f + rng.normal(0, math.sqrt(true.noise_variance), size=n)
    model = fit_gp(X, Y, opts=GpFitOptions(max_iters=500))
    np.testing.assert_allclose(model.theta.log_vector(), true.log_vector(), atol=0.5)


def test_fit_never_ends_below_start():
    rng = np.random.default_rng(8)
    X, Y = random_instance(rng, n=20)
    theta0 = GpHyperparams(0.5, 0.5, 0.5)
    model = fit_gp(X, Y, theta0)
    assert log_marginal_likelihood(X, Y, model.theta) >= log_marginal_likelihood(X, Y, theta0) - 1e-9


def test_fit_gradient_small_at_interior_optimum():
    rng = np.random.default_rng(9)
    true = GpHyperparams(1.5, 4.0, 0.5)
    n = 120
    X = rng.uniform(0, 8, size=(n, 2))
    d2 = ((X[:, None, :] - X[None, :, :]) ** 2).sum(-1)
    K = true.signal_variance * np.exp(-d2 / (2 * true.length_scale**2))
    Y = rng.multivariate_normal(np.zeros(n), K + true.noise_variance * np.eye(n))
    model = fit_gp(X, Y, opts=GpFitOptions(max_iters=2000, tol=1e-7))
    grad = lml_gradient(X, Y, model.theta)
    assert np.linalg.norm(grad) < 1e-3


def test_trained_gp_invariants():
    rng = np.random.default_rng(10)
    X, Y = random_instance(rng, n=12)
    model = fit_gp(X, Y)
    S = model.chol @ model.chol.T
    K_ref = gram(model.X, model.theta)
    assert np.linalg.norm(S - K_ref) / np.linalg.norm(K_ref) < 1e-8
    np.testing.assert_allclose(S @ model.alpha, model.Y, rtol=1e-8, atol=1e-8)


def test_predict_single_point_closed_form():
    theta = GpHyperparams(length_scale=1.0, signal_variance=1.0, noise_variance=1.0)
    X = np.array([[0.0, 0.0]])
    Y = np.array([2.0])
    chol = np.linalg.cholesky(gram(X, theta))
    alpha = np.linalg.solve(gram(X, theta), Y)
    model = TrainedGp(X=X, Y=Y, theta=theta, chol=chol, alpha=alpha)
    mu, var_latent, var_total = gp_predict(model, Position(0, 0))
    assert mu == pytest.approx(1.0, abs=1e-12)
    assert var_latent == pytest.approx(0.5, abs=1e-12)
    assert var_total == pytest.approx(1.5, abs=1e-12)


def test_predict_far_from_data_recovers_prior():
    rng = np.random.default_rng(11)
    X, Y = random_instance(rng, n=10)
    model = fit_gp(X, Y)
    mu, var_latent, _ = gp_predict(model, Position(1e4, 1e4))
    assert abs(mu) < 1e-6
    assert var_latent == pytest.approx(model.theta.signal_variance, abs=1e-6)


def test_variance_is_y_independent():
    rng = np.random.default_rng(12)
    X, Y = random_instance(rng, n=15)
    theta = GpHyperparams(1.2, 2.0, 0.4)
    chol = np.linalg.cholesky(gram(X, theta))

    def build(y):
        return TrainedGp(X=X, Y=y, theta=theta, chol=chol, alpha=np.linalg.solve(gram(X, theta), y))

    queries = rng.uniform(-2, 7, size=(100, 2))
    _, v1, t1 = gp_predict_many(build(Y), queries)
    _, v2, t2 = gp_predict_many(build(-Y), queries)
    perm = rng.permutation(len(Y))
    _, v3, _ = gp_predict_many(build(Y[perm]), queries)
    assert np.array_equal(v1, v2) and np.array_equal(t1, t2)
    assert np.array_equal(v1, v3)


def test_variance_bounds_and_monotonicity():
    rng = np.random.default_rng(13)
    theta = GpHyperparams(1.0, 3.0, 0.2)
    X = rng.uniform(0, 5, size=(9, 2))
    Y = rng.normal(size=9)
    queries = rng.uniform(0, 5, size=(40, 2))

    def var_with(n):
        chol = np.linalg.cholesky(gram(X[:n], theta))
        model = TrainedGp(X=X[:n], Y=Y[:n], theta=theta, chol=chol, alpha=np.linalg.solve(gram(X[:n], theta), Y[:n]))
        return gp_predict_many(model, queries)[1]

    prev = var_with(1)
    assert np.all(prev >= -1e-9) and np.all(prev <= theta.signal_variance + 1e-9)
    for n in range(2, 10):
        cur = var_with(n)
        assert np.all(cur <= prev + 1e-9)  # conditioning never increases variance
        prev = cur


def test_interpolation_with_tiny_noise():
    rng = np.random.default_rng(14)
    X = rng.uniform(0, 5, size=(12, 2))
    Y = np.sin(X[:, 0]) + np.cos(X[:, 1])
    theta = GpHyperparams(length_scale=1.0, signal_variance=2.0, noise_variance=1e-8)
    chol = np.linalg.cholesky(gram(X, theta))
    model = TrainedGp(X=X, Y=Y, theta=theta, chol=chol, alpha=np.linalg.solve(gram(X, theta), Y))
    for i in range(len(Y)):
        mu, _, _ = gp_predict(model, Position(*X[i]))
        assert mu == pytest.approx(Y[i], abs=1e-3)


def test_constant_y_predicts_constant():
    rng = np.random.default_rng(15)
    X = rng.uniform(0, 6, size=(60, 2))
    c = 5.0
    Y = np.full(60, c)
    model = fit_gp(X, Y, GpHyperparams(2.0, 1.0, 0.5))
    mu, _, _ = gp_predict_many(model, rng.uniform(0, 6, size=(20, 2)))
    np.testing.assert_allclose(mu, c, atol=0.1)


def _tiny_dataset(rng, n_per=3, aps=("a", "b")):
    records = []
    for x in range(3):
        for y in range(3):
            for _ in range(n_per):
                obs = {ap: float(rng.normal(-50 - 3 * x - 2 * y, 1.0)) for ap in aps}
                records.append(FingerprintRecord(Position(x + 0.5, y + 0.5), obs))
    return Dataset.from_records(records)


def test_build_gp_radio_map_single_ap():
    rng = np.random.default_rng(16)
    ds = _tiny_dataset(rng, aps=("a",))
    grid = GridSpec(rows=3, cols=3)
    rm, hyper = build_gp_radio_map(ds, grid, GpMapOptions(fit=GpFitOptions(max_iters=100)))
    assert rm.ap_ids == ("a",)
    assert set(hyper) == {"a"}
    assert np.all(rm.variances["a"] > 0)
    assert "hyperparams" in rm.to_json()


def test_build_gp_radio_map_skips_thin_aps():
    rng = np.random.default_rng(17)
    ds = _tiny_dataset(rng, aps=("a",))
    lone = FingerprintRecord(Position(0.5, 0.5), {"a": -50.0, "rare": -70.0})
    ds = Dataset.from_records(list(ds.records) + [lone])
    grid = GridSpec(rows=3, cols=3)
    with pytest.warns(UserWarning, match="rare"):
        rm, _ = build_gp_radio_map(ds, grid, GpMapOptions(fit=GpFitOptions(max_iters=50)))
    assert "rare" not in rm.means


def test_build_gp_radio_map_order_insensitive():
    rng = np.random.default_rng(18)
    ds = _tiny_dataset(rng, aps=("a",))
    grid = GridSpec(rows=3, cols=3)
    opts = GpMapOptions(fit=GpFitOptions(max_iters=120))
    rm1, _ = build_gp_radio_map(ds, grid, opts)
    shuffled = list(ds.records)
    rng.shuffle(shuffled)
    rm2, _ = build_gp_radio_map(Dataset.from_records(shuffled), grid, opts)
    np.testing.assert_allclose(rm1.means["a"], rm2.means["a"], atol=1e-6)


def test_build_gp_radio_map_matches_cell_sample_means():
    # sample every cell densely with tiny true noise; the map mean should sit
    # within 3 standard errors of the per-cell sample mean nearly everywhere
    rng = np.random.default_rng(19)
    grid = GridSpec(rows=3, cols=3)
    n_per = 40
    sigma = 0.2
    records = []
    cell_values = {}
    for r in range(3):
        for c in range(3):
            pos = Position(c + 0.5, r + 0.5)
            mu = -40.0 - 2.0 * r - 1.0 * c
            vals = rng.normal(mu, sigma, size=n_per)
            cell_values[(r, c)] = vals
            records.extend(FingerprintRecord(pos, {"a": float(v)}) for v in vals)
    ds = Dataset.from_records(records)
    rm, _ = build_gp_radio_map(ds, grid, GpMapOptions(fit=GpFitOptions(max_iters=300)))
    hits = 0
    for (r, c), vals in cell_values.items():
        idx = r * 3 + c
        se = sigma / math.sqrt(n_per)
        if abs(rm.means["a"][idx] - vals.mean()) <= 3 * se:
            hits += 1
    assert hits >= math.ceil(0.95 * 9)


def test_default_hyperparams_scale_aware():
    rng = np.random.default_rng(20)
    X = rng.uniform(0, 8, size=(30, 2))
    Y = rng.normal(-50, 3, size=30)
    theta = default_hyperparams(X, Y)
    extent = X.max(axis=0) - X.min(axis=0)
    assert theta.length_scale == pytest.approx(float(np.hypot(*extent)) / 4)
    assert theta.signal_variance == pytest.approx(np.var(Y))
    assert theta.noise_variance == pytest.approx(0.1 * np.var(Y))


def test_fit_rejects_bad_start():
    with pytest.raises(InputError):
        fit_gp(np.array([[0.0, 0.0]]), np.array([1.0]))  # single point
