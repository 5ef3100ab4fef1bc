import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import multivariate_normal

from surroseg.errors import InvalidParameter, NumericalError, ResourceError
from surroseg.gp import (
    GpModel,
    KernelSpec,
    Predictions,
    cholesky_with_jitter,
    compute_sigma_matrix,
    fit_exact_gp_grid,
    generate_query_points,
    kernel_eval,
    kernel_grad,
    kernel_matrix,
    load_model,
    log_marginal_likelihood,
    predict,
    predict_many,
    read_predictions,
    save_model,
    sensitivity_bound,
    write_predictions,
)
from surroseg.graph import SpatialDataset


def random_model(rng, rho=None, d=None, family="rbf"):
    rho = int(rng.integers(1, 6)) if rho is None else rho
    d = int(rng.integers(1, 4)) if d is None else d
    spec = KernelSpec(family, tuple(rng.uniform(0.5, 4.0, d)), float(rng.uniform(0.5, 2.0)))
    Z = rng.random((rho, d))
    u0 = rng.standard_normal(rho)
    A = rng.standard_normal((rho, rho)) * 0.3
    S = A @ A.T + 0.05 * np.eye(rho)
    return GpModel(spec, Z, u0, S)


# kernels

def test_kernel_eval_examples():
    rbf = KernelSpec("rbf", (1.0, 1.0))
    assert kernel_eval(rbf, [0.3, 0.1], [0.3, 0.1]) == 1.0
    assert kernel_eval(rbf, [0, 0], [1, 0]) == pytest.approx(math.exp(-0.5), rel=1e-15)
    assert kernel_eval(rbf, [0, 0], [1, 0]) == pytest.approx(0.60653, abs=1e-5)
    ex = KernelSpec("exponential", (2.0,))
    assert kernel_eval(ex, [0.0], [1.0]) == pytest.approx(math.exp(-2.0), rel=1e-15)


def test_kernel_signal_and_white_noise():
    spec = KernelSpec("rbf", (1.0,), signal_variance=2.5, white_noise=0.5)
    X = np.array([[0.0], [1.0]])
    K = kernel_matrix(spec, X)
    assert K[0, 0] == 3.0 and K[0, 1] == pytest.approx(2.5 * math.exp(-0.5))
    # cross-covariances never carry white noise
    assert kernel_matrix(spec, X, X)[0, 0] == 2.5
    assert kernel_eval(spec, [0.0], [0.0]) == 2.5


def test_kernel_dimension_mismatch():
    with pytest.raises(InvalidParameter):
        kernel_eval(KernelSpec("rbf", (1.0, 1.0)), [0.0], [0.0])


@pytest.mark.parametrize("kw", [dict(family="matern"), dict(theta=(0.0,)), dict(signal_variance=0.0),
                                dict(white_noise=-1.0)])
def test_kernel_spec_validation(kw):
    base = dict(family="rbf", theta=(1.0,), signal_variance=1.0, white_noise=0.0)
    base.update(kw)
    with pytest.raises(InvalidParameter):
        KernelSpec(**base)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["rbf", "exponential"]))
def test_kernel_symmetry_and_gradient(seed, family):
    rng = np.random.default_rng(seed)
    d = int(rng.integers(1, 4))
    spec = KernelSpec(family, tuple(rng.uniform(0.5, 3, d)), 1.3)
    x, z = rng.random(d), rng.random(d)
    assert kernel_eval(spec, x, z) == pytest.approx(kernel_eval(spec, z, x), rel=1e-14)
    assert kernel_eval(spec, x, x) == pytest.approx(1.3)
    Z = rng.random((3, d))
    G = kernel_grad(spec, x, Z)
    h = 1e-6
    for i in range(d):
        e = np.zeros(d)
        e[i] = h
        fd = (kernel_matrix(spec, x + e, Z)[0] - kernel_matrix(spec, x - e, Z)[0]) / (2 * h)
        np.testing.assert_allclose(G[:, i], fd, rtol=1e-5, atol=1e-7)


def test_cholesky_jitter_escalation():
    M = np.ones((3, 3))  # rank one
    L, jit = cholesky_with_jitter(M)
    assert jit > 0
    np.testing.assert_allclose(L @ L.T, M + jit * np.eye(3), atol=1e-12)
    with pytest.raises(NumericalError):
        cholesky_with_jitter(-np.eye(2))


# prediction

def test_predict_single_inducing_point():
    spec = KernelSpec("rbf", (1.0,))
    a, s = 1.7, 0.3
    model = GpModel(spec, [[0.5]], [a], [[s]], jitter=0.0)
    mu, sigma2, eta = predict(model, [0.5])
    assert mu == pytest.approx(a, rel=1e-15) and eta == mu
    assert sigma2 == pytest.approx(s, rel=1e-12)
    x = [1.3]
    mu, _, _ = predict(model, x)
    assert mu == pytest.approx(a * kernel_eval(spec, x, [0.5]), rel=1e-14)


def test_predict_matches_dense_oracle():
    spec = KernelSpec("rbf", (1.5, 0.7), 1.2)
    Z = np.array([[0.0, 0.0], [0.6, 0.2]])
    u0 = np.array([1.0, -0.5])
    S = np.array([[0.2, 0.05], [0.05, 0.1]])
    model = GpModel(spec, Z, u0, S)
    K = kernel_matrix(spec, Z) + model.jitter * np.eye(2)
    Kinv = np.linalg.inv(K)
    for x in ([0.3, 0.3], [1.0, -1.0], [0.0, 0.0]):
        k = kernel_matrix(spec, np.array([x]), Z)[0]
        mu_ref = k @ Kinv @ u0
        s_ref = 1.2 - k @ Kinv @ k + k @ Kinv @ S @ Kinv @ k
        mu, s2, eta = predict(model, x)
        assert mu == pytest.approx(mu_ref, rel=1e-10)
        assert s2 == pytest.approx(s_ref, rel=1e-10)


@pytest.mark.parametrize("S", [[[1.0, 0.2], [0.0, 1.0]], [[1.0, 2.0], [2.0, 1.0]]])
def test_model_rejects_bad_S(S):
    with pytest.raises(InvalidParameter):
        GpModel(KernelSpec("rbf", (1.0,)), [[0.0], [1.0]], [0.0, 0.0], S)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_predictive_variance_positive(seed):
    rng = np.random.default_rng(seed)
    model = random_model(rng)
    X = rng.uniform(-1, 2, (20, model.d))
    assert np.all(predict_many(model, X).sigma2 > 0)


# dense covariance

def test_sigma_matrix_single_point_and_diagonal():
    rng = np.random.default_rng(1)
    model = random_model(rng, rho=3, d=2)
    X = rng.random((6, 2))
    S1 = compute_sigma_matrix(model, X[:1])
    assert S1.shape == (1, 1)
    assert S1[0, 0] == pytest.approx(predict(model, X[0])[1], rel=1e-12)
    Sig = compute_sigma_matrix(model, SpatialDataset(X))
    np.testing.assert_allclose(np.diag(Sig), predict_many(model, X).sigma2, rtol=1e-12)
    assert np.array_equal(Sig, Sig.T)


def test_sigma_matrix_positive_definite_small():
    rng = np.random.default_rng(2)
    model = random_model(rng, rho=3, d=2)
    Sig = compute_sigma_matrix(model, rng.random((4, 2)))
    assert np.all(np.linalg.eigvalsh(Sig) > 0)


def test_sigma_matrix_memory_budget():
    model = random_model(np.random.default_rng(0), rho=2, d=1)
    with pytest.raises(ResourceError):
        compute_sigma_matrix(model, np.zeros((100, 1)), max_bytes=1000)


# sensitivity bound

def test_sensitivity_formula_against_hand_computation():
    rng = np.random.default_rng(4)
    model = random_model(rng, rho=3, d=2)
    x = rng.random(2)
    nu1, nu2 = 0.7, 0.4
    bound = sensitivity_bound(model, x, nu1_abs=nu1, nu2_minus_nu0_abs=nu2)
    spec = model.kernel
    K = kernel_matrix(spec, model.Z) + model.jitter * np.eye(3)
    lam1 = np.linalg.eigvalsh(K).min()
    lam2 = np.linalg.eigvalsh(model.S_mat).max()
    k = kernel_matrix(spec, x[None], model.Z)[0]
    s2 = spec.signal_variance - k @ np.linalg.solve(K, k) + k @ np.linalg.solve(K, model.S_mat @ np.linalg.solve(K, k))
    theta = np.asarray(spec.theta)
    dk = -(theta ** 2) * (x - model.Z) * k[:, None]
    kappa1 = np.linalg.norm(dk, axis=0)
    ref = (np.linalg.norm(model.u0) * nu1 / (lam1 * math.sqrt(s2)) * kappa1
           + nu2 / (2 * s2) * (0 + 2 * np.linalg.norm(k) / lam1 * (1 + lam2 / lam1) * kappa1))
    np.testing.assert_allclose(bound, ref, rtol=1e-8)


def test_sensitivity_zero_mean_reduces_to_variance_term():
    model = GpModel(KernelSpec("rbf", (2.0,)), [[0.0], [1.0]], [0.0, 0.0], np.eye(2) * 0.1)
    x = [0.3]
    # identity link: nu2 - nu0 = 0, so a zero mean gives a zero bound
    assert np.all(sensitivity_bound(model, x) == 0.0)
    with_var = sensitivity_bound(model, x, nu2_minus_nu0_abs=1.0)
    only_var = sensitivity_bound(model, x, nu1_abs=0.0, nu2_minus_nu0_abs=1.0)
    np.testing.assert_allclose(with_var, only_var, rtol=1e-14)
    assert np.all(with_var > 0)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["rbf", "exponential"]))
def test_finite_difference_below_bound(seed, family):
    rng = np.random.default_rng(seed)
    model = random_model(rng, rho=2, family=family)
    h = 1e-5
    for x in rng.uniform(-0.5, 1.5, (100, model.d)):
        phi = sensitivity_bound(model, x)
        for i in range(model.d):
            e = np.zeros(model.d)
            e[i] = h
            fd = abs(predict(model, x + e)[2] - predict(model, x - e)[2]) / (2 * h)
            assert fd <= phi[i] * (1 + 1e-4) + 1e-12


# query points

def test_query_points_radius_zero_resamples_inputs():
    data = SpatialDataset([[0.0, 0.0], [1.0, 1.0], [5.0, 5.0]])
    out = generate_query_points(data, [1, 0, 1], 50, 0.0, seed=3)
    rows = {tuple(p) for p in out.points.tolist()}
    assert rows <= {(0.0, 0.0), (5.0, 5.0)}


def test_query_points_stay_within_radius_and_are_seeded():
    data = SpatialDataset([[2.0, -1.0]])
    a = generate_query_points(data, [3.0], 200, 0.25, seed=11)
    b = generate_query_points(data, [3.0], 200, 0.25, seed=11)
    assert a.points.tobytes() == b.points.tobytes()
    assert np.all(np.linalg.norm(a.points - [2.0, -1.0], axis=1) <= 0.25)


def test_query_points_reject_zero_weights():
    with pytest.raises(InvalidParameter):
        generate_query_points(SpatialDataset([[0.0], [1.0]]), [0, 0], 5, 0.1, 0)


# fitting

def test_log_marginal_likelihood_matches_scipy():
    rng = np.random.default_rng(5)
    X = rng.random((15, 2))
    y = rng.standard_normal(15)
    spec = KernelSpec("rbf", (2.0, 3.0), 0.8, 0.05)
    K = kernel_matrix(spec, X)
    ref = multivariate_normal(mean=np.zeros(15), cov=K).logpdf(y)
    assert log_marginal_likelihood(spec, X, y) == pytest.approx(ref, rel=1e-8)


def test_fit_single_candidate():
    rng = np.random.default_rng(0)
    data = SpatialDataset(rng.random((10, 1)), rng.standard_normal(10))
    spec = KernelSpec("rbf", (3.0,), 1.0, 0.1)
    model = fit_exact_gp_grid(data, [spec])
    assert model.kernel.theta == (3.0,) and model.noise_variance == 0.1
    assert model.kernel.white_noise == 0.0
    with pytest.raises(InvalidParameter):
        fit_exact_gp_grid(data, [])


def test_fit_recovers_length_scale_within_one_step():
    rng = np.random.default_rng(12)
    X = rng.random((150, 1))
    true = KernelSpec("rbf", (6.0,), 1.0, 1e-3)
    y = rng.multivariate_normal(np.zeros(150), kernel_matrix(true, X))
    grid_thetas = [1.5, 3.0, 6.0, 12.0, 24.0]
    grid = [KernelSpec("rbf", (t,), 1.0, 1e-3) for t in grid_thetas]
    model = fit_exact_gp_grid(SpatialDataset(X, y), grid)
    k = grid_thetas.index(model.kernel.theta[0])
    assert abs(k - grid_thetas.index(6.0)) <= 1


def test_fit_noise_only_data_prefers_largest_noise():
    rng = np.random.default_rng(8)
    X = rng.random((60, 1))
    y = rng.standard_normal(60)
    grid = [KernelSpec("rbf", (1.0,), 0.1, s) for s in (0.01, 0.1, 1.0)]
    scores = [multivariate_normal(np.zeros(60), kernel_matrix(g, X)).logpdf(y) for g in grid]
    assert int(np.argmax(scores)) == 2
    model = fit_exact_gp_grid(SpatialDataset(X, y), grid)
    assert model.noise_variance == 1.0


def test_fit_posterior_matches_exact_gp():
    rng = np.random.default_rng(9)
    X = rng.random((25, 2))
    y = np.sin(4 * X[:, 0]) + 0.1 * rng.standard_normal(25)
    spec = KernelSpec("rbf", (3.0, 3.0), 1.0, 0.01)
    model = fit_exact_gp_grid(SpatialDataset(X, y), [spec])
    Xs = rng.random((7, 2))
    latent = KernelSpec("rbf", (3.0, 3.0), 1.0, 0.0)
    Ky = kernel_matrix(latent, X) + 0.01 * np.eye(25)
    Ks = kernel_matrix(latent, Xs, X)
    mu_ref = Ks @ np.linalg.solve(Ky, y)
    var_ref = 1.0 - np.einsum("ij,ji->i", Ks, np.linalg.solve(Ky, Ks.T))
    pred = predict_many(model, Xs)
    np.testing.assert_allclose(pred.mu, mu_ref, rtol=1e-5, atol=1e-7)
    np.testing.assert_allclose(pred.sigma2, var_ref, rtol=1e-4, atol=1e-7)


# files

def test_model_and_prediction_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    model = random_model(rng, rho=4, d=2)
    save_model(model, tmp_path / "m.json")
    back = load_model(tmp_path / "m.json")
    assert back == model
    save_model(back, tmp_path / "m2.json")
    assert (tmp_path / "m.json").read_bytes() == (tmp_path / "m2.json").read_bytes()
    pred = predict_many(model, rng.random((9, 2)))
    write_predictions(pred, tmp_path / "p.csv")
    assert (tmp_path / "p.csv").read_text().splitlines()[0] == "id,eta,mu,sigma2"
    assert read_predictions(tmp_path / "p.csv") == pred
