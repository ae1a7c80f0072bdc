"""
Tests for Gaussian-process regression and the UCB acquisition.
"""
import math

import numpy as np
import pytest
import torch
from sklearn.gaussian_process import GaussianProcessRegressor

from stlmine.gp import GpConfig, GpFitError, beta_schedule, gp_fit, gp_posterior, ucb

FIXED = GpConfig(fit_hyperparameters=False, lengthscale=1.0, signal_variance=1.0, noise=0.0)


def matern52(r):
    s = math.sqrt(5.0) * r
    return (1.0 + s + s * s / 3.0) * math.exp(-s)


def dense_posterior(X, y, x, lengthscale, variance, noise):
    """Textbook GP posterior with standardized targets, by dense linear algebra."""
    mean_y, scale = y.mean(), y.std()
    z = (y - mean_y) / scale

    def cov(a, b):
        return np.array([[variance * matern52(np.linalg.norm(p - q) / lengthscale) for q in b] for p in a])

    K = cov(X, X) + noise * np.eye(len(X))
    k_star = cov(x, X)
    mean = k_star @ np.linalg.solve(K, z)
    var = variance - np.sum(k_star * np.linalg.solve(K, k_star.T).T, axis=1)
    return mean_y + scale * mean, scale ** 2 * var


def test_two_point_closed_form():
    print("\n=== TESTING GP CLOSED FORM ===")
    X = np.array([[0.0], [1.0]])
    model = gp_fit(X, [0.0, 2.0], FIXED)
    k1, kh = matern52(1.0), matern52(0.5)

    mean, var = gp_posterior(model, [0.5])
    assert mean == pytest.approx(1.0, abs=1e-12)
    assert var == pytest.approx(1.0 - 2.0 * kh ** 2 / (1.0 + k1), abs=1e-10)

    mean0, var0 = model.posterior(np.array([0.0]))
    assert mean0 == pytest.approx(0.0, abs=1e-9), "Noiseless GP interpolates its training data"
    assert var0 == pytest.approx(0.0, abs=1e-9)


def test_matches_dense_oracle():
    """Twenty random problems with up to 50 points in up to 100 dimensions."""
    print("\n=== TESTING GP AGAINST DENSE ALGEBRA ===")
    rng = np.random.default_rng(0)
    for trial in range(20):
        n, d = int(rng.integers(2, 51)), int(rng.integers(1, 101))
        X = rng.uniform(-1.0, 1.0, size=(n, d))
        y = rng.normal(size=n) * 3.0 + 1.0
        lengthscale, variance = float(rng.uniform(0.5, 3.0)) * np.sqrt(d), float(rng.uniform(0.5, 2.0))
        config = GpConfig(fit_hyperparameters=False, lengthscale=lengthscale, signal_variance=variance, noise=1e-3)
        model = gp_fit(X, y, config)
        queries = rng.uniform(-1.0, 1.0, size=(5, d))
        mean, var = model.posterior(queries)
        expected_mean, expected_var = dense_posterior(X, y, queries, lengthscale, variance, 1e-3)
        assert np.allclose(mean, expected_mean, rtol=1e-7, atol=1e-8), f"mean differs on trial {trial} (n={n}, d={d})"
        assert np.allclose(var, expected_var, rtol=1e-7, atol=1e-8), f"variance differs on trial {trial} (n={n}, d={d})"


def test_torch_posterior_agrees_with_regressor():
    rng = np.random.default_rng(4)
    X = rng.uniform(-1.0, 1.0, size=(12, 5))
    y = np.sin(X.sum(axis=1))
    for config in (FIXED, GpConfig(seed=1)):
        model = gp_fit(X, y, config)
        queries = rng.uniform(-1.0, 1.0, size=(7, 5))
        mean, var = model.posterior(queries)
        with torch.no_grad():
            t_mean, t_var = model.posterior_torch(torch.as_tensor(queries))
        assert np.allclose(t_mean.numpy(), mean, atol=1e-8)
        assert np.allclose(t_var.numpy(), var, atol=1e-8)
    assert isinstance(model.regressor, GaussianProcessRegressor)


def test_far_point_reverts_to_prior():
    X = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    y = np.array([1.0, 4.0, -2.0])
    model = gp_fit(X, y, FIXED)
    mean, var = model.posterior([1e3, 1e3])
    assert mean == pytest.approx(y.mean(), abs=1e-9)
    assert var == pytest.approx(y.std() ** 2, rel=1e-9)


def test_ucb_is_monotone_in_beta():
    rng = np.random.default_rng(1)
    model = gp_fit(rng.normal(size=(8, 2)), rng.normal(size=8), FIXED)
    points = rng.normal(size=(20, 2))
    low, high = model.ucb(points, 0.5), model.ucb(points, 4.0)
    assert np.all(high >= low)
    mean, var = model.posterior(points)
    assert np.allclose(ucb(mean, var, 0.0), mean)
    assert np.allclose(ucb(mean, var, 4.0), mean + 2.0 * np.sqrt(var))


def test_beta_schedule():
    assert beta_schedule(1) == pytest.approx(2.0 * math.log(math.pi ** 2 / 0.6))
    assert beta_schedule(10) == pytest.approx(2.0 * math.log(100 * math.pi ** 2 / 0.6))
    assert beta_schedule(1000) == 16.0
    assert beta_schedule(100) == 16.0 and beta_schedule(100, cap=30.0) < 30.0
    assert beta_schedule(3, constant=2.0) == 2.0
    assert beta_schedule(0) == beta_schedule(1)


def test_hyperparameter_fit():
    print("\n=== TESTING GP HYPERPARAMETER FIT ===")
    X = np.linspace(0.0, 5.0, 15)[:, None]
    y = np.sin(X[:, 0])
    model = gp_fit(X, y, GpConfig(seed=3))
    params = model.hyperparameters()
    print(f"fitted hyperparameters: {params}")
    assert all(math.isfinite(params[name]) and params[name] > 0
               for name in ("lengthscale", "signal_variance", "noise"))
    assert params["noise"] >= GpConfig().noise_floor * (1.0 - 1e-9)
    mean, _ = model.posterior(X)
    assert np.max(np.abs(mean - y)) < 0.3

    again = gp_fit(X, y, GpConfig(seed=3)).hyperparameters()
    assert again == params, "Seeded restarts make the fit deterministic"


def test_fit_errors():
    with pytest.raises(GpFitError):
        gp_fit(np.zeros((1, 2)), [1.0], FIXED)
    with pytest.raises(GpFitError):
        gp_fit(np.zeros((3, 2)), [1.0, 2.0], FIXED)
    with pytest.raises(GpFitError):
        gp_fit(np.eye(3), [1.0, float("nan"), 0.0], FIXED)
    model = gp_fit(np.eye(3), [1.0, 2.0, 0.0], FIXED)
    with pytest.raises(ValueError):
        model.posterior(np.zeros(4))
    with pytest.raises(ValueError):
        GpConfig(nu=2.0)


def test_constant_targets_are_accepted():
    model = gp_fit(np.eye(3), [2.0, 2.0, 2.0], FIXED)
    mean, _ = model.posterior(np.array([0.3, 0.3, 0.3]))
    assert mean == pytest.approx(2.0, abs=1e-12)
