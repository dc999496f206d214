import math

import numpy as np
import pytest

from tascforge.errors import NotEnoughObservations, NotPositiveDefinite
from tascforge.gp import (
    LENGTHSCALE_GRID,
    KernelParams,
    expected_improvement,
    fit,
    kernel,
    kernel_matrix,
    log_marginal_likelihood,
    optimize_hyperparams,
    posterior,
    posterior_batch,
)


def test_kernel_basics(rng):
    params = KernelParams.shared(3, 0.5, 2.0)
    x, y = rng.uniform(size=3), rng.uniform(size=3)
    assert kernel(params, x, x) == 2.0
    assert kernel(params, x, y) == kernel(params, y, x)
    far = KernelParams.shared(1, 1.0, 1.0)
    assert kernel(far, np.array([0.0]), np.array([100.0])) < 1e-300


def test_fit_single_point():
    model = fit(np.array([[0.3, 0.7]]), np.array([0.9]), KernelParams.shared(2, 0.5, 1.0))
    assert model.prior_mean == 0.9
    np.testing.assert_array_equal(model.alpha, [0.0])


def test_fit_duplicate_rows_without_noise():
    x = np.array([[0.1, 0.2], [0.1, 0.2]])
    with pytest.raises(NotPositiveDefinite):
        fit(x, np.array([0.5, 0.6]), KernelParams.shared(2, 0.5, 1.0))


def test_posterior_interpolates_and_reverts(rng):
    x = rng.uniform(size=(6, 3))
    y = rng.uniform(size=6)
    params = KernelParams.shared(3, 0.3, 1.0)
    model = fit(x, y, params)

    for xi, yi in zip(x, y, strict=True):
        mu, var = posterior(model, xi)
        assert mu == pytest.approx(yi, abs=1e-8)
        assert var <= 1e-6

    mu, var = posterior(model, np.full(3, 50.0))
    assert mu == pytest.approx(model.prior_mean, abs=1e-6)
    assert var == pytest.approx(1.0, abs=1e-6)


def test_posterior_matches_dense_inverse(rng):
    x = rng.uniform(size=(5, 2))
    y = rng.uniform(size=5)
    params = KernelParams(np.array([0.4, 0.7]), 0.8, 1e-4)
    model = fit(x, y, params)
    queries = rng.uniform(size=(7, 2))

    k = kernel_matrix(params, x, x) + 1e-4 * np.eye(5)
    k_inv = np.linalg.inv(k)
    k_star = kernel_matrix(params, queries, x)
    expected_mu = y.mean() + k_star @ k_inv @ (y - y.mean())
    expected_var = 0.8 - np.einsum("ij,jk,ik->i", k_star, k_inv, k_star)

    mu, var = posterior_batch(model, queries)
    np.testing.assert_allclose(mu, expected_mu, atol=1e-9)
    np.testing.assert_allclose(var, expected_var, atol=1e-9)
    assert np.all(var <= 0.8 + 1e-9)


def test_expected_improvement_closed_form():
    assert expected_improvement(0.5, 1.0, 0.5) == pytest.approx(1.0 / math.sqrt(2.0 * math.pi), abs=1e-6)
    assert expected_improvement(0.4, 0.0, 0.5) == 0.0
    assert expected_improvement(0.8, 0.0, 0.5) == pytest.approx(0.3)


def test_expected_improvement_matches_monte_carlo(rng):
    z = rng.standard_normal(200_000)
    for _ in range(20):
        mu, sigma, f_best = rng.uniform(-1, 1), rng.uniform(0.05, 1.0), rng.uniform(-1, 1)
        samples = np.maximum(mu + sigma * z - f_best, 0.0)
        standard_error = samples.std() / math.sqrt(samples.size)
        assert abs(expected_improvement(mu, sigma**2, f_best) - samples.mean()) <= 5 * standard_error + 1e-12


def test_expected_improvement_monotone(rng):
    mus = np.linspace(-1, 1, 50)
    ei = expected_improvement(mus, np.full(50, 0.25), 0.0)
    assert np.all(ei >= 0.0)
    assert np.all(np.diff(ei) >= 0.0)

    sigmas = np.linspace(0.0, 2.0, 50)
    ei = expected_improvement(np.full(50, -0.3), sigmas**2, 0.0)
    assert np.all(np.diff(ei) >= -1e-15)


def test_log_marginal_likelihood_prefers_smooth_lengthscale(rng):
    x = rng.uniform(size=(8, 1))
    y = np.sin(6 * x[:, 0])
    smooth = log_marginal_likelihood(x, y, KernelParams.shared(1, 0.2, 1.0, 1e-6))
    rough = log_marginal_likelihood(x, y, KernelParams.shared(1, 0.001, 1.0, 1e-6))
    assert smooth > rough


def test_optimize_constant_targets_prefers_largest_lengthscale():
    x = np.array([[0.0], [0.5], [1.0]])
    params = optimize_hyperparams(x, np.full(3, 0.7))
    assert params.lengthscales[0] == max(LENGTHSCALE_GRID)


def test_optimize_recovers_lengthscale_bracket(rng):
    x = rng.uniform(size=(40, 1))
    true = KernelParams.shared(1, 0.2, 1.0)
    cov = kernel_matrix(true, x, x) + 1e-8 * np.eye(40)
    y = np.linalg.cholesky(cov) @ rng.standard_normal(40)
    params = optimize_hyperparams(x, y)
    assert params.lengthscales[0] in (0.1, 0.2, 0.5)


def test_optimize_needs_two_points():
    with pytest.raises(NotEnoughObservations):
        optimize_hyperparams(np.array([[0.1]]), np.array([0.4]))
