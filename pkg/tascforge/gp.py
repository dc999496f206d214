"""
Gaussian-process regression over encoded head configs, and the Expected Improvement acquisition.

Kernel: squared exponential with per-dimension lengthscales. The prior mean is the empirical
mean of the observed accuracies.
"""

import itertools
import math
from dataclasses import dataclass

import numpy as np
import scipy.special
from loguru import logger

from tascforge.errors import DimensionMismatch, NotEnoughObservations, NotPositiveDefinite
from tascforge.tensor import Tensor, cho_solve, cholesky_with_jitter, triangular_solve

LENGTHSCALE_GRID = (0.05, 0.1, 0.2, 0.5, 1.0, 2.0)
SIGNAL_VARIANCE_GRID = (0.01, 0.1, 1.0)
GRID_NOISE_VARIANCE = 1e-6
DEGENERATE_SIGMA = 1e-12


@dataclass
class KernelParams:
    lengthscales: Tensor
    signal_variance: float
    noise_variance: float = 0.0

    def __post_init__(self):
        self.lengthscales = np.atleast_1d(np.asarray(self.lengthscales, dtype=np.float64))
        if np.any(self.lengthscales <= 0):
            raise ValueError("lengthscales must be positive")
        if self.signal_variance <= 0:
            raise ValueError("signal variance must be positive")
        if self.noise_variance < 0:
            raise ValueError("noise variance must be non-negative")

    @classmethod
    def shared(cls, dimension: int, lengthscale: float, signal_variance: float, noise_variance: float = 0.0):
        return cls(np.full(dimension, lengthscale), signal_variance, noise_variance)

    def lengthscales_for(self, dimension: int) -> Tensor:
        if self.lengthscales.shape[0] == 1:
            return np.full(dimension, self.lengthscales[0])
        if self.lengthscales.shape[0] != dimension:
            raise DimensionMismatch(
                f"kernel has {self.lengthscales.shape[0]} lengthscales, points have {dimension} dims"
            )
        return self.lengthscales


@dataclass(frozen=True)
class GPModel:
    x_train: Tensor
    y_train: Tensor
    prior_mean: float
    params: KernelParams
    chol: Tensor
    alpha: Tensor

    @property
    def dimension(self) -> int:
        return self.x_train.shape[1]


def kernel_matrix(params: KernelParams, a: Tensor, b: Tensor) -> Tensor:
    """Covariances between the rows of `a` (n×d) and `b` (m×d)."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[1] != b.shape[1]:
        raise DimensionMismatch(f"points have {a.shape[1]} and {b.shape[1]} dims")
    ls = params.lengthscales_for(a.shape[1])
    diff = (a[:, None, :] - b[None, :, :]) / ls
    return params.signal_variance * np.exp(-0.5 * np.sum(diff * diff, axis=-1))


def kernel(params: KernelParams, x1: Tensor, x2: Tensor) -> float:
    x1, x2 = np.asarray(x1, dtype=np.float64), np.asarray(x2, dtype=np.float64)
    if x1.shape != x2.shape:
        raise DimensionMismatch(f"points have shapes {x1.shape} and {x2.shape}")
    return float(kernel_matrix(params, x1[None, :], x2[None, :])[0, 0])


def _check_training_set(x_train: Tensor, y_train: Tensor) -> tuple[Tensor, Tensor]:
    x = np.atleast_2d(np.asarray(x_train, dtype=np.float64))
    y = np.asarray(y_train, dtype=np.float64).ravel()
    if x.shape[0] != y.shape[0]:
        raise DimensionMismatch(f"{x.shape[0]} training points but {y.shape[0]} targets")
    if x.shape[0] < 1:
        raise NotEnoughObservations("a GP needs at least one observation")
    return x, y


def fit(x_train: Tensor, y_train: Tensor, params: KernelParams) -> GPModel:
    x, y = _check_training_set(x_train, y_train)

    if params.noise_variance == 0.0 and np.unique(x, axis=0).shape[0] != x.shape[0]:
        raise NotPositiveDefinite("duplicate training inputs with zero noise variance")

    k = kernel_matrix(params, x, x) + params.noise_variance * np.eye(x.shape[0])
    chol, jitter = cholesky_with_jitter(k)
    if jitter > 0:
        logger.warning(f"GP kernel matrix needed jitter {jitter:g} to factorize")

    prior_mean = float(np.mean(y))
    alpha = cho_solve(chol, y - prior_mean)
    return GPModel(x, y, prior_mean, params, chol, alpha)


def posterior_batch(model: GPModel, xs: Tensor) -> tuple[Tensor, Tensor]:
    """Posterior means and variances at the rows of `xs`."""
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    if xs.shape[1] != model.dimension:
        raise DimensionMismatch(f"query points have {xs.shape[1]} dims, model has {model.dimension}")

    k_star = kernel_matrix(model.params, xs, model.x_train)
    mu = k_star @ model.alpha + model.prior_mean
    v = triangular_solve(model.chol, k_star.T)
    var = model.params.signal_variance - np.sum(v * v, axis=0)
    return mu, np.maximum(var, 0.0)


def posterior(model: GPModel, x: Tensor) -> tuple[float, float]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise DimensionMismatch(f"expected a single point, got shape {x.shape}")
    mu, var = posterior_batch(model, x[None, :])
    return float(mu[0]), float(var[0])


def _normal_cdf(z):
    return 0.5 * (1.0 + scipy.special.erf(z / math.sqrt(2.0)))


def _normal_pdf(z):
    return np.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)


def expected_improvement(mu, var, f_best: float):
    """
    Closed-form E[max(F(x) - f_best, 0)] under a normal posterior.

    Works elementwise on arrays; scalars in, float out.
    """
    mu_arr = np.asarray(mu, dtype=np.float64)
    sigma = np.sqrt(np.maximum(np.asarray(var, dtype=np.float64), 0.0))
    improvement = mu_arr - f_best

    degenerate = sigma < DEGENERATE_SIGMA
    safe_sigma = np.where(degenerate, 1.0, sigma)
    z = improvement / safe_sigma
    ei = improvement * _normal_cdf(z) + safe_sigma * _normal_pdf(z)
    ei = np.where(degenerate, np.maximum(improvement, 0.0), np.maximum(ei, 0.0))

    return float(ei) if ei.ndim == 0 else ei


def log_marginal_likelihood(x_train: Tensor, y_train: Tensor, params: KernelParams) -> float:
    """log p(y | X) = -½ rᵀK̃⁻¹r - ½ log|K̃| - (m/2) log 2π with r = y - mean(y)."""
    model = fit(x_train, y_train, params)
    r = model.y_train - model.prior_mean
    m = r.shape[0]
    return float(-0.5 * r @ model.alpha - np.sum(np.log(np.diag(model.chol))) - 0.5 * m * math.log(2.0 * math.pi))


def optimize_hyperparams(x_train: Tensor, y_train: Tensor) -> KernelParams:
    """
    Grid search of the log marginal likelihood over a shared lengthscale and the signal variance.

    Noise variance is fixed; ties go to the larger lengthscale.
    """
    x, y = _check_training_set(x_train, y_train)
    if x.shape[0] < 2:  # noqa: PLR2004
        raise NotEnoughObservations(f"kernel hyperparameter search needs at least 2 observations, got {x.shape[0]}")

    best: tuple[float, KernelParams] | None = None
    for lengthscale, signal_variance in itertools.product(sorted(LENGTHSCALE_GRID, reverse=True), SIGNAL_VARIANCE_GRID):
        params = KernelParams.shared(x.shape[1], lengthscale, signal_variance, GRID_NOISE_VARIANCE)
        try:
            score = log_marginal_likelihood(x, y, params)
        except NotPositiveDefinite:
            logger.debug(f"skipping grid cell lengthscale={lengthscale} signal={signal_variance}: not factorizable")
            continue
        if best is None or score > best[0]:
            best = (score, params)

    if best is None:
        raise NotPositiveDefinite("no kernel grid cell produced a factorizable covariance")

    score, params = best
    logger.debug(
        f"kernel hyperparameters: lengthscale={params.lengthscales[0]:g} "
        f"signal={params.signal_variance:g} log-likelihood={score:.4f}"
    )
    return params
