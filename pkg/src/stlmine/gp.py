"""
Gaussian-process regression over formula embeddings, with the UCB acquisition.

Fitting and prediction go through sklearn's GaussianProcessRegressor with a
ConstantKernel * Matern (+ WhiteKernel) covariance and normalized targets.
A torch view of the fitted posterior is kept for gradient-based acquisition.
"""
import math
import time
import warnings
from dataclasses import dataclass

import numpy as np
import torch
from sklearn.exceptions import ConvergenceWarning
from sklearn.gaussian_process import GaussianProcessRegressor
from sklearn.gaussian_process.kernels import ConstantKernel, Matern, Sum, WhiteKernel

from utils.logging_utils import get_logger

DTYPE = torch.float64
JITTER_STEPS = (0.0, 1e-10, 1e-8, 1e-6, 1e-4, 1e-2)
HYPER_BOUNDS = (1e-3, 1e3)


class GpFitError(ValueError):
    """Raised for unusable training data or a kernel matrix that stays singular after jitter."""


@dataclass(frozen=True)
class GpConfig:
    nu: float = 2.5
    noise_floor: float = 1e-6
    fit_hyperparameters: bool = True
    lengthscale: float = 1.0
    signal_variance: float = 1.0
    noise: float = None
    n_restarts: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.nu not in (0.5, 1.5, 2.5):
            raise ValueError(f"Matern smoothness must be 0.5, 1.5 or 2.5, got {self.nu}")
        if not (self.lengthscale > 0 and self.signal_variance > 0):
            raise ValueError("lengthscale and signal_variance must be positive")
        if self.noise is not None and self.noise < 0:
            raise ValueError("noise must be >= 0")
        if self.n_restarts < 0:
            raise ValueError("n_restarts must be >= 0")

    def make_kernel(self):
        """Covariance handed to the regressor; hyperparameters are fixed unless they are fitted."""
        if not self.fit_hyperparameters:
            return (ConstantKernel(self.signal_variance, constant_value_bounds="fixed")
                    * Matern(length_scale=self.lengthscale, length_scale_bounds="fixed", nu=self.nu))
        initial_noise = min(max(self.noise if self.noise is not None else 1e-2, self.noise_floor), 1.0)
        return (ConstantKernel(self.signal_variance, constant_value_bounds=HYPER_BOUNDS)
                * Matern(length_scale=self.lengthscale, length_scale_bounds=HYPER_BOUNDS, nu=self.nu)
                + WhiteKernel(noise_level=initial_noise, noise_level_bounds=(self.noise_floor, 1.0)))


def _split_kernel(kernel):
    """(ConstantKernel, Matern, WhiteKernel or None) of a fitted covariance."""
    if isinstance(kernel, Sum):
        return kernel.k1.k1, kernel.k1.k2, kernel.k2
    return kernel.k1, kernel.k2, None


def matern(sq, lengthscale, variance, nu=2.5, eps=0.0):
    """Matern covariance from squared distances; eps keeps sqrt differentiable at 0."""
    r = torch.sqrt(sq + eps) / lengthscale
    if nu == 0.5:
        return variance * torch.exp(-r)
    if nu == 1.5:
        s = math.sqrt(3.0) * r
        return variance * (1.0 + s) * torch.exp(-s)
    s = math.sqrt(5.0) * r
    return variance * (1.0 + s + s * s / 3.0) * torch.exp(-s)


def squared_distances(a, b):
    sq = (a * a).sum(-1)[:, None] + (b * b).sum(-1)[None, :] - 2.0 * a @ b.T
    return sq.clamp_min(0.0)


class GpModel:
    """A fitted regressor plus the quantities needed to differentiate its posterior."""

    def __init__(self, regressor, y, alpha, jitter):
        self.regressor = regressor
        self.y = y
        self.alpha = alpha
        self.jitter = jitter
        constant, kern, white = _split_kernel(regressor.kernel_)
        self.variance = float(constant.constant_value)
        self.lengthscale = float(kern.length_scale)
        self.nu = float(kern.nu)
        self.white = float(white.noise_level) if white is not None else 0.0
        self.noise = self.white if white is not None else alpha
        y_scale = float(y.std())
        self.y_mean = float(y.mean())
        self.y_scale = y_scale if y_scale >= 10 * np.finfo(np.float64).eps else 1.0

    @property
    def X(self):
        return self.regressor.X_train_

    @property
    def dim(self):
        return self.X.shape[1]

    @property
    def n_train(self):
        return self.X.shape[0]

    def hyperparameters(self):
        return {"lengthscale": self.lengthscale, "signal_variance": self.variance, "noise": self.noise,
                "jitter": self.jitter, "nu": self.nu}

    def _check(self, x):
        if x.shape[-1] != self.dim:
            raise ValueError(f"query dimension {x.shape[-1]} does not match training dimension {self.dim}")

    def posterior(self, x):
        """
        Posterior mean and variance at one point (d,) or a batch (m, d).

        Returns:
            (mean, variance) as floats for a single point, arrays for a batch
        """
        x_arr = np.asarray(x, dtype=np.float64)
        single = x_arr.ndim == 1
        x_arr = np.atleast_2d(x_arr)
        self._check(x_arr)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UserWarning)
            mean, std = self.regressor.predict(x_arr, return_std=True)
        var = np.square(std)
        return (float(mean[0]), float(var[0])) if single else (mean, var)

    def posterior_torch(self, x, differentiable=False):
        """Same posterior as `posterior`, as torch tensors for a (m, d) tensor input."""
        self._check(x)
        X = torch.as_tensor(self.X, dtype=DTYPE)
        eps = 1e-12 if differentiable else 0.0
        k_star = matern(squared_distances(x, X), self.lengthscale, self.variance, self.nu, eps)
        mean = k_star @ torch.as_tensor(self.regressor.alpha_, dtype=DTYPE).reshape(-1)
        chol = torch.as_tensor(self.regressor.L_, dtype=DTYPE)
        v = torch.linalg.solve_triangular(chol, k_star.T, upper=False)
        var = (self.variance + self.white - (v * v).sum(0)).clamp_min(0.0)
        return self.y_mean + self.y_scale * mean, (self.y_scale ** 2) * var

    def ucb(self, x, beta):
        mean, var = self.posterior(x)
        return mean + math.sqrt(beta) * np.sqrt(var)


class GaussianProcess:
    """Fits GpModel instances under a fixed configuration."""

    def __init__(self, config=None):
        self.config = config or GpConfig()
        self.logger = get_logger("gp")

    def _regressor(self, alpha):
        cfg = self.config
        return GaussianProcessRegressor(
            kernel=cfg.make_kernel(),
            alpha=alpha,
            optimizer="fmin_l_bfgs_b" if cfg.fit_hyperparameters else None,
            n_restarts_optimizer=cfg.n_restarts if cfg.fit_hyperparameters else 0,
            normalize_y=True,
            random_state=cfg.seed,
        )

    def fit(self, X, y):
        """
        Fit a GP to embeddings X (n, d) and targets y (n,).

        Raises:
            GpFitError: fewer than two points, non-finite targets or a singular kernel matrix
        """
        cfg = self.config
        X_arr = np.asarray(X, dtype=np.float64)
        y_arr = np.asarray(y, dtype=np.float64).reshape(-1)
        if X_arr.ndim != 2 or len(X_arr) != len(y_arr) or len(y_arr) < 2:
            raise GpFitError(f"need at least two (x, y) pairs of matching length, got X {X_arr.shape}, "
                             f"y {y_arr.shape}")
        if not np.all(np.isfinite(y_arr)):
            raise GpFitError("targets must be finite")

        start_time = time.time()
        if cfg.fit_hyperparameters:
            base = 1e-10
        else:
            base = cfg.noise if cfg.noise is not None else cfg.noise_floor
        for jitter in JITTER_STEPS:
            alpha = base + jitter * cfg.signal_variance
            regressor = self._regressor(alpha)
            try:
                with warnings.catch_warnings(record=True) as caught:
                    warnings.simplefilter("always", ConvergenceWarning)
                    regressor.fit(X_arr, y_arr)
            except np.linalg.LinAlgError:
                self.logger.debug(f"Kernel matrix singular with jitter {jitter:g}; retrying")
                continue
            for warning in caught:
                if issubclass(warning.category, ConvergenceWarning):
                    self.logger.debug(f"GP hyperparameter search: {warning.message}")
            model = GpModel(regressor, y_arr, alpha, jitter * cfg.signal_variance)
            elapsed = time.time() - start_time
            self.logger.debug(f"GP fit on {len(y_arr)} points: lengthscale={model.lengthscale:.4g}, "
                              f"variance={model.variance:.4g}, noise={model.noise:.3g} in {elapsed:.2f}s")
            return model
        raise GpFitError(f"kernel matrix not positive definite after jitter up to {JITTER_STEPS[-1]:g}")


def gp_fit(X, y, config=None):
    """Fit a GP model (see GaussianProcess.fit)."""
    return GaussianProcess(config).fit(X, y)


def gp_posterior(model, x):
    """Posterior (mean, variance) of a fitted model at x."""
    return model.posterior(x)


def ucb(mean, variance, beta):
    """mu + sqrt(beta) * sigma."""
    return np.asarray(mean) + math.sqrt(beta) * np.sqrt(np.maximum(variance, 0.0))


def beta_schedule(iteration, cap=16.0, constant=None):
    """beta_t = min(2 log(t^2 pi^2 / 0.6), cap), or a constant override."""
    if constant is not None:
        return float(constant)
    t = max(1, int(iteration))
    return min(2.0 * math.log(t * t * math.pi ** 2 / 0.6), cap)
