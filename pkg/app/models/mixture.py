# app/models/mixture.py
# Analytic distributions for the gradient oracle: diagonal Gaussian mixtures
# and linear Gaussian generators, with closed-form (noised) scores

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from app.utils.error_handler import DataValidationError, SingularCovarianceError


@dataclass(frozen=True)
class MixtureModel:
    """
    Σ_k w_k N(μ_k, diag(v_k))

    weights: k, means: k×D, variances: k×D (all float64)
    """
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        mu = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        var = np.atleast_2d(np.asarray(self.variances, dtype=np.float64))
        if abs(w.sum() - 1.0) > 1e-12 or np.any(w < 0):
            raise DataValidationError(f"mixture weights must lie on the simplex, got {w}")
        if mu.shape != var.shape or mu.shape[0] != w.shape[0]:
            raise DataValidationError(f"weights {w.shape}, means {mu.shape} and variances {var.shape} disagree")
        if np.any(var <= 0):
            raise DataValidationError("mixture variances must be positive")
        object.__setattr__(self, 'weights', w)
        object.__setattr__(self, 'means', mu)
        object.__setattr__(self, 'variances', var)

    @property
    def k(self):
        return int(self.weights.shape[0])

    @property
    def dim(self):
        return int(self.means.shape[1])

    def _component_log_densities(self, x):
        x = np.atleast_2d(x)
        diff = x[:, None, :] - self.means[None]
        quad = np.sum(diff ** 2 / self.variances[None], axis=-1)
        log_norm = -0.5 * np.sum(np.log(2.0 * np.pi * self.variances), axis=-1)
        return np.log(self.weights)[None] + log_norm[None] - 0.5 * quad

    def log_density(self, x):
        return logsumexp(self._component_log_densities(x), axis=1)

    def responsibilities(self, x):
        logs = self._component_log_densities(x)
        return np.exp(logs - logsumexp(logs, axis=1, keepdims=True))

    def score(self, x):
        """∇_x log p(x), one row per point"""
        x = np.atleast_2d(x)
        resp = self.responsibilities(x)
        per_component = (self.means[None] - x[:, None, :]) / self.variances[None]
        return np.sum(resp[..., None] * per_component, axis=1)

    def noised(self, alpha, sigma):
        """Law of α·x + σ·ε with x ~ self, ε ~ N(0, I)"""
        return MixtureModel(self.weights, alpha * self.means, alpha ** 2 * self.variances + sigma ** 2)

    def sample(self, n, rng):
        comp = rng.choice(self.k, size=n, p=self.weights)
        return self.means[comp] + np.sqrt(self.variances[comp]) * rng.standard_normal((n, self.dim))


def gaussian(mean, variance=1.0):
    """Single diagonal Gaussian as a one-component mixture"""
    mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
    variance = np.broadcast_to(np.asarray(variance, dtype=np.float64), mean.shape)
    return MixtureModel(np.ones(1), mean[None], np.array(variance)[None])


@dataclass(frozen=True)
class LinearGenerator:
    """x = W z + b with z ~ N(0, I), i.e. x ~ N(b, W Wᵀ)"""
    W: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        W = np.atleast_2d(np.asarray(self.W, dtype=np.float64))
        b = np.atleast_1d(np.asarray(self.b, dtype=np.float64))
        if W.shape != (b.shape[0], b.shape[0]):
            raise DataValidationError(f"W must be D×D for D={b.shape[0]}, got {W.shape}")
        if not np.all(np.isfinite(W)) or not np.all(np.isfinite(b)):
            raise DataValidationError("generator parameters must be finite")
        object.__setattr__(self, 'W', W)
        object.__setattr__(self, 'b', b)

    @property
    def dim(self):
        return int(self.b.shape[0])

    @property
    def covariance(self):
        return self.W @ self.W.T

    def generate(self, z):
        return z @ self.W.T + self.b

    def check_nonsingular(self, tol=1e-10):
        if abs(np.linalg.det(self.W)) < tol:
            raise SingularCovarianceError("generator covariance W Wᵀ is singular",
                                          diagnostics={'det_W': float(np.linalg.det(self.W))})

    def noised_score(self, x, alpha=1.0, sigma=0.0):
        """Score of the law of α·x + σ·ε: N(αb, α²WWᵀ + σ²I)"""
        cov = alpha ** 2 * self.covariance + sigma ** 2 * np.eye(self.dim)
        if abs(np.linalg.det(cov)) < 1e-300:
            raise SingularCovarianceError("noised generator covariance is singular")
        return -np.linalg.solve(cov, (np.atleast_2d(x) - alpha * self.b).T).T
