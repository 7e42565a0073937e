# app/services/oracle_service.py
# Gradient oracle: closed-form and Monte Carlo KL gradients of a linear
# Gaussian generator towards an analytic target, compared with the
# score-difference estimator used by the distillation

import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd

from app.models.mixture import LinearGenerator, MixtureModel, gaussian
from app.models.schedule import ddpm_linear
from app.services.base_service import BaseService
from app.utils.error_handler import DataValidationError
from app.utils.helpers import cosine

logger = logging.getLogger(__name__)

ORACLE_COLUMNS = ['D', 'k', 'n', 't', 'cosine', 'rel_err', 'SE']
CHUNK = 100_000


@dataclass
class GradEstimate:
    """Gradient w.r.t. (W, b) with per-entry standard errors (zero for closed forms)"""
    grad_W: np.ndarray
    grad_b: np.ndarray
    se_W: np.ndarray
    se_b: np.ndarray
    n: int = 0
    t: int = 0

    @property
    def flat(self):
        return np.concatenate([self.grad_W.reshape(-1), self.grad_b])

    @property
    def flat_se(self):
        return np.concatenate([self.se_W.reshape(-1), self.se_b])


def score(model, x):
    return model.score(x)


def _standard_error(samples):
    return samples.std(axis=0, ddof=1) / np.sqrt(samples.shape[0])


def _moments(total, total_sq, n):
    mean = total / n
    var = np.maximum(total_sq / n - mean ** 2, 0.0)
    return mean, np.sqrt(var / max(n - 1, 1))


def analytic_kl_grad(gen, target, reference_samples=1_000_000, rng=None):
    """
    Gradient of KL(N(b, WWᵀ) ‖ target) w.r.t. (W, b)

    Single Gaussian target N(μ, diag Λ): ∂b = Λ⁻¹(b − μ), ∂W = Λ⁻¹W − W⁻ᵀ.
    Mixtures: ∂b = −E[s_p(x)], ∂W = −E[s_p(x) zᵀ] − W⁻ᵀ with a Monte Carlo
    expectation over reference_samples draws (standard errors reported).

    Raises:
        SingularCovarianceError: W Wᵀ singular
    """
    gen.check_nonsingular()
    w_inv_t = np.linalg.inv(gen.W).T
    if target.k == 1:
        lam_inv = 1.0 / target.variances[0]
        grad_b = lam_inv * (gen.b - target.means[0])
        grad_W = lam_inv[:, None] * gen.W - w_inv_t
        zeros = np.zeros_like
        return GradEstimate(grad_W, grad_b, zeros(grad_W), zeros(grad_b))

    rng = rng or np.random.default_rng(0)
    d = gen.dim
    sum_b, sq_b = np.zeros(d), np.zeros(d)
    sum_W, sq_W = np.zeros((d, d)), np.zeros((d, d))
    remaining = int(reference_samples)
    while remaining > 0:
        n = min(CHUNK, remaining)
        z = rng.standard_normal((n, d))
        s = target.score(gen.generate(z))
        gb = -s
        gW = -s[:, :, None] * z[:, None, :]
        sum_b += gb.sum(0)
        sq_b += (gb ** 2).sum(0)
        sum_W += gW.sum(0)
        sq_W += (gW ** 2).sum(0)
        remaining -= n
    grad_b, se_b = _moments(sum_b, sq_b, reference_samples)
    mean_W, se_W = _moments(sum_W, sq_W, reference_samples)
    return GradEstimate(mean_W - w_inv_t, grad_b, se_W, se_b, int(reference_samples))


def estimate_vsd_grad(gen, target, n_samples, noise_t=0, schedule=None, rng=None, weight=1.0):
    """
    Monte Carlo score-difference gradient

    Draws x = Wz + b and x_t = α_t x + σ_t ε, then averages
    weight·α_t·(s_gen,t(x_t) − s_target,t(x_t)) contracted with ∂x/∂(W, b).
    Both scores are the exact noised scores. At t = 0 the estimate is
    unbiased for the KL gradient.

    Returns:
        GradEstimate
    """
    if n_samples < 2:
        raise DataValidationError("n_samples must be at least 2")
    schedule = schedule or ddpm_linear(1000)
    alpha, sigma = schedule.alpha(noise_t), schedule.sigma(noise_t)
    rng = rng or np.random.default_rng(0)
    d = gen.dim
    z = rng.standard_normal((n_samples, d))
    x = gen.generate(z)
    x_t = alpha * x + sigma * rng.standard_normal((n_samples, d)) if sigma > 0 else x
    target_t = target.noised(alpha, sigma)
    g = weight * alpha * (gen.noised_score(x_t, alpha, sigma) - target_t.score(x_t))
    per_W = g[:, :, None] * z[:, None, :]
    return GradEstimate(per_W.mean(0), g.mean(0), _standard_error(per_W), _standard_error(g),
                        int(n_samples), int(noise_t))


def symmetric_mixture(dim, k, spread=1.5, variance=0.5):
    """k equal-weight components on a circle of radius spread (first two axes)"""
    if k == 1:
        return gaussian(np.zeros(dim), variance)
    angles = 2.0 * np.pi * np.arange(k) / k
    means = np.zeros((k, dim))
    means[:, 0] = spread * np.cos(angles)
    if dim > 1:
        means[:, 1] = spread * np.sin(angles)
    return MixtureModel(np.full(k, 1.0 / k), means, np.full((k, dim), variance))


def default_generator(dim, rng):
    W = 0.8 * np.eye(dim) + 0.1 * rng.standard_normal((dim, dim))
    b = 0.7 * rng.standard_normal(dim)
    return LinearGenerator(W, b)


class OracleService(BaseService):
    """Sweep of the estimator against the reference gradient"""

    def sweep(self, dims, components, n_samples, noise_fracs, reference_samples=1_000_000, seed=0, T=1000):
        """
        One row per (D, k, t): cosine and relative error of the estimate
        against the reference gradient, and the RMS standard error

        Returns:
            pd.DataFrame: columns D, k, n, t, cosine, rel_err, SE
        """
        schedule = ddpm_linear(T)
        rows = []
        for dim in dims:
            for k in components:
                rng = np.random.default_rng([seed, dim, k])
                gen = default_generator(dim, rng)
                target = symmetric_mixture(dim, k)
                reference = analytic_kl_grad(gen, target, reference_samples, rng)
                ref = reference.flat
                for frac in noise_fracs:
                    t = int(round(frac * T))
                    est = estimate_vsd_grad(gen, target, n_samples, t, schedule, rng)
                    cos = cosine(est.flat, ref)
                    rows.append({
                        'D': dim, 'k': k, 'n': n_samples, 't': t,
                        'cosine': np.nan if cos is None else cos,
                        'rel_err': float(np.linalg.norm(est.flat - ref) / max(np.linalg.norm(ref), 1e-300)),
                        'SE': float(np.sqrt(np.mean(est.flat_se ** 2))),
                    })
                    logger.debug(f"oracle D={dim} k={k} t={t}: cosine {rows[-1]['cosine']:.4f}")
        frame = pd.DataFrame(rows, columns=ORACLE_COLUMNS)
        self._log_operation("sweep", f"{len(frame)} rows, n={n_samples}")
        return frame
