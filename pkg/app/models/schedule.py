# app/models/schedule.py
# Discrete-time noise schedules shared by every denoiser
# Coefficients are stored for t = 0..T with t = 0 noise-free

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from app.utils.error_handler import DataValidationError, ScheduleRangeError

SCHEDULE_KINDS = ('ddpm_linear', 'edm')


@dataclass
class NoisedLatent:
    """z_t = α_t·z_0 + σ_t·ε together with the sampled ε"""
    z_t: torch.Tensor
    t: int
    eps: torch.Tensor


@dataclass(frozen=True)
class NoiseSchedule:
    """
    Coefficients (α_t, σ_t) for t = 0..T

    Both kinds are variance preserving: α_t² + σ_t² = 1. 'edm' maps the
    Karras σ ladder onto that form with α = 1/√(1+s²), σ = s/√(1+s²).
    """
    kind: str
    T: int
    alphas: np.ndarray
    sigmas: np.ndarray
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise DataValidationError(f"unknown schedule kind {self.kind!r}")
        if self.alphas.shape != (self.T + 1,) or self.sigmas.shape != (self.T + 1,):
            raise DataValidationError("schedule arrays must have T + 1 entries")

    # === COEFFICIENTS ===

    def _check_t(self, t):
        if not 0 <= int(t) <= self.T:
            raise ScheduleRangeError(f"step {t} outside [0, {self.T}]")
        return int(t)

    def alpha(self, t):
        return float(self.alphas[self._check_t(t)])

    def sigma(self, t):
        return float(self.sigmas[self._check_t(t)])

    # === FORWARD PROCESS ===

    def forward(self, z0, t, generator=None, eps=None):
        """
        Noise a clean latent to step t

        Args:
            z0 (torch.Tensor): clean latent
            t (int): step in [0, T]
            generator (torch.Generator): RNG used when eps is not given
            eps (torch.Tensor, optional): noise to reuse

        Returns:
            NoisedLatent
        """
        t = self._check_t(t)
        if eps is None:
            eps = torch.randn(z0.shape, generator=generator, dtype=z0.dtype, device=z0.device)
        return NoisedLatent(z_t=float(self.alphas[t]) * z0 + float(self.sigmas[t]) * eps, t=t, eps=eps)

    def sample_t_uniform(self, lo_frac=0.02, hi_frac=0.98, generator=None):
        """Integer step uniform in [⌈lo·T⌉, ⌊hi·T⌋]"""
        lo, hi = self.t_range(lo_frac, hi_frac)
        return int(torch.randint(lo, hi + 1, (1,), generator=generator).item())

    def t_range(self, lo_frac, hi_frac):
        if not 0.0 <= lo_frac < hi_frac <= 1.0:
            raise DataValidationError(f"need 0 <= lo < hi <= 1, got ({lo_frac}, {hi_frac})")
        # rounding first keeps 0.02 * 1000 from landing on 20.000000000000004
        lo = math.ceil(round(lo_frac * self.T, 9))
        hi = math.floor(round(hi_frac * self.T, 9))
        if lo > hi:
            raise ScheduleRangeError(f"no integer step in [{lo_frac}·T, {hi_frac}·T] for T={self.T}")
        return lo, hi

    def eps_to_x0(self, z_t, eps_hat, t):
        """(z_t − σ_t·ε̂)/α_t, z_t itself at t = 0"""
        t = self._check_t(t)
        if t == 0:
            return z_t
        alpha = float(self.alphas[t])
        if alpha == 0.0:
            raise ScheduleRangeError(f"α_{t} is zero, x0 is not recoverable")
        return (z_t - float(self.sigmas[t]) * eps_hat) / alpha

    # === SAMPLING ===

    def step(self, z_t, eps_hat, t, t_prev, eta=0.0, generator=None):
        """
        One DDIM move from t to t_prev < t

        eta = 0 is deterministic; eta = 1 adds the ancestral noise.
        """
        t = self._check_t(t)
        t_prev = self._check_t(t_prev)
        if t_prev >= t:
            raise ScheduleRangeError(f"step must go down, got {t} -> {t_prev}")
        x0 = self.eps_to_x0(z_t, eps_hat, t)
        if t_prev == 0:
            return x0
        a_t, s_t = float(self.alphas[t]), float(self.sigmas[t])
        a_p, s_p = float(self.alphas[t_prev]), float(self.sigmas[t_prev])
        noise_std = eta * (s_p / s_t) * math.sqrt(max(0.0, 1.0 - (a_t / a_p) ** 2))
        direction = math.sqrt(max(0.0, s_p ** 2 - noise_std ** 2))
        z_prev = a_p * x0 + direction * eps_hat
        if noise_std > 0.0:
            z_prev = z_prev + noise_std * torch.randn(z_t.shape, generator=generator,
                                                      dtype=z_t.dtype, device=z_t.device)
        return z_prev

    def timesteps(self, steps=None):
        """Descending sampling steps from T down to 1"""
        steps = self.T if steps is None else int(steps)
        if not 1 <= steps <= self.T:
            raise ScheduleRangeError(f"steps must lie in [1, {self.T}], got {steps}")
        grid = np.round(np.linspace(self.T, 1, steps)).astype(int)
        ordered = []
        for t in grid:
            if not ordered or ordered[-1] != t:
                ordered.append(int(t))
        return ordered

    def to_dict(self):
        return {'kind': self.kind, 'T': self.T, 'params': dict(self.params)}


# === FACTORIES ===

def ddpm_linear(T=1000, beta_start=1e-4, beta_end=0.02):
    """DDPM schedule with linearly spaced β"""
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha_bar = np.cumprod(1.0 - betas)
    alphas = np.concatenate([[1.0], np.sqrt(alpha_bar)])
    sigmas = np.concatenate([[0.0], np.sqrt(1.0 - alpha_bar)])
    return NoiseSchedule('ddpm_linear', T, alphas, sigmas,
                         {'beta_start': beta_start, 'beta_end': beta_end})


def karras_sigmas(T, sigma_min=0.002, sigma_max=80.0, rho=7.0):
    """Karras noise levels for steps 1..T (ascending)"""
    ramp = np.linspace(0.0, 1.0, T, dtype=np.float64)
    min_inv = sigma_min ** (1.0 / rho)
    max_inv = sigma_max ** (1.0 / rho)
    return (min_inv + ramp * (max_inv - min_inv)) ** rho


def edm(T=20, sigma_min=0.002, sigma_max=80.0, rho=7.0):
    """Karras/EDM noise levels expressed as a variance-preserving schedule"""
    levels = np.concatenate([[0.0], karras_sigmas(T, sigma_min, sigma_max, rho)])
    scale = np.sqrt(1.0 + levels ** 2)
    return NoiseSchedule('edm', T, 1.0 / scale, levels / scale,
                         {'sigma_min': sigma_min, 'sigma_max': sigma_max, 'rho': rho})


def make_schedule(kind, T=None, **params):
    """Build a schedule by kind name"""
    if kind == 'ddpm_linear':
        return ddpm_linear(T or 1000, **params)
    if kind == 'edm':
        return edm(T or 20, **params)
    raise DataValidationError(f"unknown schedule kind {kind!r}")


def schedule_from_dict(data):
    return make_schedule(data['kind'], data['T'], **data.get('params', {}))
