# tests/test_schedule.py

import numpy as np
import pytest
import torch
from scipy import stats

from app.models.schedule import ddpm_linear, edm, make_schedule, schedule_from_dict
from app.utils.error_handler import DataValidationError, ScheduleRangeError
from app.utils.helpers import torch_generator


@pytest.mark.parametrize('schedule', [ddpm_linear(1000), edm(20)], ids=['ddpm_linear', 'edm'])
def test_variance_preserving(schedule):
    assert np.allclose(schedule.alphas ** 2 + schedule.sigmas ** 2, 1.0)
    assert schedule.alpha(0) == 1.0 and schedule.sigma(0) == 0.0
    assert np.all(np.diff(schedule.sigmas) > 0)


def test_forward_and_x0_recovery():
    schedule = ddpm_linear(100)
    z0 = torch.randn(2, 3, 8, 8, generator=torch_generator(0))
    noised = schedule.forward(z0, 40, generator=torch_generator(1))
    assert torch.allclose(noised.z_t, schedule.alpha(40) * z0 + schedule.sigma(40) * noised.eps)
    assert torch.allclose(schedule.eps_to_x0(noised.z_t, noised.eps, 40), z0)


def test_ddim_step_with_exact_noise_lands_on_the_forward_process():
    schedule = edm(20)
    z0 = torch.randn(1, 3, 4, 4, generator=torch_generator(0))
    eps = torch.randn(1, 3, 4, 4, generator=torch_generator(1))
    z_t = schedule.forward(z0, 15, eps=eps).z_t
    z_prev = schedule.step(z_t, eps, 15, 9)
    assert torch.allclose(z_prev, schedule.forward(z0, 9, eps=eps).z_t)
    assert torch.allclose(schedule.step(z_t, eps, 15, 0), z0)


def test_step_must_go_down():
    schedule = edm(20)
    z = torch.zeros(1, 3, 4, 4)
    with pytest.raises(ScheduleRangeError):
        schedule.step(z, z, 5, 5)
    with pytest.raises(ScheduleRangeError):
        schedule.step(z, z, 21, 3)


def test_out_of_range_steps():
    schedule = ddpm_linear(50)
    with pytest.raises(ScheduleRangeError):
        schedule.alpha(51)
    with pytest.raises(ScheduleRangeError):
        schedule.forward(torch.zeros(1), -1)
    with pytest.raises(ScheduleRangeError):
        schedule.timesteps(0)


def test_t_range():
    schedule = ddpm_linear(1000)
    assert schedule.t_range(0.02, 0.98) == (20, 980)
    generator = torch_generator(0)
    draws = [schedule.sample_t_uniform(0.02, 0.98, generator) for _ in range(200)]
    assert min(draws) >= 20 and max(draws) <= 980
    with pytest.raises(DataValidationError):
        schedule.t_range(0.5, 0.2)
    with pytest.raises(ScheduleRangeError):
        ddpm_linear(10).t_range(0.01, 0.05)


@pytest.mark.parametrize('schedule, steps', [(ddpm_linear(1000), (1, 500, 1000)), (edm(20), (1, 10, 20))],
                         ids=['ddpm_linear', 'edm'])
def test_forward_process_statistics(schedule, steps):
    n = 10_000
    z0 = torch.tensor([0.8, -0.3, 0.0, 1.5])
    for t in steps:
        z_t = schedule.forward(z0.expand(n, -1), t, generator=torch_generator(t)).z_t
        alpha, sigma = schedule.alpha(t), schedule.sigma(t)
        mean_se = sigma / np.sqrt(n)
        var_se = sigma ** 2 * np.sqrt(2.0 / (n - 1))
        assert torch.all((z_t.mean(dim=0) - alpha * z0).abs() <= 4 * mean_se)
        assert torch.all((z_t.var(dim=0) - sigma ** 2).abs() <= 4 * var_se)


def test_forward_with_zero_latent_is_pure_noise():
    schedule = ddpm_linear(100)
    zero = torch.zeros(2, 3, 4, 4)
    noised = schedule.forward(zero, 70, generator=torch_generator(0))
    assert torch.equal(noised.z_t, schedule.sigma(70) * noised.eps)
    assert torch.equal(schedule.forward(zero + 1.0, 0, generator=torch_generator(0)).z_t, zero + 1.0)


def test_sample_t_uniform_is_uniform():
    schedule = ddpm_linear(100)
    lo, hi = schedule.t_range(0.02, 0.98)
    generator = torch_generator(0)
    draws = np.array([schedule.sample_t_uniform(0.02, 0.98, generator) for _ in range(100_000)])
    assert draws.min() >= lo and draws.max() <= hi
    counts = np.bincount(draws - lo, minlength=hi - lo + 1)
    assert len(counts) == hi - lo + 1
    assert stats.chisquare(counts).pvalue > 1e-3


def test_single_step_range():
    schedule = ddpm_linear(50)
    assert schedule.t_range(0.5, 0.51) == (25, 25)
    generator = torch_generator(0)
    assert {schedule.sample_t_uniform(0.5, 0.51, generator) for _ in range(20)} == {25}


def test_timesteps():
    assert edm(20).timesteps(20) == list(range(20, 0, -1))
    ladder = ddpm_linear(1000).timesteps(50)
    assert ladder[0] == 1000 and ladder[-1] == 1
    assert all(a > b for a, b in zip(ladder, ladder[1:]))


def test_schedule_from_dict():
    schedule = edm(12, sigma_max=40.0)
    rebuilt = schedule_from_dict(schedule.to_dict())
    assert np.array_equal(rebuilt.sigmas, schedule.sigmas)
    with pytest.raises(DataValidationError):
        make_schedule('cosine')
