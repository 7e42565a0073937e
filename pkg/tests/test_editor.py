# tests/test_editor.py
# Dual guidance, few-step sampling and truncated-gradient sampling of the editor

import numpy as np
import pytest
import torch

from app.models.nets import EditCondition, denoise
from app.services.editor_service import EditorService, SamplerConfig, source_latents_of
from app.services.worldgen_service import generate_scene, make_trajectory
from app.utils.error_handler import DataValidationError, ScheduleRangeError
from app.utils.helpers import from_latent, tensor_to_images, torch_generator

from tests.conftest import tiny_denoiser_config


@pytest.fixture
def service():
    return EditorService()


@pytest.fixture
def student(service, editor):
    return service.with_lora(editor, rank=4, generator=torch_generator(2))


def test_sampler_config_validation():
    with pytest.raises(DataValidationError):
        SamplerConfig(refl_range=(0, 3))
    with pytest.raises(DataValidationError):
        SamplerConfig(steps=20, refl_range=(15, 25))
    with pytest.raises(DataValidationError):
        SamplerConfig(s_T=0.5)


# === GUIDANCE ===

def test_unit_scales_return_the_conditional_prediction(service, editor, views):
    src = source_latents_of(views)[:2]
    z = torch.randn(src.shape, generator=torch_generator(0))
    unit = SamplerConfig(s_T=1.0, s_I=1.0, steps=4, refl_range=(3, 4))
    with torch.no_grad():
        full = denoise(editor.model, z, 3, EditCondition(src, 1))
        assert torch.equal(service.cfg_eps(editor, z, 3, src, 1, unit), full)


def test_dual_guidance_combination(service, editor, views, sampler):
    src = source_latents_of(views)[:2]
    z = torch.randn(src.shape, generator=torch_generator(0))
    with torch.no_grad():
        full = denoise(editor.model, z, 2, EditCondition(src, 1))
        image = denoise(editor.model, z, 2, EditCondition(src, None))
        none = denoise(editor.model, z, 2, EditCondition(None, None))
        guided = service.cfg_eps(editor, z, 2, src, 1, sampler)
    expected = none + sampler.s_I * (image - none) + sampler.s_T * (full - image)
    assert torch.allclose(guided, expected)


# === SAMPLING ===

def test_sample_is_deterministic_given_noise(service, editor, views, sampler):
    noise = torch.randn(views.n, 3, 16, 16, generator=torch_generator(0))
    a = service.sample(editor, views, 1, sampler, noise=noise)
    b = service.sample(editor, views, 1, sampler, noise=noise.clone())
    assert a.shape == views.images.shape
    assert np.array_equal(a, b)


def test_more_steps_than_the_schedule(service, editor, views):
    with pytest.raises(ScheduleRangeError):
        service.sample(editor, views, 1, SamplerConfig(steps=8, refl_range=(1, 8)))


def test_refl_step_range(service, student, views, sampler):
    batch = service.refl_sample(student, views, 1, sampler, generator=torch_generator(0))
    assert batch.grad_step in (3, 4)
    assert batch.latents.shape == (views.n, 3, 16, 16)
    assert batch.latents.requires_grad and not batch.z_tracked.requires_grad
    with pytest.raises(ScheduleRangeError):
        service.refl_sample(student, views, 1, sampler, t=2)
    with pytest.raises(ScheduleRangeError):
        service.refl_sample(student, views, 1, SamplerConfig(steps=2, refl_range=(2, 2)))


def test_refl_gradient_reaches_only_b_at_initialisation(service, student, views, sampler):
    batch = service.refl_sample(student, views, 1, sampler, generator=torch_generator(0))
    batch.latents.sum().backward()
    grads = {name: p.grad for name, p in student.model.named_parameters() if p.requires_grad}
    assert grads
    for name, grad in grads.items():
        if name.endswith('lora_A'):
            assert grad is None or torch.count_nonzero(grad) == 0
    assert any(grad is not None and torch.count_nonzero(grad) for name, grad in grads.items()
               if name.endswith('lora_B'))


def test_refl_gradient_matches_finite_differences(service, student, views, sampler):
    noise = torch.randn(views.n, 3, 16, 16, generator=torch_generator(4))
    target = student.model.backbone.blocks[0].self_attn.to_v.lora_B

    def objective():
        batch = service.refl_sample(student, views, 1, sampler, noise=noise, t=4)
        return (batch.latents ** 2).sum()

    objective().backward()
    analytic = float(target.grad[3, 1])
    h = 1e-5
    with torch.no_grad():
        target[3, 1] += h
        up = float(objective())
        target[3, 1] -= 2 * h
        down = float(objective())
        target[3, 1] += h
    assert (up - down) / (2 * h) == pytest.approx(analytic, rel=1e-3, abs=1e-6)


def test_edit_reference_matches_sampling(service, editor, views, sampler):
    noise = torch.randn(1, 3, 16, 16, generator=torch_generator(6))
    z, z_T = service.edit_reference(editor, views.images[0], 2, sampler, noise=noise)
    assert z_T is noise
    sampled = service.sample(editor, views.images[:1], 2, sampler, noise=noise)
    assert np.allclose(tensor_to_images(from_latent(z)), sampled)


def test_tracked_edit_reference(service, student, views, sampler):
    noise = torch.randn(1, 3, 16, 16, generator=torch_generator(6))
    plain, _ = service.edit_reference(student, views.images[0], 2, sampler, noise=noise)
    tracked, _ = service.edit_reference(student, views.images[0], 2, sampler, noise=noise, track_step=3)
    assert not plain.requires_grad and tracked.requires_grad
    assert torch.allclose(plain, tracked)
    tracked.sum().backward()
    assert any(p.grad is not None and torch.count_nonzero(p.grad)
               for name, p in student.model.named_parameters() if name.endswith('lora_B'))
    with pytest.raises(ScheduleRangeError):
        service.edit_reference(student, views.images[0], 2, sampler, noise=noise, track_step=7)


def test_pretrain_editor_smoke(service):
    scene = generate_scene(2, 'small')
    traj = make_trajectory(n_views=2, azimuth_span_deg=20.0)
    editor = service.pretrain_editor([(scene, traj)], [1], steps=2, res=(16, 16),
                                     config=tiny_denoiser_config(4), batch=2, T=4,
                                     generator=torch_generator(0))
    assert len(editor.history) == 2
    assert not any(p.requires_grad for p in editor.model.parameters())
