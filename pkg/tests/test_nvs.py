# tests/test_nvs.py
# Teacher conditioning, Stage-1 adapters and clip sampling

import numpy as np
import pytest
import torch

from app.models.nets import denoise, lora_parameters, parameter_diff
from app.services.nvs_service import NVSService, camera_tags
from app.utils.error_handler import DataValidationError
from app.utils.helpers import torch_generator


@pytest.fixture
def nvs():
    return NVSService()


def test_condition_shapes(nvs, views):
    cond = nvs.build_condition(views)
    assert cond.render_maps.shape == (5, 4, 16, 16)
    assert cond.ref_image.shape == (3, 16, 16)
    assert cond.camera_tag.shape == (5, 12)
    validity = cond.render_maps[:, 3]
    assert set(torch.unique(validity).tolist()) <= {0.0, 1.0}
    # warped colours are zeroed outside the validity mask
    assert torch.count_nonzero(cond.render_maps[:, :3] * (1 - validity[:, None])) == 0


def test_reference_camera_tag_is_identity(views):
    tags = camera_tags(views)
    assert torch.allclose(tags[0], torch.cat([torch.eye(3).reshape(-1), torch.zeros(3)]))
    assert not torch.allclose(tags[1], tags[0])


def test_edited_reference_enters_the_condition(nvs, views):
    edited = np.clip(views.images[0] + 0.2, 0.0, 1.0)
    cond = nvs.build_condition(views, ref_image=edited)
    plain = nvs.build_condition(views)
    assert torch.equal(cond.render_maps[:, 3], plain.render_maps[:, 3])
    assert not torch.allclose(cond.ref_image, plain.ref_image)


def test_cfg_scale(teacher, nvs, views):
    cond = nvs.build_condition(views).subset([0, 1, 3])
    z = torch.randn(3, 3, 16, 16, generator=torch_generator(0))
    with torch.no_grad():
        eps_c = denoise(teacher.model, z, 30, cond)
        eps_u = denoise(teacher.model, z, 30, cond.null_like())
        assert torch.equal(nvs.teacher_cfg_eps(teacher, z, 30, cond, 1.0), eps_c)
        guided = nvs.teacher_cfg_eps(teacher, z, 30, cond, 3.0)
    assert torch.allclose(guided, eps_u + 3.0 * (eps_c - eps_u))


def test_stage1_zero_iterations_returns_the_teacher(teacher, nvs, views):
    assert nvs.finetune_stage1(teacher, views, iters=0) is teacher


def test_stage1_trains_only_temporal_adapters(teacher, nvs, views):
    adapted = nvs.finetune_stage1(teacher, views, iters=3, lr=1e-2, rank=4, generator=torch_generator(0))
    assert adapted is not teacher
    assert adapted.lora_rank == 4
    assert len(adapted.history) == 3
    assert parameter_diff(teacher.model, adapted.model) == []
    assert lora_parameters(teacher.model) == []
    trained = [p for name, p in adapted.model.named_parameters() if name.endswith('lora_B')]
    assert any(torch.count_nonzero(p) for p in trained)
    assert not any(p.requires_grad for p in adapted.model.parameters())


def test_pretraining_needs_eight_scenes(nvs, views):
    with pytest.raises(DataValidationError):
        nvs.pretrain_base([views] * 7, steps=1)


def test_sample_clip_is_reproducible(teacher, nvs, views):
    cond = nvs.build_condition(views).subset([0, 2, 4])
    a = nvs.sample_clip(teacher, cond, torch_generator(3), steps=5)
    b = nvs.sample_clip(teacher, cond, torch_generator(3), steps=5)
    assert a.shape == (3, 16, 16, 3)
    assert np.array_equal(a, b)
    assert a.min() >= 0.0 and a.max() <= 1.0


def test_sample_views_keeps_the_reference(teacher, nvs, views):
    edited = np.full((16, 16, 3), 0.25)
    out = nvs.sample_views(teacher, views, ref_image=edited, generator=torch_generator(0), steps=3)
    assert out.shape == views.images.shape
    assert np.array_equal(out[0], edited)


@pytest.mark.slow
def test_pretraining_reduces_the_loss(nvs):
    from tests.conftest import tiny_denoiser_config, tiny_world

    worlds = [tiny_world(seed=s, n_views=5)[2] for s in range(8)]
    teacher = nvs.pretrain_base(worlds, steps=300, config=tiny_denoiser_config(50), lr=2e-3,
                                clip_views=3, T=50, generator=torch_generator(0))
    assert np.mean(teacher.history[-50:]) < np.mean(teacher.history[:50])
