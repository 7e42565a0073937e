# tests/test_nets.py
# Denoiser shapes, view-permutation behaviour and low-rank adapters

import copy

import pytest
import torch

from app.models.nets import (
    DenoiserConfig, EditCondition, LoRALinear, attach_lora, count_parameters, denoise,
    lora_parameter_names, lora_parameters, parameter_diff,
)
from app.services.nvs_service import NVSService
from app.utils.error_handler import DataValidationError, LoRAError, ShapeMismatchError
from app.utils.helpers import torch_generator


def clip_inputs(views, clip=(0, 1, 3)):
    cond = NVSService().build_condition(views).subset(clip)
    z = torch.randn(len(clip), 3, *views.res, generator=torch_generator(5))
    return z, cond


# === CONFIG ===

def test_denoiser_config_validation():
    with pytest.raises(DataValidationError):
        DenoiserConfig(latent_downscale=3)
    with pytest.raises(DataValidationError):
        DenoiserConfig(channels=8, heads=3, latent_downscale=2)
    with pytest.raises(DataValidationError):
        DenoiserConfig(depth=0)
    config = DenoiserConfig(channels=8, latent_downscale=4)
    assert config.levels == 2 and config.bottleneck_width == 32
    assert DenoiserConfig.from_dict(config.to_dict()) == config


# === MULTI-VIEW DENOISER ===

def test_teacher_output_shape(teacher, views):
    z, cond = clip_inputs(views)
    assert denoise(teacher.model, z, 10, cond).shape == z.shape


def test_teacher_rejects_mismatched_inputs(teacher, views):
    z, cond = clip_inputs(views)
    with pytest.raises(ShapeMismatchError):
        denoise(teacher.model, z[:, :2], 10, cond)
    with pytest.raises(ShapeMismatchError):
        denoise(teacher.model, z[:2], 10, cond)
    with pytest.raises(ShapeMismatchError):
        denoise(teacher.model, torch.zeros(3, 3, 15, 16), 10, cond)


def test_permuting_views_permutes_predictions(teacher, views):
    z, cond = clip_inputs(views, clip=(0, 1, 2, 3, 4))
    perm = [0, 3, 1, 4, 2]
    with torch.no_grad():
        out = denoise(teacher.model, z, 20, cond)
        permuted = denoise(teacher.model, z[perm], 20, cond.subset(perm))
    assert torch.allclose(permuted, out[perm], atol=1e-10)


def test_unconditional_branch_drops_reference(teacher, views):
    _, cond = clip_inputs(views)
    null = cond.null_like()
    assert null.ref_image is None
    assert torch.count_nonzero(null.render_maps) == 0
    assert torch.equal(null.camera_tag, cond.camera_tag)


# === EDITOR ===

def test_editor_eps_matches_its_x0_prediction(editor, views):
    model = editor.model
    src = torch.rand(2, 3, 16, 16, generator=torch_generator(0)) * 2 - 1
    z = torch.randn(2, 3, 16, 16, generator=torch_generator(1))
    cond = EditCondition(src, 1)
    with torch.no_grad():
        eps = denoise(model, z, 3, cond)
        x0, _ = model.denoised(z, 3, cond)
    alpha, sigma = editor.schedule.alpha(3), editor.schedule.sigma(3)
    assert torch.allclose(alpha * x0 + sigma * eps, z)


def test_editor_codes(editor):
    model = editor.model
    assert model.code_indices(None, 3, 'cpu').tolist() == [6, 6, 6]
    assert model.code_indices(2, 2, 'cpu').tolist() == [2, 2]
    assert model.code_indices(torch.tensor([1, 4]), 2, 'cpu').tolist() == [1, 4]
    with pytest.raises(ShapeMismatchError):
        model.denoised(torch.zeros(1, 3, 16, 16), 0, EditCondition(None, None))


# === LOW-RANK ADAPTERS ===

def test_lora_linear_starts_as_the_base_layer():
    base = torch.nn.Linear(16, 12)
    layer = LoRALinear(base, 4, generator=torch_generator(0))
    x = torch.randn(5, 16, generator=torch_generator(1))
    assert torch.equal(layer(x), base(x))
    assert torch.count_nonzero(layer.delta_weight()) == 0
    assert layer.lora_A.shape == (4, 16) and layer.lora_B.shape == (12, 4)


@pytest.mark.parametrize('rank', [0, 12, 20])
def test_lora_rank_bounds(rank):
    with pytest.raises(LoRAError):
        LoRALinear(torch.nn.Linear(16, 12), rank)


def test_temporal_adapters(teacher, views):
    model = copy.deepcopy(teacher.model)
    z, cond = clip_inputs(views)
    with torch.no_grad():
        before = denoise(model, z, 10, cond)
    attach_lora(model, 'temporal', 4, generator=torch_generator(0))

    # one temporal stage, four 16×16 projections, r·(d + k) each
    assert count_parameters(model, trainable_only=True) == 4 * 4 * (16 + 16)
    assert all('temporal_attn' in name for name in lora_parameter_names(model))
    assert all(p.requires_grad for p in lora_parameters(model))
    with torch.no_grad():
        assert torch.equal(denoise(model, z, 10, cond), before)
    assert parameter_diff(teacher.model, model) == []


def test_parameter_diff_sees_base_weight_changes(teacher):
    model = attach_lora(copy.deepcopy(teacher.model), 'temporal', 4)
    with torch.no_grad():
        model.backbone.blocks[0].temporal_attn.to_q.lora_B.fill_(1.0)
    assert parameter_diff(teacher.model, model) == []
    with torch.no_grad():
        model.backbone.blocks[0].temporal_attn.to_q.base.weight.add_(1.0)
    assert parameter_diff(teacher.model, model) == ['backbone.blocks.0.temporal_attn.to_q.weight']


def test_adapter_filters(editor):
    with pytest.raises(LoRAError):
        attach_lora(copy.deepcopy(editor.model), 'temporal', 4)
    with pytest.raises(LoRAError):
        attach_lora(copy.deepcopy(editor.model), 'cross', 4)
    model = attach_lora(copy.deepcopy(editor.model), 'self_attention', 4)
    assert lora_parameter_names(model)
    assert all('self_attn' in name for name in lora_parameter_names(model))


# === VIEW MIXING ===

def silence_temporal_attention(model):
    with torch.no_grad():
        for stage in model.backbone.blocks:
            stage.temporal_attn.to_out.weight.zero_()
            stage.temporal_attn.to_out.bias.zero_()
    return model


def test_temporal_attention_is_the_only_path_between_views(teacher, views):
    z, cond = clip_inputs(views, clip=(0, 1, 2, 3))
    bumped = z.clone()
    bumped[2] += torch.randn(bumped[2].shape, generator=torch_generator(9))
    with torch.no_grad():
        mixed = denoise(teacher.model, z, 15, cond) - denoise(teacher.model, bumped, 15, cond)
    assert mixed[[0, 1, 3]].abs().max() > 1e-8

    model = silence_temporal_attention(copy.deepcopy(teacher.model))
    with torch.no_grad():
        change = denoise(model, z, 15, cond) - denoise(model, bumped, 15, cond)
    assert change[2].abs().max() > 1e-8
    assert torch.allclose(change[[0, 1, 3]], torch.zeros_like(change[[0, 1, 3]]), atol=1e-12)


def test_editor_views_are_independent(editor):
    src = torch.rand(3, 3, 16, 16, generator=torch_generator(0)) * 2 - 1
    z = torch.randn(3, 3, 16, 16, generator=torch_generator(1))
    bumped_src, bumped_z = src.clone(), z.clone()
    bumped_src[1] = -bumped_src[1]
    bumped_z[1] += 0.5
    with torch.no_grad():
        out = denoise(editor.model, z, 2, EditCondition(src, 1))
        again = denoise(editor.model, bumped_z, 2, EditCondition(bumped_src, 1))
        alone = denoise(editor.model, z[[0]], 2, EditCondition(src[[0]], 1))
    assert not torch.allclose(out[1], again[1])
    assert torch.allclose(out[[0, 2]], again[[0, 2]], atol=1e-12)
    assert torch.allclose(out[[0]], alone, atol=1e-12)


# === FINITE DIFFERENCES ===

def finite_difference_check(param, loss_fn, entries, step=1e-4):
    """Autograd vs central differences on a few entries of one parameter"""
    param.requires_grad_(True)
    grad, = torch.autograd.grad(loss_fn(), param)
    analytic, numeric = [], []
    for index in entries:
        original = param.data[index].item()
        with torch.no_grad():
            param.data[index] = original + step
            plus = loss_fn().item()
            param.data[index] = original - step
            minus = loss_fn().item()
            param.data[index] = original
        analytic.append(grad[index].item())
        numeric.append((plus - minus) / (2 * step))
    analytic, numeric = torch.tensor(analytic), torch.tensor(numeric)
    return ((analytic - numeric).norm() / analytic.norm()).item()


def test_teacher_adapter_gradients_match_finite_differences(teacher, views):
    model = attach_lora(copy.deepcopy(teacher.model), 'temporal', 4, generator=torch_generator(0))
    adapter = model.backbone.blocks[0].temporal_attn.to_v
    with torch.no_grad():
        adapter.lora_B.copy_(0.1 * torch.randn(adapter.lora_B.shape, generator=torch_generator(3)))
    z, cond = clip_inputs(views)
    weights = torch.randn(z.shape, generator=torch_generator(4))

    def loss():
        return (denoise(model, z, 12, cond) * weights).sum()

    entries = [(0, 0), (5, 3), (7, 2), (15, 1)]
    assert finite_difference_check(adapter.lora_B, loss, entries) <= 1e-3
    assert finite_difference_check(adapter.lora_A, loss, [(0, 1), (2, 9), (3, 15)]) <= 1e-3


def test_editor_weight_gradients_match_finite_differences(editor):
    model = copy.deepcopy(editor.model)
    src = torch.rand(2, 3, 16, 16, generator=torch_generator(0)) * 2 - 1
    z = torch.randn(2, 3, 16, 16, generator=torch_generator(1))
    weights = torch.randn(z.shape, generator=torch_generator(2))

    def loss():
        return (denoise(model, z, 3, EditCondition(src, 2)) * weights).sum()

    conv = model.backbone.in_conv.weight
    assert finite_difference_check(conv, loss, [(0, 0, 1, 1), (3, 4, 0, 2), (7, 5, 2, 0)]) <= 1e-3
    assert finite_difference_check(model.code_embed.weight, loss, [(2, 0), (2, 5)]) <= 1e-3
