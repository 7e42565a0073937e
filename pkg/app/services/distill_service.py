# app/services/distill_service.py
# Stage 2: consistency distillation from the fine-tuned multi-view teacher
# into the editor's self-attention adapters, alternating with updates of the
# edited-score network φ

import copy
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np
import pandas as pd
import torch
from tqdm import tqdm

from app.models.nets import ConditionSignal, denoise, lora_parameter_names, lora_parameters
from app.services.base_service import BaseService
from app.services.editor_service import EditorHandle, EditorService, source_latents_of
from app.services.file_lock_service import file_lock_service
from app.services.metrics_service import MetricsService
from app.services.nvs_service import NVSService, TeacherHandle, eps_mse
from app.utils.error_handler import DataValidationError, ShapeMismatchError
from app.utils.helpers import from_latent, randint, tensor_to_images

logger = logging.getLogger(__name__)

OMEGA_KINDS = ('const', 'sigma_sq')
HISTORY_COLUMNS = ['iter', 'L_distill_surrogate', 'L_reg', 'L_total', 'consistency_metric']


@dataclass(frozen=True)
class DistillConfig:
    alpha: float = 1e2
    lr: float = 4e-4
    iters: int = 100
    omega_kind: str = 'sigma_sq'
    t_range_frac: tuple = (0.02, 0.98)
    phi_steps_per_theta_step: int = 1
    cfg_teacher: float = 3.0
    rank: int = 32

    def __post_init__(self):
        if self.alpha < 0:
            raise DataValidationError("alpha must be non-negative")
        if self.iters < 1:
            raise DataValidationError("iters must be at least 1")
        if self.omega_kind not in OMEGA_KINDS:
            raise DataValidationError(f"omega must be one of {OMEGA_KINDS}")
        if self.phi_steps_per_theta_step < 1:
            raise DataValidationError("phi_steps_per_theta_step must be at least 1")

    @classmethod
    def from_section(cls, section):
        return cls(alpha=section.alpha, lr=section.lr, iters=section.iters, omega_kind=section.omega,
                   t_range_frac=tuple(section.t_range_frac),
                   phi_steps_per_theta_step=section.phi_steps_per_theta_step,
                   cfg_teacher=section.cfg_teacher, rank=section.rank)


@dataclass
class DistillState:
    """
    Everything Stage 2 carries from one iteration to the next

    teacher is never updated; phi starts as an exact copy of it with every
    parameter trainable; ref_cache is the reference edit of the initial
    editor with ref_noise as its z_T.
    """
    editor: EditorHandle
    phi: TeacherHandle
    teacher: TeacherHandle
    cond_e: ConditionSignal
    ref_source: torch.Tensor
    ref_cache: torch.Tensor
    ref_noise: torch.Tensor
    theta_optimizer: torch.optim.Optimizer
    phi_optimizer: torch.optim.Optimizer
    clip_layout: List[List[int]] = field(default_factory=list)
    iteration: int = 0
    history: List[dict] = field(default_factory=list)

    @property
    def ref_image(self):
        """Cached reference edit as an H×W×3 image"""
        return tensor_to_images(from_latent(self.ref_cache))[0]

    def history_frame(self):
        return pd.DataFrame(self.history)


def omega(schedule, t, kind='sigma_sq'):
    """Weight of the score difference: σ_t²/α_t, or 1"""
    if kind == 'const':
        return 1.0
    if kind == 'sigma_sq':
        return schedule.sigma(t) ** 2 / schedule.alpha(t)
    raise DataValidationError(f"unknown omega kind {kind!r}")


def reg_loss(current_ref_edit, cached_ref_edit):
    """Mean squared difference over every pixel and channel"""
    if current_ref_edit.shape != cached_ref_edit.shape:
        raise ShapeMismatchError(f"{tuple(current_ref_edit.shape)} vs {tuple(cached_ref_edit.shape)}")
    return torch.mean((current_ref_edit - cached_ref_edit) ** 2)


def distill_surrogate(latents, eps_teacher, eps_phi, weight):
    """
    Loss whose θ-gradient is weight·(ε_teacher − ε_φ)·∂latents/∂θ

    The score difference is a constant of the graph; the sum is normalised by
    the pixel count H·W.
    """
    difference = (weight * (eps_teacher - eps_phi)).detach()
    h, w = latents.shape[-2:]
    return torch.sum(difference * latents) / (h * w)


class DistillService(BaseService):
    """Stage-2 state initialisation, the alternating iteration and its log"""

    def __init__(self, cache=None, nvs=None, editor=None, metrics=None):
        super().__init__(cache)
        self.nvs = nvs or NVSService(cache)
        self.editor_service = editor or EditorService(cache)
        self.metrics = metrics or MetricsService(cache)

    # === STATE ===

    def init_state(self, teacher, editor, views, code, cfg, config, generator=None):
        """
        Attach θ to a copy of the pretrained editor, cache the reference edit
        of the initial editor and duplicate the teacher into φ

        Args:
            teacher (TeacherHandle): Stage-1 teacher (not modified)
            editor (EditorHandle): pretrained editor without adapters
            views (ViewSet): source views
            code (int): edit code
            cfg (SamplerConfig): editor sampling
            config (DistillConfig): Stage-2 hyperparameters

        Returns:
            DistillState
        """
        student = self.editor_service.with_lora(editor, config.rank, generator)
        ref_source = source_latents_of(views.images[views.ref_index][None])
        with torch.no_grad():
            ref_cache, ref_noise = self.editor_service.edit_reference(student, ref_source, code, cfg, generator)

        frozen = teacher.frozen_copy()
        phi_model = copy.deepcopy(frozen.model)
        for p in phi_model.parameters():
            p.requires_grad_(True)
        phi = TeacherHandle(phi_model, frozen.schedule, frozen.lora_rank)

        state = DistillState(
            editor=student,
            phi=phi,
            teacher=frozen,
            cond_e=None,
            ref_source=ref_source,
            ref_cache=ref_cache.detach(),
            ref_noise=ref_noise,
            theta_optimizer=torch.optim.Adam(lora_parameters(student.model), lr=config.lr),
            phi_optimizer=torch.optim.Adam(phi_model.parameters(), lr=config.lr),
            clip_layout=[list(clip) for clip in views.clip_layout],
        )
        state.cond_e = self.nvs.build_condition(views, ref_image=state.ref_image).detach()
        self._log_operation("init_state", f"code={code}, θ adapters={len(lora_parameter_names(student.model))}, "
                                          f"φ params={sum(p.numel() for p in phi_model.parameters())}")
        return state

    # === SCORES ===

    def _clip_scores(self, state, latents, t, eps, config):
        """
        Teacher (guided) and φ (unguided) noise predictions for every clip

        Returns:
            tuple: (ε_teacher, ε_φ) over all N views, views shared by several
            clips averaged
        """
        z_e = state.teacher.schedule.forward(latents.detach(), t, eps=eps).z_t
        eps_teacher = torch.zeros_like(z_e)
        eps_phi = torch.zeros_like(z_e)
        counts = torch.zeros(z_e.shape[0], dtype=z_e.dtype)
        with torch.no_grad():
            for clip in state.clip_layout:
                cond = state.cond_e.subset(clip)
                eps_teacher[clip] += NVSService.teacher_cfg_eps(state.teacher, z_e[clip], t, cond, config.cfg_teacher)
                eps_phi[clip] += denoise(state.phi.model, z_e[clip], t, cond)
                counts[clip] += 1
        scale = counts[:, None, None, None]
        return eps_teacher / scale, eps_phi / scale

    def distill_grad(self, state, edit_batch, t, eps, omega_kind='sigma_sq', config=None):
        """
        θ-gradient of the distillation term for a fixed (t, ε)

        Returns:
            dict: adapter name → gradient tensor (zeros for unused adapters)
        """
        config = config or DistillConfig(omega_kind=omega_kind)
        weight = omega(state.teacher.schedule, t, omega_kind)
        eps_teacher, eps_phi = self._clip_scores(state, edit_batch.latents, t, eps, config)
        surrogate = distill_surrogate(edit_batch.latents, eps_teacher, eps_phi, weight)
        names = lora_parameter_names(state.editor.model)
        params = lora_parameters(state.editor.model)
        grads = torch.autograd.grad(surrogate, params, allow_unused=True)
        return {name: torch.zeros_like(p) if g is None else g for name, p, g in zip(names, params, grads)}

    # === UPDATES ===

    def phi_update(self, state, edit_batch, config, generator=None):
        """
        Denoising steps of φ on the detached edited batch, t over the full range

        Returns:
            float: loss of the last φ step
        """
        latents = edit_batch.latents.detach()
        schedule = state.phi.schedule
        loss_value = float('nan')
        for _ in range(config.phi_steps_per_theta_step):
            t = randint(1, schedule.T, generator)
            noised = schedule.forward(latents, t, generator)
            loss = 0.0
            clips = state.clip_layout
            for clip in clips:
                eps_hat = denoise(state.phi.model, noised.z_t[clip], t, state.cond_e.subset(clip))
                loss = loss + eps_mse(eps_hat, noised.eps[clip])
            loss = loss / len(clips)
            self._check_finite("L_phi", loss, iteration=state.iteration, t=t)
            state.phi_optimizer.zero_grad()
            loss.backward()
            state.phi_optimizer.step()
            loss_value = float(loss.detach())
        return loss_value

    def train_step(self, state, views, code, cfg, config, generator=None):
        """
        One Stage-2 iteration

        ReFL sample of every view → distillation surrogate at a random t →
        re-edit of the reference with the cached noise, tracked at the same
        step → θ step on L_distill + α·L_reg → φ step on the detached batch.

        Returns:
            dict: the history row of the iteration
        """
        batch = self.editor_service.refl_sample(state.editor, source_latents_of(views), code, cfg, generator)
        schedule = state.teacher.schedule
        t = schedule.sample_t_uniform(*config.t_range_frac, generator=generator)
        eps = torch.randn(batch.latents.shape, generator=generator, dtype=batch.latents.dtype)

        weight = omega(schedule, t, config.omega_kind)
        eps_teacher, eps_phi = self._clip_scores(state, batch.latents, t, eps, config)
        surrogate = distill_surrogate(batch.latents, eps_teacher, eps_phi, weight)

        if config.alpha > 0:
            ref_edit, _ = self.editor_service.edit_reference(
                state.editor, state.ref_source, code, cfg, noise=state.ref_noise, track_step=batch.grad_step)
            l_reg = reg_loss(ref_edit, state.ref_cache)
            total = surrogate + config.alpha * l_reg
        else:
            with torch.no_grad():
                ref_edit, _ = self.editor_service.edit_reference(
                    state.editor, state.ref_source, code, cfg, noise=state.ref_noise)
                l_reg = reg_loss(ref_edit, state.ref_cache)
            total = surrogate

        diagnostics = {'iteration': state.iteration, 't': t, 'grad_step': batch.grad_step}
        self._check_finite("L_distill_surrogate", surrogate, **diagnostics)
        self._check_finite("L_reg", l_reg, **diagnostics)
        state.theta_optimizer.zero_grad()
        total.backward()
        state.theta_optimizer.step()

        l_phi = self.phi_update(state, batch.detached(), config, generator)
        consistency = self.metrics.reproj_inconsistency(views.with_images(batch.export())).value

        row = {
            'iter': state.iteration,
            'L_distill_surrogate': float(surrogate.detach()),
            'L_reg': float(l_reg.detach()),
            'consistency_metric': consistency,
            'L_phi': l_phi,
            't': t,
            'grad_step': batch.grad_step,
        }
        row['L_total'] = row['L_distill_surrogate'] + config.alpha * row['L_reg']
        state.history.append(row)
        state.iteration += 1
        return row

    def distill(self, state, views, code, cfg, config, generator=None, log_path=None):
        """
        Run config.iters iterations, appending each row to log_path as it goes

        Returns:
            DistillState
        """
        self._log_operation("distill", f"{config.iters} iters, α={config.alpha}, ω={config.omega_kind}, "
                                       f"teacher cfg={config.cfg_teacher}")
        for _ in tqdm(range(config.iters), desc="distill", disable=not self.show_progress):
            row = self.train_step(state, views, code, cfg, config, generator)
            if log_path is not None:
                write_history(log_path, state.history)
            if row['iter'] % 10 == 0:
                logger.info(f"distill iter {row['iter']}: surrogate {row['L_distill_surrogate']:.4e}, "
                            f"reg {row['L_reg']:.4e}, reproj {row['consistency_metric']:.4f}")
        return state

    def edited_views(self, state, views, code, cfg, generator=None):
        """Final edit of every view by the current editor (no gradients)"""
        return views.with_images(self.editor_service.sample(state.editor, views, code, cfg, generator))


def write_history(path, history, columns: Optional[list] = None):
    """Per-iteration log as CSV (written atomically)"""
    columns = columns or HISTORY_COLUMNS
    frame = pd.DataFrame(history, columns=columns)
    file_lock_service.atomic_write(Path(path), lambda tmp: frame.to_csv(tmp, index=False))
    return frame


def read_history(path):
    return pd.read_csv(path)


def theta_phi_overlap(state):
    """Parameters shared by θ and φ (always empty)"""
    theta = {id(p) for p in lora_parameters(state.editor.model)}
    return [p for p in state.phi.model.parameters() if id(p) in theta]


def mean_abs_drift(state, code, cfg, editor_service=None):
    """Mean absolute pixel change of the reference edit w.r.t. the cached one"""
    service = editor_service or EditorService()
    with torch.no_grad():
        current, _ = service.edit_reference(state.editor, state.ref_source, code, cfg, noise=state.ref_noise)
    return float(np.mean(np.abs(tensor_to_images(from_latent(current)) - tensor_to_images(from_latent(state.ref_cache)))))
