# app/services/editor_service.py
# Instruction editor (student): pretraining on worldgen edit pairs, dual
# classifier-free guidance, few-step sampling and truncated-gradient (ReFL)
# sampling used by the distillation

import copy
import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import torch
from torch.func import functional_call
from tqdm import tqdm

from app.models.nets import DenoiserConfig, EditCondition, EditorDenoiser, attach_lora, denoise
from app.models.schedule import NoiseSchedule, edm
from app.services.base_service import BaseService
from app.services.worldgen_service import N_EDIT_CODES, get_oracle, render_views
from app.utils.error_handler import DataValidationError, ScheduleRangeError
from app.utils.helpers import from_latent, images_to_tensor, tensor_to_images, to_latent

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SamplerConfig:
    """Dual guidance scales, sampling steps and the ReFL step range [T_1, T_2]"""
    s_T: float = 7.5
    s_I: float = 1.5
    steps: int = 20
    refl_range: tuple = (15, 20)

    def __post_init__(self):
        t1, t2 = self.refl_range
        if not 1 <= t1 <= t2 <= self.steps:
            raise DataValidationError(f"refl_range {self.refl_range} must satisfy 1 <= T1 <= T2 <= {self.steps}")
        if self.s_T < 1.0 or self.s_I < 1.0:
            raise DataValidationError("guidance scales must be >= 1")


@dataclass
class EditorHandle:
    """Editor denoiser, its EDM schedule and the rank of its self-attention adapters"""
    model: EditorDenoiser
    schedule: NoiseSchedule
    lora_rank: int = 0
    history: List[float] = field(default_factory=list)


@dataclass
class EditBatch:
    """
    Output of one truncated-gradient sampling pass

    latents carry the graph of the single tracked step; z_tracked is the
    (gradient-free) input of that step. Values are never clamped here.
    """
    latents: torch.Tensor
    source_latents: torch.Tensor
    edit_code: int
    grad_step: int
    noise: torch.Tensor
    z_tracked: torch.Tensor
    ref_output: Optional[torch.Tensor] = None

    @property
    def images(self):
        return from_latent(self.latents)

    def detached(self):
        ref = None if self.ref_output is None else self.ref_output.detach()
        return EditBatch(self.latents.detach(), self.source_latents, self.edit_code, self.grad_step,
                         self.noise, self.z_tracked, ref)

    def export(self):
        """N×H×W×3 images clamped to [0, 1]"""
        return tensor_to_images(from_latent(self.latents.detach()))


def source_latents_of(source):
    """ViewSet or N×H×W×3 array → N×3×H×W latents"""
    images = source.images if hasattr(source, 'images') else source
    return to_latent(images_to_tensor(np.asarray(images)))


class EditorService(BaseService):
    """
    Student-side operations

    The editor is per view: a batch of V views is V independent edits.
    """

    # === CONSTRUCTION ===

    def build_editor(self, config, n_codes=N_EDIT_CODES, T=20, generator=None):
        schedule = edm(T)
        seed = int(torch.randint(0, 2 ** 31 - 1, (1,), generator=generator).item())
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            model = EditorDenoiser(config, n_codes, schedule)
        return EditorHandle(model, schedule)

    def with_lora(self, editor, rank=32, generator=None):
        """Copy of the editor with self-attention adapters (the distillation's θ)"""
        model = attach_lora(copy.deepcopy(editor.model), 'self_attention', rank, generator=generator)
        return EditorHandle(model, editor.schedule, rank)

    # === PRETRAINING ===

    def training_pairs(self, worlds, edit_codes, res):
        """
        (source, edited, code) triples rendered from ground-truth edits

        Args:
            worlds (list): (Scene, CameraTrajectory) pairs
            edit_codes (list[int]): registered codes
            res (tuple): (H, W)

        Returns:
            tuple: source N×H×W×3, edited N×H×W×3, codes N
        """
        sources, targets, codes = [], [], []
        for scene, traj in worlds:
            src = render_views(scene, traj, res).images
            for code in edit_codes:
                oracle = get_oracle(code)
                tgt = render_views(oracle.apply(scene), traj, res).images
                sources.append(src)
                targets.append(tgt)
                codes.append(np.full(len(src), code))
        return np.concatenate(sources), np.concatenate(targets), np.concatenate(codes)

    def pretrain_editor(self, worlds, edit_codes, steps, res, config=None, lr=2e-4, batch=16,
                        cond_dropout=0.1, T=20, generator=None):
        """
        Train the conditional editor on rendered edit pairs

        Image and code conditions are dropped independently with probability
        cond_dropout so that the three guidance branches exist. The loss is the
        preconditioned denoising loss ‖(D − x0)/c_out‖².

        Returns:
            EditorHandle: frozen pretrained editor
        """
        src, tgt, codes = self.training_pairs(worlds, edit_codes, res)
        config = config or DenoiserConfig(timesteps=T)
        editor = self.build_editor(config, N_EDIT_CODES, T, generator)
        model, schedule = editor.model, editor.schedule
        src_t = source_latents_of(src)
        tgt_t = source_latents_of(tgt)
        codes_t = torch.as_tensor(codes, dtype=torch.long)
        self._log_operation("pretrain_editor", f"{len(src)} pairs, {steps} steps, codes={list(edit_codes)}")

        optimizer = torch.optim.Adam(model.parameters(), lr=lr)
        model.train()
        for step in tqdm(range(steps), desc="pretrain editor", disable=not self.show_progress):
            idx = torch.randint(0, len(src), (batch,), generator=generator)
            x0 = tgt_t[idx]
            source = src_t[idx].clone()
            code = codes_t[idx].clone()
            drop_image = torch.rand(batch, generator=generator) < cond_dropout
            drop_code = torch.rand(batch, generator=generator) < cond_dropout
            source[drop_image] = 0.0
            code[drop_code] = model.n_codes

            t = torch.randint(1, schedule.T + 1, (batch,), generator=generator)
            eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
            alpha = torch.as_tensor(schedule.alphas, dtype=x0.dtype)[t][:, None, None, None]
            sigma = torch.as_tensor(schedule.sigmas, dtype=x0.dtype)[t][:, None, None, None]
            z_t = alpha * x0 + sigma * eps
            x0_hat, c_out = model.denoised(z_t, t, EditCondition(source, code))
            loss = torch.mean(((x0_hat - x0) / c_out) ** 2)
            self._check_finite("editor pretraining loss", loss, step=step)

            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            editor.history.append(float(loss.detach()))
            if step % 500 == 0:
                logger.info(f"pretrain editor step {step}: loss {float(loss):.4f}")

        model.eval()
        for p in model.parameters():
            p.requires_grad_(False)
        return editor

    # === GUIDANCE ===

    @staticmethod
    def cfg_eps(editor, z_t, t, source, code, cfg):
        """
        Dual classifier-free guidance

        ε̂ = ε(∅,∅) + s_I·(ε(src,∅) − ε(∅,∅)) + s_T·(ε(src,code) − ε(src,∅)),
        evaluated as ε(src,code) + (s_T−1)(ε(src,code) − ε(src,∅)) + (s_I−1)(ε(src,∅) − ε(∅,∅))
        so that unit scales return ε(src,code) exactly.
        """
        eps_full = denoise(editor.model, z_t, t, EditCondition(source, code))
        if cfg.s_T == 1.0 and cfg.s_I == 1.0:
            return eps_full
        eps_image = denoise(editor.model, z_t, t, EditCondition(source, None))
        eps_hat = eps_full + (cfg.s_T - 1.0) * (eps_full - eps_image)
        if cfg.s_I != 1.0:
            eps_none = denoise(editor.model, z_t, t, EditCondition(None, None))
            eps_hat = eps_hat + (cfg.s_I - 1.0) * (eps_image - eps_none)
        return eps_hat

    # === SAMPLING ===

    def _ladder(self, editor, cfg):
        if cfg.steps > editor.schedule.T:
            raise ScheduleRangeError(f"{cfg.steps} sampling steps on a {editor.schedule.T}-step schedule")
        return editor.schedule.timesteps(cfg.steps)

    def _noise_like(self, source, generator):
        return torch.randn(source.shape, generator=generator, dtype=source.dtype)

    def sample(self, editor, source, code, cfg, generator=None, noise=None):
        """
        Full few-step sampling without gradients

        Returns:
            np.ndarray: N×H×W×3 edited images clamped to [0, 1]
        """
        src = source_latents_of(source)
        z = self._noise_like(src, generator) if noise is None else noise
        ladder = self._ladder(editor, cfg)
        with torch.no_grad():
            for i, t in enumerate(ladder):
                t_prev = ladder[i + 1] if i + 1 < len(ladder) else 0
                z = editor.schedule.step(z, self.cfg_eps(editor, z, t, src, code, cfg), t, t_prev)
        return tensor_to_images(from_latent(z))

    def refl_sample(self, editor, source, code, cfg, generator=None, noise=None, t=None):
        """
        Truncated-gradient sampling

        Draws t uniformly among the sampling steps inside [T_1, T_2], runs the
        steps above t without gradient tracking, then one tracked step at t
        whose x0 prediction is the edited output.

        Args:
            editor (EditorHandle): editor (θ = its adapters)
            source (ViewSet | np.ndarray | torch.Tensor): source views (a tensor is taken as latents)
            code (int): edit code
            cfg (SamplerConfig): guidance and ranges
            noise (torch.Tensor, optional): z_T to reuse
            t (int, optional): tracked step to force

        Returns:
            EditBatch
        """
        src = source if torch.is_tensor(source) else source_latents_of(source)
        ladder = self._ladder(editor, cfg)
        lo, hi = cfg.refl_range
        candidates = [s for s in ladder if lo <= s <= hi]
        if not candidates:
            raise ScheduleRangeError(f"no sampling step inside refl_range {cfg.refl_range}")
        if t is None:
            t = candidates[int(torch.randint(0, len(candidates), (1,), generator=generator).item())]
        elif t not in candidates:
            raise ScheduleRangeError(f"tracked step {t} not among {candidates}")

        z_T = self._noise_like(src, generator) if noise is None else noise
        z = z_T
        with torch.no_grad():
            for i, s in enumerate(ladder):
                if s == t:
                    break
                z = editor.schedule.step(z, self.cfg_eps(editor, z, s, src, code, cfg), s, ladder[i + 1])
        z_tracked = z.detach()
        eps_hat = self.cfg_eps(editor, z_tracked, t, src, code, cfg)
        latents = editor.schedule.eps_to_x0(z_tracked, eps_hat, t)
        return EditBatch(latents, src, int(code), int(t), z_T, z_tracked)

    def edit_reference(self, editor, source_ref, code, cfg, generator=None, noise=None, track_step=None):
        """
        Full few-step edit of the reference view

        Without track_step the whole pass runs without gradients (the cached
        target). With track_step the editor's parameters enter only through
        that step; the later steps still propagate the gradient through z
        with the parameters detached.

        Args:
            source_ref (np.ndarray | torch.Tensor): H×W×3 image or 1×3×H×W latents
            noise (torch.Tensor, optional): cached z_T

        Returns:
            tuple: (1×3×H×W latents, z_T)
        """
        if torch.is_tensor(source_ref):
            src = source_ref
        else:
            src = source_latents_of(np.asarray(source_ref)[None])
        z_T = self._noise_like(src, generator) if noise is None else noise
        ladder = self._ladder(editor, cfg)
        if track_step is not None and track_step not in ladder:
            raise ScheduleRangeError(f"tracked step {track_step} not among the sampling steps")

        model = editor.model
        detached = {name: p.detach() for name, p in model.named_parameters()}
        detached.update({name: b for name, b in model.named_buffers()})
        frozen = EditorHandle(_FrozenView(model, detached), editor.schedule)

        z = z_T
        tracking = False
        for i, t in enumerate(ladder):
            t_prev = ladder[i + 1] if i + 1 < len(ladder) else 0
            if track_step is None or (t > track_step and not tracking):
                with torch.no_grad():
                    z = editor.schedule.step(z, self.cfg_eps(editor, z, t, src, code, cfg), t, t_prev)
            elif t == track_step:
                tracking = True
                z = editor.schedule.step(z, self.cfg_eps(editor, z, t, src, code, cfg), t, t_prev)
            else:
                z = editor.schedule.step(z, self.cfg_eps(frozen, z, t, src, code, cfg), t, t_prev)
        return z, z_T


class _FrozenView(torch.nn.Module):
    """Calls a module with a fixed (detached) parameter dict"""

    def __init__(self, module, params):
        super().__init__()
        object.__setattr__(self, '_module', module)
        object.__setattr__(self, '_params', params)

    @property
    def config(self):
        return self._module.config

    def forward(self, z_t, t, cond):
        return functional_call(self._module, self._params, (z_t, t, cond))
