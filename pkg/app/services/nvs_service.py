# app/services/nvs_service.py
# Multi-view NVS denoiser (teacher): conditioning signals, pretraining over a
# family of procedural scenes, temporal-LoRA fine-tuning on one scene and
# clip sampling

import copy
import logging
from dataclasses import dataclass, field
from typing import List

import numpy as np
import torch
from tqdm import tqdm

from app.models.nets import (
    ConditionSignal, DenoiserConfig, MultiViewDenoiser, attach_lora, denoise, lora_parameters,
)
from app.models.schedule import NoiseSchedule, ddpm_linear
from app.services.base_service import BaseService
from app.services.worldgen_service import make_render_maps
from app.utils.error_handler import DataValidationError
from app.utils.helpers import from_latent, images_to_tensor, randint, tensor_to_images, to_latent

logger = logging.getLogger(__name__)


@dataclass
class TeacherHandle:
    """
    Teacher denoiser with its schedule

    After Stage 1 only the temporal adapters differ from the pretrained weights.
    """
    model: MultiViewDenoiser
    schedule: NoiseSchedule
    lora_rank: int = 0
    history: List[float] = field(default_factory=list)

    def frozen_copy(self):
        """Deep copy with every parameter frozen"""
        model = copy.deepcopy(self.model)
        for p in model.parameters():
            p.requires_grad_(False)
        return TeacherHandle(model, self.schedule, self.lora_rank, list(self.history))


def camera_tags(views, indices=None):
    """Pose of each view relative to the reference, flattened to 12 numbers"""
    indices = range(views.n) if indices is None else indices
    rows = []
    for i in indices:
        r_rel, t_rel = views.poses.relative_pose(i, views.ref_index)
        rows.append(np.concatenate([r_rel.reshape(-1), t_rel]))
    return torch.as_tensor(np.array(rows), dtype=torch.get_default_dtype())


def eps_mse(eps_hat, eps):
    """‖ε̂ − ε‖² averaged over every dimension"""
    return torch.mean((eps_hat - eps) ** 2)


class NVSService(BaseService):
    """
    Teacher-side operations

    Clips follow the view set's clip layout; every clip starts with the
    reference view.
    """

    # === CONDITIONING ===

    def build_condition(self, views, ref_image=None):
        """
        Condition signal for all views of a view set

        Args:
            views (ViewSet): geometry (depths, poses) and the source reference
            ref_image (np.ndarray, optional): H×W×3 replacement of the
                reference (the edited reference for c_e)

        Returns:
            ConditionSignal: over all N views, subset per clip with .subset()
        """
        maps = make_render_maps(views, ref_image=ref_image)
        warped = to_latent(images_to_tensor(maps.warped))
        validity = torch.as_tensor(maps.validity[:, None], dtype=warped.dtype)
        reference = views.images[views.ref_index] if ref_image is None else ref_image
        ref_tensor = to_latent(images_to_tensor(np.asarray(reference)[None]))[0]
        return ConditionSignal(
            render_maps=torch.cat([warped * validity, validity], dim=1),
            ref_image=ref_tensor,
            camera_tag=camera_tags(views),
        )

    @staticmethod
    def clip_latents(views, clip):
        return to_latent(images_to_tensor(views.images[list(clip)]))

    # === PRETRAINING ===

    def build_teacher(self, config, T=1000, generator=None):
        seed = int(torch.randint(0, 2 ** 31 - 1, (1,), generator=generator).item())
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            model = MultiViewDenoiser(config)
        return TeacherHandle(model, ddpm_linear(T))

    def pretrain_base(self, worlds, steps, config=None, lr=2e-4, clip_views=8, cond_dropout=0.1,
                      T=1000, generator=None):
        """
        Train the base NVS denoiser on a family of scenes

        Each step draws one scene, a random clip (reference first), a step t
        over the full range and a noise sample; the condition is dropped with
        probability cond_dropout so classifier-free guidance is available.

        Args:
            worlds (list[ViewSet]): rendered scenes (at least 8)
            steps (int): optimizer steps
            config (DenoiserConfig): network sizes
            generator (torch.Generator): RNG of the run

        Returns:
            TeacherHandle
        """
        if len(worlds) < 8:
            raise DataValidationError(f"pretraining needs at least 8 scenes, got {len(worlds)}")
        config = config or DenoiserConfig(timesteps=T)
        teacher = self.build_teacher(config, T, generator)
        model, schedule = teacher.model, teacher.schedule
        self._log_operation("pretrain_base", f"{len(worlds)} scenes, {steps} steps, T={T}")

        conditions = [self.build_condition(v) for v in worlds]
        optimizer = torch.optim.Adam(model.parameters(), lr=lr)
        model.train()
        for step in tqdm(range(steps), desc="pretrain teacher", disable=not self.show_progress):
            k = randint(0, len(worlds) - 1, generator)
            views, cond = worlds[k], conditions[k]
            others = [i for i in range(views.n) if i != views.ref_index]
            pick = torch.randperm(len(others), generator=generator)[:clip_views - 1].tolist()
            clip = [views.ref_index] + sorted(others[i] for i in pick)
            clip_cond = cond.subset(clip)
            if torch.rand(1, generator=generator).item() < cond_dropout:
                clip_cond = clip_cond.null_like()

            z0 = self.clip_latents(views, clip)
            t = randint(1, schedule.T, generator)
            noised = schedule.forward(z0, t, generator)
            loss = eps_mse(denoise(model, noised.z_t, t, clip_cond), noised.eps)
            self._check_finite("teacher pretraining loss", loss, step=step, t=t, scene=k)

            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            teacher.history.append(float(loss.detach()))
            if step % 500 == 0:
                logger.info(f"pretrain teacher step {step}: loss {float(loss):.4f}")

        model.eval()
        for p in model.parameters():
            p.requires_grad_(False)
        return teacher

    def validation_loss(self, teacher, worlds, draws=8, generator=None):
        """Mean ε-prediction loss on held-out scenes (the ε̂ = 0 baseline is 1)"""
        losses = []
        with torch.no_grad():
            for views in worlds:
                cond = self.build_condition(views)
                for clip in views.clip_layout:
                    z0 = self.clip_latents(views, clip)
                    for _ in range(draws):
                        t = randint(1, teacher.schedule.T, generator)
                        noised = teacher.schedule.forward(z0, t, generator)
                        eps_hat = denoise(teacher.model, noised.z_t, t, cond.subset(clip))
                        losses.append(float(eps_mse(eps_hat, noised.eps)))
        return float(np.mean(losses))

    # === STAGE 1 ===

    def finetune_stage1(self, teacher, views, iters=200, lr=5e-4, rank=64, generator=None):
        """
        Fit temporal adapters on the source scene's clips

        Every iteration sums the ε-loss of all clips of the layout with one
        step t (full range) and one noise draw per clip.

        Args:
            teacher (TeacherHandle): pretrained teacher (left untouched)
            views (ViewSet): source multi-view images
            iters (int): optimizer steps; 0 returns the input teacher
            lr (float): Adam learning rate
            rank (int): adapter rank

        Returns:
            TeacherHandle: a new handle holding the adapted copy
        """
        if iters == 0:
            return teacher
        model = attach_lora(copy.deepcopy(teacher.model), 'temporal', rank, generator=generator)
        handle = TeacherHandle(model, teacher.schedule, rank)
        cond = self.build_condition(views)
        clips = [(self.clip_latents(views, clip), cond.subset(clip)) for clip in views.clip_layout]
        optimizer = torch.optim.Adam(lora_parameters(model), lr=lr)
        self._log_operation("finetune_stage1", f"{iters} iters, lr={lr}, rank={rank}, {len(clips)} clips")

        for it in tqdm(range(iters), desc="stage1", disable=not self.show_progress):
            loss = 0.0
            for z0, clip_cond in clips:
                t = randint(1, handle.schedule.T, generator)
                noised = handle.schedule.forward(z0, t, generator)
                loss = loss + eps_mse(denoise(model, noised.z_t, t, clip_cond), noised.eps)
            loss = loss / len(clips)
            self._check_finite("stage1 loss", loss, iteration=it)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            handle.history.append(float(loss.detach()))

        for p in model.parameters():
            p.requires_grad_(False)
        logger.info(f"stage1 loss {handle.history[0]:.4f} -> {handle.history[-1]:.4f}")
        return handle

    # === GUIDANCE AND SAMPLING ===

    @staticmethod
    def teacher_cfg_eps(teacher, z_t, t, cond, scale):
        """ε_u + scale·(ε_c − ε_u); scale 1 skips the unconditional pass"""
        eps_cond = denoise(teacher.model, z_t, t, cond)
        if scale == 1.0:
            return eps_cond
        eps_uncond = denoise(teacher.model, z_t, t, cond.null_like())
        return eps_uncond + scale * (eps_cond - eps_uncond)

    def sample_clip(self, teacher, cond, generator=None, steps=50, guidance=1.0):
        """
        Ancestral sampling of one clip from pure noise

        Returns:
            np.ndarray: V×H×W×3 images clamped to [0, 1]
        """
        n, _, h, w = cond.render_maps.shape
        schedule = teacher.schedule
        z = torch.randn((n, teacher.model.config.image_channels, h, w), generator=generator,
                        dtype=cond.render_maps.dtype)
        ladder = schedule.timesteps(steps)
        with torch.no_grad():
            for i, t in enumerate(ladder):
                t_prev = ladder[i + 1] if i + 1 < len(ladder) else 0
                eps_hat = self.teacher_cfg_eps(teacher, z, t, cond, guidance)
                z = schedule.step(z, eps_hat, t, t_prev, eta=1.0, generator=generator)
        return tensor_to_images(from_latent(z))

    def sample_views(self, teacher, views, ref_image=None, generator=None, steps=50, guidance=1.0):
        """
        Sample every view clip by clip, each clip conditioned on the same reference

        The reference slot of the output is the given reference image itself.

        Returns:
            np.ndarray: N×H×W×3 images
        """
        cond = self.build_condition(views, ref_image=ref_image)
        out = np.zeros_like(views.images)
        for clip in views.clip_layout:
            out[clip] = self.sample_clip(teacher, cond.subset(clip), generator, steps, guidance)
        out[views.ref_index] = views.images[views.ref_index] if ref_image is None else ref_image
        self._log_operation("sample_views", f"{views.n} views, {len(views.clip_layout)} clips, {steps} steps")
        return out
