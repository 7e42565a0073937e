# app/services/pipeline_service.py
# Experiment orchestration: world → pretrained denoisers → Stage 1 → Stage 2
# → Stage 3 → metrics, with a stable results layout
#
#   <out>/config.json        validated experiment config
#   <out>/run_info.json      hashes and recorded conventions
#   <out>/checkpoints/       denoisers (.dc3k) and clouds (.dc3g)
#   <out>/views/, edited/    source and edited view sets
#   <out>/metrics.csv        one row per evaluated condition
#   <out>/grids/*.png        image grids
#   <out>/curves/*.csv|png   loss curves
#   <out>/FAILED             present only when a stage failed

import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd
import torch

from app.models.nets import DenoiserConfig
from app.models.experiment_config import parse_experiment_config
from app.services.base_service import BaseService
from app.services.checkpoint_service import CheckpointService, arrays_to_state, state_to_arrays
from app.services.distill_service import DistillConfig, DistillService
from app.services.editor_service import EditorService, SamplerConfig
from app.services.file_lock_service import file_lock_service
from app.services.metrics_service import MetricsService, ToyEmbedder
from app.services.nvs_service import NVSService
from app.services.oracle_service import OracleService
from app.services.splat_service import ReconLoss, SplatService
from app.services.worldgen_service import (
    EDIT_REGISTRY, describe_scene, generate_scene, get_oracle, gt_mask, load_scene_json, load_viewset,
    make_trajectory, render_views, save_scene_json, save_viewset,
)
from app.utils.error_handler import AppError, DataValidationError, NumericalError
from app.utils.helpers import derive_seed, make_grid, save_png, torch_generator

logger = logging.getLogger(__name__)

ALPHA_SWEEP = (0.0, 1.0, 10.0, 1e2)
GRID_VIEWS = 8
# world fields that fix the rendered source views (edit_code is not one of them)
SCENE_FIELDS = ('scene_seed', 'complexity', 'resolution', 'n_views', 'clip_length',
                'radius', 'elevation_deg', 'azimuth_span_deg', 'fov_deg')


def artifact_key(config, *sections, **extra):
    """Cache key from a few config sections plus extra values and the dtype"""
    payload = {name: json.loads(getattr(config, name).json()) for name in sections}
    payload.update(extra)
    payload['dtype'] = str(torch.get_default_dtype())
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode('utf-8')).hexdigest()[:16]


def pretraining_seeds(n_scenes, offset, exclude):
    """n_scenes consecutive seeds from offset, skipping the excluded one"""
    seeds = []
    seed = offset
    while len(seeds) < n_scenes:
        if seed != exclude:
            seeds.append(seed)
        seed += 1
    return seeds


def held_out_seed(config):
    """
    Evaluation seed when it falls in a pretraining seed range, else None

    Pretrained denoisers depend on it: skipping the seed shifts the training set.
    """
    pre, seed = config.pretrain, config.world.scene_seed
    val_offset = pre.scene_seed_offset + 10 * pre.n_scenes
    in_train = pre.scene_seed_offset <= seed <= pre.scene_seed_offset + pre.n_scenes
    in_val = val_offset <= seed <= val_offset + pre.n_val_scenes
    return seed if in_train or in_val else None


def pretrain_key(config):
    return artifact_key(config, 'pretrain', resolution=list(config.world.resolution),
                        held_out=held_out_seed(config))


def stage1_key(config):
    """Stage-1 teachers are shared by every edit of one scene"""
    world = json.loads(config.world.json())
    scene = {name: world[name] for name in SCENE_FIELDS}
    return artifact_key(config, 'pretrain', 'stage1', scene=scene, held_out=held_out_seed(config),
                        seed=config.seed)


def denoiser_config(section, T):
    return DenoiserConfig(channels=section.channels, depth=section.depth, heads=section.heads,
                          latent_downscale=section.latent_downscale,
                          cond_dims=(section.ref_dim, section.code_dim), timesteps=T)


def sampler_config(section):
    return SamplerConfig(section.s_T, section.s_I, section.steps, tuple(section.refl_range))


def grid_indices(n, count=GRID_VIEWS):
    return sorted(set(np.linspace(0, n - 1, min(count, n)).round().astype(int).tolist()))


@dataclass
class RunContext:
    """A config bound to its results directory, with lazily loaded stage outputs"""
    config: object
    out: Path
    items: dict = field(default_factory=dict)

    def rng(self, label):
        """Generator of one stage; independent of the order stages run in"""
        return torch_generator(derive_seed(self.config.seed, label))

    def path(self, *parts):
        path = self.out.joinpath(*parts)
        path.parent.mkdir(parents=True, exist_ok=True)
        return path


class PipelineService(BaseService):
    """Runs the stages of an experiment and writes their artifacts"""

    def __init__(self, cache=None):
        super().__init__(cache)
        self.nvs = NVSService(cache)
        self.editor = EditorService(cache)
        self.metrics = MetricsService(cache)
        self.distiller = DistillService(cache, self.nvs, self.editor, self.metrics)
        self.splat = SplatService(cache)
        self.checkpoints = CheckpointService(cache)

    def context(self, config, out):
        ctx = RunContext(config, Path(out))
        ctx.out.mkdir(parents=True, exist_ok=True)
        file_lock_service.safe_json_write(ctx.out / 'config.json', json.loads(config.json()))
        file_lock_service.safe_json_write(ctx.out / 'run_info.json', {
            'config_hash': config.config_hash(),
            'omega': config.distill.omega,
            'perceptual_kind': 'random_conv',
            'perceptual_seed': config.splat.perceptual_seed,
            'dtype': str(torch.get_default_dtype()),
            'pairs': config.eval.pairs,
        })
        return ctx

    # === WORLD ===

    def prepare_world(self, ctx):
        """Render the evaluation scene, its ground-truth edit and edit mask"""
        if 'views' in ctx.items:
            return ctx.items['views']
        world = ctx.config.world
        if (ctx.out / 'views' / 'manifest.json').exists():
            scene, traj = load_scene_json(ctx.out / 'scene.json')
            views = load_viewset(ctx.out / 'views')
        else:
            scene = generate_scene(world.scene_seed, world.complexity)
            traj = make_trajectory(world.n_views, world.radius, world.elevation_deg,
                                   world.azimuth_span_deg, world.fov_deg)
            views = render_views(scene, traj, world.resolution, world.clip_length)
            save_scene_json(ctx.path('scene.json'), scene, traj)
            save_viewset(ctx.out / 'views', views)
        oracle = get_oracle(world.edit_code)
        gt = render_views(oracle.apply(scene), traj, world.resolution, world.clip_length)
        ctx.items.update({
            'scene': scene, 'traj': traj, 'views': views,
            'gt_views': views.with_images(gt.images),
            'gt_mask': gt_mask(scene, oracle, traj, world.resolution),
            'src_desc': describe_scene(scene), 'tgt_desc': describe_scene(oracle.apply(scene)),
        })
        self._log_operation("prepare_world", f"scene {world.scene_seed}, {views.n} views, edit {oracle.name}")
        return views

    def pretraining_worlds(self, config, n_scenes, offset):
        """Procedural scenes disjoint from the evaluation scene"""
        world, pre = config.world, config.pretrain
        traj = make_trajectory(pre.views_per_scene, world.radius, world.elevation_deg,
                               world.azimuth_span_deg, world.fov_deg)
        return [(generate_scene(seed, 'medium' if seed % 2 else 'small'), traj)
                for seed in pretraining_seeds(n_scenes, offset, world.scene_seed)]

    # === PRETRAINED DENOISERS ===

    def pretrained_teacher(self, ctx):
        config = ctx.config
        pre = config.pretrain
        key = pretrain_key(config)
        teacher = self._cached('teacher', key)
        if teacher is None:
            worlds = self.pretraining_worlds(config, pre.n_scenes, pre.scene_seed_offset)
            views = [render_views(s, tr, config.world.resolution, min(config.world.clip_length, tr.n))
                     for s, tr in worlds]
            generator = torch_generator(derive_seed(pre.scene_seed_offset, 'teacher'))
            teacher = self.nvs.pretrain_base(views, pre.teacher_steps, denoiser_config(pre.teacher, pre.teacher_T),
                                             pre.lr, pre.teacher_clip_views, pre.cond_dropout, pre.teacher_T, generator)
            held_out = self.pretraining_worlds(config, pre.n_val_scenes, pre.scene_seed_offset + 10 * pre.n_scenes)
            val_views = [render_views(s, tr, config.world.resolution) for s, tr in held_out]
            val = self.nvs.validation_loss(teacher, val_views, generator=generator)
            logger.info(f"pretrained teacher validation loss {val:.4f} (zero-prediction baseline 1.0)")
            self._store('teacher', key, teacher, validation_loss=val)
        self._write_curve(ctx, 'pretrain_teacher', teacher.history)
        return teacher

    def pretrained_editor(self, ctx):
        config = ctx.config
        pre = config.pretrain
        key = pretrain_key(config)
        editor = self._cached('editor', key)
        if editor is None:
            worlds = self.pretraining_worlds(config, pre.n_scenes, pre.scene_seed_offset)
            generator = torch_generator(derive_seed(pre.scene_seed_offset, 'editor'))
            editor = self.editor.pretrain_editor(
                worlds, sorted(EDIT_REGISTRY), pre.editor_steps, config.world.resolution,
                denoiser_config(pre.editor, pre.editor_T), pre.lr, pre.editor_batch, pre.cond_dropout,
                pre.editor_T, generator)
            self._store('editor', key, editor)
        self._write_curve(ctx, 'pretrain_editor', editor.history)
        return editor

    def _cached(self, kind, key):
        if not self.has_cache:
            return None
        return self.checkpoints.cached_handle(kind, key)

    def _store(self, kind, key, handle, model_kind=None, **extra):
        if self.has_cache:
            self.checkpoints.cache_handle(kind, key, handle, model_kind=model_kind, **extra)

    # === STAGES ===

    def run_stage1(self, ctx, skip=None):
        """Temporal-adapter fine-tuning of the teacher on the source views (cached per scene)"""
        config = ctx.config
        skip = config.ablation.skip_stage1 if skip is None else skip
        views = self.prepare_world(ctx)
        base = self.pretrained_teacher(ctx)
        if skip:
            logger.info("stage 1 skipped (ablation): distilling from the pretrained teacher")
            ctx.items['teacher'] = base
            return base
        key = stage1_key(config)
        teacher = self._cached('stage1', key)
        if teacher is None:
            s1 = config.stage1
            teacher = self.nvs.finetune_stage1(base, views, s1.iters, s1.lr, s1.rank, ctx.rng('stage1'))
            self._store('stage1', key, teacher, model_kind='teacher')
        self.checkpoints.save(ctx.path('checkpoints', 'teacher_stage1.dc3k'), 'teacher', teacher, config.config_hash())
        self._write_curve(ctx, 'stage1', teacher.history)
        ctx.items['teacher'] = teacher
        return teacher

    def _load_teacher(self, ctx):
        if 'teacher' in ctx.items:
            return ctx.items['teacher']
        path = ctx.out / 'checkpoints' / 'teacher_stage1.dc3k'
        if ctx.config.ablation.skip_stage1:
            return self.run_stage1(ctx, skip=True)
        if not path.exists():
            raise DataValidationError(f"{path} not found: run the stage1 command first")
        ctx.items['teacher'] = self.checkpoints.load(path, ctx.config.config_hash())
        return ctx.items['teacher']

    def run_distill(self, ctx, alpha=None, label='distilled', nvs_direct=None):
        """
        Stage 2 (or its replacement by direct teacher sampling)

        Returns:
            ViewSet: edited views of every pose
        """
        config = ctx.config
        nvs_direct = config.ablation.nvs_direct if nvs_direct is None else nvs_direct
        views = self.prepare_world(ctx)
        teacher = self._load_teacher(ctx)
        editor = self.pretrained_editor(ctx)
        cfg = sampler_config(config.sampler)
        distill_config = DistillConfig.from_section(config.distill)
        if alpha is not None:
            distill_config = DistillConfig(**{**distill_config.__dict__, 'alpha': float(alpha)})
        code = config.world.edit_code
        generator = ctx.rng(f'distill:{label}')

        state = self.distiller.init_state(teacher, editor, views, code, cfg, distill_config, generator)
        if 'undistilled' not in ctx.items:
            ctx.items['undistilled'] = self.distiller.edited_views(state, views, code, cfg, ctx.rng('undistilled'))
            save_viewset(ctx.out / 'edited' / 'undistilled', ctx.items['undistilled'])

        if nvs_direct:
            logger.info("stage 2 replaced by teacher sampling from the edited reference (ablation)")
            images = self.nvs.sample_views(teacher, views, state.ref_image, generator,
                                           config.sampler.teacher_steps, distill_config.cfg_teacher)
            edited = views.with_images(images)
            label = 'nvs_direct'
        else:
            self.distiller.distill(state, views, code, cfg, distill_config, generator,
                                   log_path=ctx.path('curves', f'{label}.csv'))
            self._plot_history(ctx, label, state.history_frame())
            edited = self.distiller.edited_views(state, views, code, cfg, ctx.rng(f'edit:{label}'))
            self.checkpoints.save(ctx.path('checkpoints', f'editor_{label}.dc3k'), 'editor', state.editor,
                                  config.config_hash(), alpha=distill_config.alpha)
        save_viewset(ctx.out / 'edited' / label, edited)
        ctx.items[label] = edited
        if label in ('distilled', 'nvs_direct'):
            ctx.items['edited'] = edited
        return edited

    def run_stage3(self, ctx, edited=None):
        """Fit the source cloud, then update it from the edited views"""
        config = ctx.config
        sp = config.splat
        views = self.prepare_world(ctx)
        if edited is None:
            edited = ctx.items['edited'] if 'edited' in ctx.items else self._load_edited(ctx)
        cloud, fit_history = self.splat.fit_initial(views, sp.n_gaussians, sp.fit_iters, sp.fit_lr,
                                                    generator=ctx.rng('fit'))
        cloud.save(ctx.path('checkpoints', 'cloud_source.dc3g'))
        mask = ctx.items['gt_mask'] if sp.mask == 'gt' else None
        loss = ReconLoss(sp.l1, sp.perc, 'random_conv', sp.perceptual_seed)
        updated, history = self.splat.update_with_edits(cloud, views, edited.images, loss, mask,
                                                        sp.update_iters, sp.update_lr, ctx.rng('stage3'))
        updated.save(ctx.path('checkpoints', 'cloud_edited.dc3g'))
        self._write_curve(ctx, 'fit_initial', fit_history)
        self._write_curve(ctx, 'stage3', history)
        renders = views.with_images(self.splat.render_images(updated, views))
        save_viewset(ctx.out / 'edited' / 'stage3', renders)
        ctx.items['stage3'] = renders
        return updated, renders

    def _load_edited(self, ctx):
        for label in ('distilled', 'nvs_direct'):
            folder = ctx.out / 'edited' / label
            if (folder / 'manifest.json').exists():
                return load_viewset(folder)
        raise DataValidationError("no edited views found: run the distill command first")

    # === EVALUATION ===

    def embedder(self, ctx):
        config = ctx.config
        key = artifact_key(config, 'eval', resolution=list(config.world.resolution))
        model = ToyEmbedder(config.eval.embed_dim)
        entry = self.cache.get('embedder', key) if self.has_cache else None
        if entry is not None:
            arrays_to_state(model, entry[0])
            model.eval()
            return model
        model = self.metrics.train_embedder(config.eval.embedder_steps, config.eval.embed_dim,
                                            tuple(config.world.resolution),
                                            generator=torch_generator(derive_seed(0, 'embedder')))
        if self.has_cache:
            self.cache.put('embedder', key, state_to_arrays(model), {'kind': 'embedder',
                                                                    'embed_dim': config.eval.embed_dim})
        return model

    def run_eval(self, ctx):
        """
        Metrics of every available condition → metrics.csv

        Returns:
            pd.DataFrame
        """
        views = self.prepare_world(ctx)
        embedder = self.embedder(ctx)
        conditions = {'gt_oracle': ctx.items['gt_views']}
        saved = sorted(p.parent.name for p in (ctx.out / 'edited').glob('*/manifest.json'))
        for label in ['undistilled', 'distilled', 'nvs_direct', 'stage3'] + [s for s in saved if s.startswith('alpha=')]:
            if label in ctx.items:
                conditions[label] = ctx.items[label]
            elif label in saved:
                conditions[label] = load_viewset(ctx.out / 'edited' / label)

        frames = []
        for label, edited in conditions.items():
            report = self.metrics.evaluate(edited, views, ctx.items['src_desc'], ctx.items['tgt_desc'], embedder,
                                           reference=ctx.items['gt_views'].images, pairs=ctx.config.eval.pairs)
            frames.append(report.summary_frame(condition=label, seed=ctx.config.seed))
            report.per_view.to_csv(ctx.path('curves', f'per_view_{label}.csv'), index=False)
        metrics = pd.concat(frames, ignore_index=True)
        path = ctx.path('metrics.csv')
        file_lock_service.atomic_write(path, lambda tmp: metrics.to_csv(tmp, index=False, float_format='%.10g'))
        self.write_grid(ctx, 'conditions', [views] + list(conditions.values()))
        self._log_operation("run_eval", f"{len(metrics)} conditions → {path}")
        return metrics

    def alpha_sweep(self, ctx, alphas=ALPHA_SWEEP):
        """Stage 2 once per α, emitted as one grid row each"""
        rows = []
        for alpha in alphas:
            edited = self.run_distill(ctx, alpha=alpha, label=f'alpha={alpha:g}', nvs_direct=False)
            ctx.items[f'alpha={alpha:g}'] = edited
            rows.append(edited)
        self.write_grid(ctx, 'alpha_sweep', rows)
        return rows

    def edit_preview(self, ctx):
        """Grid of the current editor's output (distilled when available) on the source views"""
        views = self.prepare_world(ctx)
        path = ctx.out / 'checkpoints' / 'editor_distilled.dc3k'
        editor = self.checkpoints.load(path) if path.exists() else self.pretrained_editor(ctx)
        cfg = sampler_config(ctx.config.sampler)
        images = self.editor.sample(editor, views, ctx.config.world.edit_code, cfg, ctx.rng('preview'))
        return self.write_grid(ctx, 'edit_preview', [views, views.with_images(images)])

    def run_oracle(self, ctx):
        section = ctx.config.oracle
        frame = OracleService(self._cache).sweep(section.dims, section.components, section.n_samples,
                                                 section.noise_fracs, section.reference_samples, ctx.config.seed)
        path = ctx.path('oracle.csv')
        file_lock_service.atomic_write(path, lambda tmp: frame.to_csv(tmp, index=False, float_format='%.10g'))
        return frame

    # === FULL RUN ===

    def run_pipeline(self, config, out):
        """
        All stages in order; a failing stage leaves its predecessors' outputs
        and a FAILED marker describing the failure

        Returns:
            Path: results directory
        """
        ctx = self.context(config, out)
        stage = 'worldgen'
        try:
            self.prepare_world(ctx)
            stage = 'stage1'
            self.run_stage1(ctx)
            stage = 'distill'
            self.run_distill(ctx)
            if config.ablation.alpha_sweep:
                stage = 'alpha_sweep'
                self.alpha_sweep(ctx, config.ablation.alpha_sweep)
            stage = 'stage3'
            self.run_stage3(ctx, ctx.items['edited'])
            stage = 'eval'
            self.run_eval(ctx)
        except Exception as e:
            write_failure(ctx.out, stage, e)
            raise
        self._log_operation("run_pipeline", f"results in {ctx.out}")
        return ctx.out

    # === OUTPUT HELPERS ===

    def _write_curve(self, ctx, name, values):
        if not values:
            return
        frame = pd.DataFrame({'step': np.arange(len(values)), 'loss': values})
        frame.to_csv(ctx.path('curves', f'{name}.csv'), index=False)
        fig, ax = plt.subplots(1, 1, figsize=(6, 4))
        ax.plot(frame['step'], frame['loss'], color='steelblue')
        ax.set_yscale('log' if (frame['loss'] > 0).all() else 'linear')
        ax.set_title(name)
        ax.set_xlabel('step')
        ax.set_ylabel('loss')
        plt.tight_layout()
        plt.savefig(ctx.path('curves', f'{name}.png'), dpi=100, bbox_inches='tight')
        plt.close(fig)

    def _plot_history(self, ctx, name, frame):
        columns = ['L_distill_surrogate', 'L_reg', 'consistency_metric']
        fig, axes = plt.subplots(1, len(columns), figsize=(5 * len(columns), 4))
        for ax, column in zip(axes, columns):
            ax.plot(frame['iter'], frame[column], marker='.', color='darkorange')
            ax.set_title(column)
            ax.set_xlabel('iteration')
        plt.tight_layout()
        plt.savefig(ctx.path('curves', f'{name}.png'), dpi=100, bbox_inches='tight')
        plt.close(fig)

    def write_grid(self, ctx, name, rows):
        n = rows[0].n
        idx = grid_indices(n)
        grid = make_grid([[row.images[i] for i in idx] for row in rows])
        path = ctx.path('grids', f'{name}.png')
        save_png(path, grid)
        return path


def write_failure(out, stage, error):
    """FAILED marker with the stage, the message and numerical diagnostics"""
    payload = {
        'stage': stage,
        'error': type(error).__name__,
        'message': error.message if isinstance(error, AppError) else str(error),
    }
    if isinstance(error, NumericalError):
        payload['diagnostics'] = {k: (v if isinstance(v, (int, float, str)) else str(v))
                                  for k, v in error.diagnostics.items()}
    file_lock_service.safe_json_write(Path(out) / 'FAILED', payload)
    logger.error(f"stage {stage} failed: {payload['message']}")


def _run_seed(config_json, out, seed, config_name):
    """Worker entry point: own toolkit context, own results directory"""
    from app import create_app
    create_app(config_name)
    config = parse_experiment_config(json.loads(config_json)).with_updates(seed=seed)
    try:
        return str(PipelineService().run_pipeline(config, out))
    except AppError as e:
        return f"failed: {e.message}"


def run_seeds(config, out, seeds, workers=1, config_name=None):
    """
    One pipeline per seed in <out>/seed_<n>, optionally in parallel processes

    Returns:
        dict: seed → results directory or failure message
    """
    out = Path(out)
    jobs = {seed: out / f'seed_{seed}' for seed in seeds}
    if workers <= 1:
        return {seed: _run_seed(config.json(), path, seed, config_name) for seed, path in jobs.items()}
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = {seed: pool.submit(_run_seed, config.json(), path, seed, config_name) for seed, path in jobs.items()}
        return {seed: future.result() for seed, future in futures.items()}


def collect_metrics(out):
    """metrics.csv of every seed directory stacked into one table"""
    frames = [pd.read_csv(path) for path in sorted(Path(out).glob('seed_*/metrics.csv'))]
    return pd.concat(frames, ignore_index=True) if frames else pd.DataFrame()
