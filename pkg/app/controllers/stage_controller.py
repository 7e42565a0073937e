# app/controllers/stage_controller.py
# Commands running one stage of the pipeline on an existing results directory
#
# - stage1       temporal adapters on the Stage-1 teacher
# - distill      Stage 2 (consistency distillation into the editor)
# - stage3       Gaussian-splat fit and update from the edited views
# - edit-preview grid of the current editor's multi-view output

import click

from app.controllers.common import common_options, open_run
from app.utils.error_handler import handle_errors
from app.utils.validators import (
    ensure_valid, validate_distill_options, validate_results_dir, validate_stage3_options,
)


@click.command('stage1')
@common_options
@click.option('--scene-seed', type=int, default=None, help="Seed of the procedural scene.")
@click.option('--iters', type=int, default=None, help="Adapter optimizer steps.")
@click.option('--lr', type=float, default=None, help="Adam learning rate.")
@click.option('--rank', type=int, default=None, help="Temporal adapter rank.")
@handle_errors(stage="stage1")
def stage1_command(config_path, seed, out, env, scene_seed, iters, lr, rank):
    """Fine-tune temporal adapters of the pretrained teacher on the source views"""
    pipeline, ctx = open_run(config_path, seed, out, env, world={'scene_seed': scene_seed},
                             stage1={'iters': iters, 'lr': lr, 'rank': rank})
    teacher = pipeline.run_stage1(ctx, skip=False)
    if teacher.history:
        click.echo(f"stage1 loss {teacher.history[0]:.4f} -> {teacher.history[-1]:.4f}")
    click.echo(f"teacher checkpoint in {ctx.out / 'checkpoints'}")


@click.command('distill')
@common_options
@click.option('--alpha', type=float, default=None, help="Weight of the reference regularization.")
@click.option('--iters', type=int, default=None, help="Distillation iterations.")
@click.option('--lr', type=float, default=None, help="Learning rate of θ and φ.")
@click.option('--omega', type=click.Choice(['const', 'sigma_sq']), default=None, help="Timestep weighting.")
@click.option('--cfg-teacher', type=float, default=None, help="Guidance scale of the teacher score.")
@click.option('--skip-stage1', is_flag=True, default=False, help="Distill from the unadapted teacher.")
@click.option('--nvs-direct', is_flag=True, default=False, help="Replace Stage 2 by teacher sampling.")
@handle_errors(stage="distill")
def distill_command(config_path, seed, out, env, alpha, iters, lr, omega, cfg_teacher, skip_stage1, nvs_direct):
    """Distill multi-view consistency into the editor; writes curves/distilled.csv"""
    ensure_valid(validate_distill_options(alpha, iters, lr, omega, cfg_teacher))
    ablation = {'skip_stage1': True if skip_stage1 else None, 'nvs_direct': True if nvs_direct else None}
    pipeline, ctx = open_run(config_path, seed, out, env, ablation=ablation,
                             distill={'alpha': alpha, 'iters': iters, 'lr': lr, 'omega': omega,
                                      'cfg_teacher': cfg_teacher})
    ensure_valid(validate_results_dir(ctx.out, 'distill'))
    edited = pipeline.run_distill(ctx)
    click.echo(f"{edited.n} edited views in {ctx.out / 'edited'}")


@click.command('stage3')
@common_options
@click.option('--mask', type=click.Choice(['none', 'gt']), default=None, help="Freeze Gaussians outside the edit.")
@click.option('--iters', type=int, default=None, help="Update iterations.")
@click.option('--l1', type=float, default=None, help="Weight of the L1 term.")
@click.option('--perc', type=float, default=None, help="Weight of the perceptual term.")
@handle_errors(stage="stage3")
def stage3_command(config_path, seed, out, env, mask, iters, l1, perc):
    """Fit the source Gaussian cloud and update it from the edited views"""
    ensure_valid(validate_stage3_options(mask, iters, l1, perc))
    pipeline, ctx = open_run(config_path, seed, out, env,
                             splat={'mask': mask, 'update_iters': iters, 'l1': l1, 'perc': perc})
    ensure_valid(validate_results_dir(ctx.out, 'stage3'))
    cloud, renders = pipeline.run_stage3(ctx)
    frozen = int(cloud.frozen.sum())
    click.echo(f"{cloud.m} Gaussians ({frozen} frozen) in {ctx.out / 'checkpoints'}")


@click.command('edit-preview')
@common_options
@handle_errors(stage="edit-preview")
def edit_preview_command(config_path, seed, out, env):
    """Grid of the current editor's output on the source views"""
    pipeline, ctx = open_run(config_path, seed, out, env)
    ensure_valid(validate_results_dir(ctx.out, 'edit-preview'))
    click.echo(f"preview written to {pipeline.edit_preview(ctx)}")
