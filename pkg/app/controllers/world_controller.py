# app/controllers/world_controller.py
# Commands about the procedural world: rendering the evaluation scene

import click

from app.controllers.common import common_options, open_run
from app.utils.error_handler import handle_errors


@click.command('worldgen')
@common_options
@click.option('--scene-seed', type=int, default=None, help="Seed of the procedural scene.")
@click.option('--edit-code', type=int, default=None, help="Edit applied for the ground-truth views.")
@handle_errors(stage="worldgen")
def worldgen_command(config_path, seed, out, env, scene_seed, edit_code):
    """Render the evaluation scene, its ground-truth edit and a source grid"""
    pipeline, ctx = open_run(config_path, seed, out, env,
                             world={'scene_seed': scene_seed, 'edit_code': edit_code})
    views = pipeline.prepare_world(ctx)
    grid = pipeline.write_grid(ctx, 'worldgen', [views, ctx.items['gt_views']])
    click.echo(f"{views.n} views at {views.res[0]}×{views.res[1]} in {ctx.out} (grid {grid})")
