# app/controllers/run_controller.py
# Full pipeline runs, one seed or several in parallel worker processes

import sys

import click

from app.controllers.common import common_options, open_run
from app.services.pipeline_service import collect_metrics, run_seeds
from app.utils.error_handler import EXIT_FAILURE, handle_errors
from app.utils.validators import ensure_valid, parse_seeds, validate_run_options


@click.command('run')
@common_options
@click.option('--seeds', default=None, help="Several seeds, e.g. '0,1,2' or '0-9' (one directory each).")
@click.option('--workers', type=int, default=1, show_default=True, help="Parallel worker processes.")
@click.option('--skip-stage1', is_flag=True, default=False, help="Ablation: no Stage 1.")
@click.option('--nvs-direct', is_flag=True, default=False, help="Ablation: teacher sampling instead of Stage 2.")
@click.option('--alpha-sweep', is_flag=True, default=False, help="Also distill with α in {0, 1, 10, 100}.")
@handle_errors(stage="run")
def run_command(config_path, seed, out, env, seeds, workers, skip_stage1, nvs_direct, alpha_sweep):
    """World → Stage 1 → Stage 2 → Stage 3 → metrics"""
    ablation = {
        'skip_stage1': True if skip_stage1 else None,
        'nvs_direct': True if nvs_direct else None,
        'alpha_sweep': [0.0, 1.0, 10.0, 100.0] if alpha_sweep else None,
    }
    pipeline, ctx = open_run(config_path, seed, out, env, ablation=ablation)
    if seeds is None:
        pipeline.run_pipeline(ctx.config, ctx.out)
        click.echo(f"results in {ctx.out}")
        return

    seed_list = parse_seeds(seeds)
    ensure_valid(validate_run_options(seed_list, workers))
    results = run_seeds(ctx.config, ctx.out, seed_list, workers, env)
    for s, outcome in results.items():
        click.echo(f"seed {s}: {outcome}")
    metrics = collect_metrics(ctx.out)
    if not metrics.empty:
        metrics.to_csv(ctx.out / 'metrics_all_seeds.csv', index=False, float_format='%.10g')
    if any(str(outcome).startswith('failed') for outcome in results.values()):
        sys.exit(EXIT_FAILURE)
