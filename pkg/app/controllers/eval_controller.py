# app/controllers/eval_controller.py
# Evaluation commands: metrics of the edited views and the gradient oracle

import click

from app.controllers.common import common_options, open_run
from app.utils.error_handler import handle_errors
from app.utils.validators import ensure_valid, validate_results_dir


@click.command('eval')
@common_options
@click.option('--pairs', type=click.Choice(['adjacent', 'all']), default=None, help="View pairs of pairwise metrics.")
@handle_errors(stage="eval")
def eval_command(config_path, seed, out, env, pairs):
    """Compute metrics.csv for every condition present in the results directory"""
    pipeline, ctx = open_run(config_path, seed, out, env, eval={'pairs': pairs})
    ensure_valid(validate_results_dir(ctx.out, 'eval'))
    metrics = pipeline.run_eval(ctx)
    click.echo(metrics.to_string(index=False))


@click.command('oracle')
@common_options
@click.option('--n-samples', type=int, default=None, help="Monte Carlo samples of the estimator.")
@click.option('--reference-samples', type=int, default=None, help="Samples of the mixture reference gradient.")
@handle_errors(stage="oracle")
def oracle_command(config_path, seed, out, env, n_samples, reference_samples):
    """Compare the score-difference gradient estimator with the exact KL gradient"""
    pipeline, ctx = open_run(config_path, seed, out, env,
                             oracle={'n_samples': n_samples, 'reference_samples': reference_samples})
    frame = pipeline.run_oracle(ctx)
    click.echo(frame.to_string(index=False))
