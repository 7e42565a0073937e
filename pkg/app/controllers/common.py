# app/controllers/common.py
# Options shared by every command and the code turning them into a run
# context (config file + overrides → validated config → results directory)

import logging
from pathlib import Path

import click

from app import create_app
from app.models.experiment_config import default_experiment_config, load_experiment_config
from app.services.pipeline_service import PipelineService

logger = logging.getLogger(__name__)


COMMON_OPTIONS = [
    click.option('--config', 'config_path', type=click.Path(dir_okay=False), default=None,
                 help="Experiment config (JSON). Defaults are used when omitted."),
    click.option('--seed', type=int, default=None, help="Global seed (overrides the config)."),
    click.option('--out', type=click.Path(file_okay=False), default=None,
                 help="Results directory (default: RESULTS_FOLDER/scene<scene seed>_seed<seed>)."),
    click.option('--env', default=None, help="Runtime configuration name (development, testing, ...)."),
]


def common_options(f):
    """--config, --seed, --out and --env on a command"""
    for option in reversed(COMMON_OPTIONS):
        f = option(f)
    return f


def load_config(config_path=None, seed=None, **sections):
    """
    Experiment config from a file (or the defaults) with command-line overrides

    Args:
        sections: section name → dict of field overrides; None values are dropped

    Returns:
        ExperimentConfig
    """
    config = load_experiment_config(config_path) if config_path else default_experiment_config()
    updates = {}
    for name, values in sections.items():
        kept = {k: v for k, v in values.items() if v is not None}
        if kept:
            updates[name] = kept
    if seed is not None:
        updates['seed'] = seed
    return config.with_updates(**updates) if updates else config


def open_run(config_path, seed, out, env, **sections):
    """
    Initialise the toolkit and bind the config to its results directory

    Returns:
        tuple: (PipelineService, RunContext)
    """
    runtime = create_app(env)
    config = load_config(config_path, seed, **sections)
    out = Path(out) if out else Path(runtime.RESULTS_FOLDER) / f"scene{config.world.scene_seed}_seed{config.seed}"
    pipeline = PipelineService()
    ctx = pipeline.context(config, out)
    logger.info(f"results directory {out}")
    return pipeline, ctx
