# tests/test_cli.py
# Command-line surface: exit codes and the files each command writes

import json

import click
import pandas as pd
import pytest
from click.testing import CliRunner

from app.controllers import cli
from app.utils.error_handler import (
    EXIT_FAILURE, EXIT_NUMERICAL, EXIT_VALIDATION, DataValidationError, NumericalError, handle_errors,
)
from app.services.oracle_service import ORACLE_COLUMNS

TINY_WORLD = {'n_views': 4, 'resolution': [16, 16], 'clip_length': 3}


@pytest.fixture
def runner():
    return CliRunner()


def write_config(path, **sections):
    path.write_text(json.dumps({'version': 1, **sections}), encoding='utf-8')
    return str(path)


def invoke(runner, *args):
    return runner.invoke(cli, [*args, '--env', 'testing'], catch_exceptions=False)


def test_help_lists_every_command(runner):
    result = runner.invoke(cli, ['--help'])
    assert result.exit_code == 0
    for name in ('worldgen', 'stage1', 'distill', 'stage3', 'edit-preview', 'eval', 'oracle', 'run'):
        assert name in result.output


def test_version_names_the_program(runner):
    result = runner.invoke(cli, ['--version'])
    assert result.exit_code == 0
    assert result.output.startswith('disco3d, version')


def test_invalid_config_exits_with_validation_code(runner, tmp_path):
    config = write_config(tmp_path / 'bad.json', distill={'alpha': 1.0, 'unknown': 2})
    result = invoke(runner, 'worldgen', '--config', config, '--out', str(tmp_path / 'out'))
    assert result.exit_code == EXIT_VALIDATION
    missing = invoke(runner, 'worldgen', '--config', str(tmp_path / 'absent.json'), '--out', str(tmp_path / 'out'))
    assert missing.exit_code == EXIT_VALIDATION


def test_negative_alpha_is_rejected(runner, tmp_path):
    result = invoke(runner, 'distill', '--alpha', '-1', '--out', str(tmp_path / 'out'))
    assert result.exit_code == EXIT_VALIDATION
    assert '--alpha' in result.output


def test_stages_need_the_rendered_views(runner, tmp_path):
    for command in ('stage3', 'eval', 'edit-preview'):
        result = invoke(runner, command, '--out', str(tmp_path / command))
        assert result.exit_code == EXIT_VALIDATION, command


def test_worldgen_writes_the_views(runner, tmp_path):
    config = write_config(tmp_path / 'tiny.json', world=TINY_WORLD)
    out = tmp_path / 'out'
    result = invoke(runner, 'worldgen', '--config', config, '--out', str(out), '--scene-seed', '5')
    assert result.exit_code == 0, result.output
    assert (out / 'views' / 'manifest.json').exists()
    assert (out / 'scene.json').exists()
    assert (out / 'grids' / 'worldgen.png').exists()
    assert json.loads((out / 'config.json').read_text(encoding='utf-8'))['world']['scene_seed'] == 5


def test_oracle_writes_its_table(runner, tmp_path):
    config = write_config(tmp_path / 'oracle.json',
                          oracle={'dims': [2], 'components': [1, 2], 'n_samples': 500,
                                  'noise_fracs': [0.5], 'reference_samples': 2000})
    out = tmp_path / 'out'
    result = invoke(runner, 'oracle', '--config', config, '--out', str(out), '--n-samples', '300')
    assert result.exit_code == 0, result.output
    frame = pd.read_csv(out / 'oracle.csv')
    assert list(frame.columns) == ORACLE_COLUMNS
    assert len(frame) == 2
    assert (frame['n'] == 300).all()


def test_handle_errors_exit_codes(runner):
    def failing(error):
        @click.command()
        @handle_errors(stage="test")
        def command():
            raise error
        return command

    assert runner.invoke(failing(NumericalError("nan loss", {'iter': 3}))).exit_code == EXIT_NUMERICAL
    assert runner.invoke(failing(DataValidationError("bad"))).exit_code == EXIT_VALIDATION
    assert runner.invoke(failing(FileNotFoundError("x.json"))).exit_code == EXIT_VALIDATION
    assert runner.invoke(failing(RuntimeError("boom"))).exit_code == EXIT_FAILURE
