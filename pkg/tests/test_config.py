# tests/test_config.py
# Experiment configs, runtime configs and command-line validators

import json

import pytest

from app.models.experiment_config import (
    CONFIG_VERSION, default_experiment_config, load_experiment_config, parse_experiment_config,
)
from app.utils.error_handler import DataValidationError
from app.utils.validators import (
    ensure_valid, parse_seeds, validate_distill_options, validate_results_dir, validate_run_options,
    validate_stage3_options,
)
from config import Config, DeterministicConfig, DevelopmentConfig, TestingConfig, get_config


# === EXPERIMENT CONFIG ===

def test_defaults_are_valid():
    config = default_experiment_config()
    assert config.version == CONFIG_VERSION
    assert config.world.n_views == 49 and config.world.clip_length == 25
    assert config.sampler.refl_range == (15, 20)
    assert config.distill.alpha == 100.0
    assert (config.splat.l1, config.splat.perc) == (1.0, 0.2)


@pytest.mark.parametrize('data', [
    {'seed': 0},
    {'version': 2},
    {'version': 1, 'colour': 'red'},
    {'version': 1, 'distill': {'alpha': 1.0, 'beta': 2.0}},
    {'version': 1, 'sampler': {'steps': 20, 'refl_range': [18, 25]}},
    {'version': 1, 'sampler': {'s_T': 0.5}},
    {'version': 1, 'world': {'resolution': [8, 8]}},
    {'version': 1, 'world': {'resolution': [66, 64]}},
    {'version': 1, 'world': {'clip_length': 30}},
    {'version': 1, 'pretrain': {'n_scenes': 4}},
    {'version': 1, 'splat': {'l1': 0.0, 'perc': 0.0}},
    {'version': 1, 'distill': {'alpha': -1.0}},
])
def test_invalid_configs_are_rejected(data):
    with pytest.raises(DataValidationError):
        parse_experiment_config(data)


def test_config_hash():
    a = default_experiment_config()
    b = parse_experiment_config({'version': 1, 'seed': 0})
    assert a.config_hash() == b.config_hash()
    assert len(a.config_hash()) == 64
    assert a.with_updates(seed=1).config_hash() != a.config_hash()
    assert a.section_hash('pretrain') == a.with_updates(seed=1).section_hash('pretrain')
    assert a.section_hash('pretrain') != a.with_updates(pretrain={'lr': 1e-3}).section_hash('pretrain')


def test_with_updates_revalidates():
    config = default_experiment_config()
    updated = config.with_updates(distill={'alpha': 0.0}, seed=3)
    assert updated.distill.alpha == 0.0 and updated.seed == 3
    assert updated.distill.iters == config.distill.iters
    assert config.distill.alpha == 100.0
    with pytest.raises(DataValidationError):
        config.with_updates(distill={'iters': 0})


def test_load_experiment_config(tmp_path):
    with pytest.raises(DataValidationError):
        load_experiment_config(tmp_path / 'absent.json')
    broken = tmp_path / 'broken.json'
    broken.write_text('{"version": 1,', encoding='utf-8')
    with pytest.raises(DataValidationError):
        load_experiment_config(broken)
    good = tmp_path / 'good.json'
    good.write_text(json.dumps({'version': 1, 'seed': 7, 'world': {'n_views': 5}}), encoding='utf-8')
    config = load_experiment_config(good)
    assert config.seed == 7 and config.world.n_views == 5


# === RUNTIME CONFIG ===

def test_get_config(monkeypatch):
    for var in ('DISCO3D_DETERMINISTIC', 'CONSISTEDIT_DETERMINISTIC'):
        monkeypatch.delenv(var, raising=False)
    monkeypatch.delenv('CONSISTEDIT_ENV', raising=False)
    assert get_config('testing') is TestingConfig
    assert get_config('development') is DevelopmentConfig
    assert get_config('nonsense').DTYPE == 'float32'
    monkeypatch.setenv('CONSISTEDIT_ENV', 'testing')
    assert get_config() is TestingConfig
    monkeypatch.setenv('CONSISTEDIT_DETERMINISTIC', '1')
    assert get_config('testing') is DeterministicConfig
    assert DeterministicConfig.DTYPE == 'float64' and DeterministicConfig.NUM_THREADS == 1


@pytest.mark.parametrize('var', ['DISCO3D_DETERMINISTIC', 'CONSISTEDIT_DETERMINISTIC'])
def test_deterministic_env_var(monkeypatch, var):
    for name in ('DISCO3D_DETERMINISTIC', 'CONSISTEDIT_DETERMINISTIC', 'CONSISTEDIT_ENV'):
        monkeypatch.delenv(name, raising=False)
    monkeypatch.setenv(var, '1')
    config_class = get_config()
    assert config_class.DETERMINISTIC is True
    assert config_class.DTYPE == 'float64'
    monkeypatch.setenv(var, '0')
    assert get_config().DETERMINISTIC is False


# === VALIDATORS ===

def test_distill_and_stage3_options():
    assert validate_distill_options(alpha=0.0, iters=1, lr=1e-4, omega='const', cfg_teacher=1.0) == (True, [])
    ok, errors = validate_distill_options(alpha=-1.0, iters=0, omega='sigma')
    assert not ok and len(errors) == 3
    assert validate_stage3_options(mask='gt', l1=1.0, perc=0.0)[0]
    ok, errors = validate_stage3_options(mask='box', l1=0.0, perc=0.0)
    assert not ok and len(errors) == 2


def test_run_options_and_seeds():
    assert parse_seeds('0-3') == [0, 1, 2, 3]
    assert parse_seeds('4,1, 2') == [4, 1, 2]
    with pytest.raises(DataValidationError):
        parse_seeds('a,b')
    assert validate_run_options([0, 1], 2)[0]
    ok, errors = validate_run_options([1, 1], 0)
    assert not ok and len(errors) == 2
    with pytest.raises(DataValidationError) as info:
        ensure_valid((False, ['first', 'second']))
    assert 'first; second' in str(info.value)


def test_results_dir_inputs(tmp_path):
    ok, errors = validate_results_dir(tmp_path, 'distill')
    assert not ok and 'views/manifest.json' in errors[0]
    (tmp_path / 'views').mkdir()
    (tmp_path / 'views' / 'manifest.json').write_text('{}', encoding='utf-8')
    assert validate_results_dir(tmp_path, 'stage3') == (True, [])
    assert validate_results_dir(tmp_path, 'worldgen') == (True, [])


@pytest.mark.parametrize('name', ['default.json', 'tiny.json'])
def test_shipped_experiment_files_are_valid(name):
    config = load_experiment_config(Config.BASE_DIR / 'experiments' / name)
    assert config.version == CONFIG_VERSION
