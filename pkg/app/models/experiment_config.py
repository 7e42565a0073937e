# app/models/experiment_config.py
# Experiment configuration (JSON file) validated with pydantic
# Every field is written to the results directory so a run can be replayed

import hashlib
import json
import logging
from pathlib import Path
from typing import List, Tuple

from pydantic import BaseModel, Extra, ValidationError, root_validator, validator

from app.utils.error_handler import DataValidationError

logger = logging.getLogger(__name__)

CONFIG_VERSION = 1


class _Section(BaseModel):
    class Config:
        extra = Extra.forbid
        allow_mutation = False


class DenoiserSection(_Section):
    channels: int = 32
    depth: int = 2
    heads: int = 4
    latent_downscale: int = 4
    ref_dim: int = 64
    code_dim: int = 32


class WorldSection(_Section):
    scene_seed: int = 0
    complexity: str = 'medium'
    resolution: Tuple[int, int] = (64, 64)
    n_views: int = 49
    clip_length: int = 25
    radius: float = 4.0
    elevation_deg: float = 20.0
    azimuth_span_deg: float = 120.0
    fov_deg: float = 50.0
    edit_code: int = 1

    @validator('complexity')
    def _complexity(cls, value):
        if value not in ('small', 'medium'):
            raise ValueError("complexity must be 'small' or 'medium'")
        return value

    @validator('resolution')
    def _resolution(cls, value):
        if min(value) < 16:
            raise ValueError("resolution must be at least 16×16")
        return value

    @validator('clip_length')
    def _clip_length(cls, value):
        if not 2 <= value <= 25:
            raise ValueError("clip_length must lie in [2, 25]")
        return value

    @validator('n_views')
    def _n_views(cls, value):
        if value < 2:
            raise ValueError("n_views must be at least 2")
        return value


class PretrainSection(_Section):
    n_scenes: int = 16
    n_val_scenes: int = 4
    scene_seed_offset: int = 1000
    views_per_scene: int = 13
    teacher_steps: int = 3000
    editor_steps: int = 3000
    teacher_clip_views: int = 8
    editor_batch: int = 16
    lr: float = 2e-4
    cond_dropout: float = 0.1
    teacher_T: int = 1000
    editor_T: int = 20
    teacher: DenoiserSection = DenoiserSection()
    editor: DenoiserSection = DenoiserSection()

    @validator('n_scenes')
    def _n_scenes(cls, value):
        if value < 8:
            raise ValueError("pretraining needs at least 8 distinct scenes")
        return value

    @validator('cond_dropout')
    def _dropout(cls, value):
        if not 0.0 <= value < 1.0:
            raise ValueError("cond_dropout must lie in [0, 1)")
        return value


class Stage1Section(_Section):
    iters: int = 200
    lr: float = 5e-4
    rank: int = 64

    @validator('iters')
    def _iters(cls, value):
        if value < 0:
            raise ValueError("iters must be non-negative")
        return value


class SamplerSection(_Section):
    s_T: float = 7.5
    s_I: float = 1.5
    steps: int = 20
    refl_range: Tuple[int, int] = (15, 20)
    teacher_steps: int = 50

    @root_validator(skip_on_failure=True)
    def _ranges(cls, values):
        t1, t2 = values['refl_range']
        if not 1 <= t1 <= t2 <= values['steps']:
            raise ValueError("refl_range must satisfy 1 <= T1 <= T2 <= steps")
        if values['s_T'] < 1.0 or values['s_I'] < 1.0:
            raise ValueError("guidance scales must be >= 1")
        return values


class DistillSection(_Section):
    alpha: float = 1e2
    lr: float = 4e-4
    iters: int = 100
    omega: str = 'sigma_sq'
    t_range_frac: Tuple[float, float] = (0.02, 0.98)
    phi_steps_per_theta_step: int = 1
    cfg_teacher: float = 3.0
    rank: int = 32

    @validator('alpha')
    def _alpha(cls, value):
        if value < 0:
            raise ValueError("alpha must be non-negative")
        return value

    @validator('iters')
    def _iters(cls, value):
        if value < 1:
            raise ValueError("iters must be at least 1")
        return value

    @validator('omega')
    def _omega(cls, value):
        if value not in ('const', 'sigma_sq'):
            raise ValueError("omega must be 'const' or 'sigma_sq'")
        return value


class SplatSection(_Section):
    n_gaussians: int = 500
    fit_iters: int = 2000
    fit_lr: float = 1e-2
    update_iters: int = 300
    update_lr: float = 5e-3
    l1: float = 1.0
    perc: float = 0.2
    mask: str = 'none'
    perceptual_seed: int = 0

    @root_validator(skip_on_failure=True)
    def _weights(cls, values):
        if values['l1'] < 0 or values['perc'] < 0 or (values['l1'] == 0 and values['perc'] == 0):
            raise ValueError("loss weights must be >= 0 and not both 0")
        if values['mask'] not in ('none', 'gt'):
            raise ValueError("mask must be 'none' or 'gt'")
        return values


class EvalSection(_Section):
    pairs: str = 'adjacent'
    embedder_steps: int = 1500
    embed_dim: int = 32

    @validator('pairs')
    def _pairs(cls, value):
        if value not in ('adjacent', 'all'):
            raise ValueError("pairs must be 'adjacent' or 'all'")
        return value


class AblationSection(_Section):
    skip_stage1: bool = False
    nvs_direct: bool = False
    alpha_sweep: List[float] = []


class OracleSection(_Section):
    dims: List[int] = [2]
    components: List[int] = [1, 2]
    n_samples: int = 10000
    noise_fracs: List[float] = [0.1, 0.5, 0.9]
    reference_samples: int = 1000000


class ExperimentConfig(_Section):
    """
    Complete description of an experiment

    version is required; unknown keys anywhere are rejected.
    """
    version: int
    seed: int = 0
    world: WorldSection = WorldSection()
    pretrain: PretrainSection = PretrainSection()
    stage1: Stage1Section = Stage1Section()
    sampler: SamplerSection = SamplerSection()
    distill: DistillSection = DistillSection()
    splat: SplatSection = SplatSection()
    eval: EvalSection = EvalSection()
    ablation: AblationSection = AblationSection()
    oracle: OracleSection = OracleSection()

    @validator('version')
    def _version(cls, value):
        if value != CONFIG_VERSION:
            raise ValueError(f"unsupported config version {value} (expected {CONFIG_VERSION})")
        return value

    @root_validator(skip_on_failure=True)
    def _resolution_fits_denoisers(cls, values):
        h, w = values['world'].resolution
        for name in ('teacher', 'editor'):
            factor = getattr(values['pretrain'], name).latent_downscale
            if h % factor or w % factor:
                raise ValueError(f"resolution {h}×{w} not divisible by the {name} latent_downscale {factor}")
        return values

    def canonical_json(self):
        return json.dumps(json.loads(self.json()), sort_keys=True, separators=(',', ':'))

    def config_hash(self):
        """SHA-256 of the canonical JSON form"""
        return hashlib.sha256(self.canonical_json().encode('utf-8')).hexdigest()

    def section_hash(self, *names):
        """Hash of a few sections only (keys of shared cached artifacts)"""
        payload = {name: json.loads(getattr(self, name).json()) for name in names}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode('utf-8')).hexdigest()[:16]

    def with_updates(self, **sections):
        """
        Copy with some fields replaced, e.g. with_updates(distill={'alpha': 0.0}, seed=3)

        The result is validated again.
        """
        data = json.loads(self.json())
        for key, value in sections.items():
            if isinstance(value, dict):
                data[key] = {**data[key], **value}
            else:
                data[key] = value
        return parse_experiment_config(data)


def parse_experiment_config(data):
    """Validate a config dict, turning pydantic errors into DataValidationError"""
    try:
        return ExperimentConfig.parse_obj(data)
    except ValidationError as e:
        raise DataValidationError(f"invalid experiment config: {e}", error_code="config")


def load_experiment_config(path):
    """
    Read and validate an experiment config file

    Args:
        path (str | Path): JSON file with a "version" field

    Returns:
        ExperimentConfig
    """
    path = Path(path)
    if not path.exists():
        raise DataValidationError(f"config file {path} does not exist", error_code="config")
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except ValueError as e:
        raise DataValidationError(f"config file {path} is not valid JSON: {e}", error_code="config")
    config = parse_experiment_config(data)
    logger.info(f"loaded config {path} (hash {config.config_hash()[:12]})")
    return config


def default_experiment_config(**overrides):
    return parse_experiment_config({'version': CONFIG_VERSION, **overrides})
