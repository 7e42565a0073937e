# tests/conftest.py
# Shared fixtures: tiny rendered worlds, tiny denoisers and a throw-away
# runtime configuration (float64, cache and results under tmp)

import pytest
import torch

from app import create_app
from app.models.artifact_cache import ArtifactCache
from app.models.nets import DenoiserConfig
from app.services.editor_service import EditorService, SamplerConfig
from app.services.nvs_service import NVSService
from app.services.worldgen_service import generate_scene, make_trajectory, render_views
from app.utils.helpers import torch_generator
from config import TestingConfig


# === RUNTIME ===

@pytest.fixture(scope='session')
def runtime(tmp_path_factory):
    """Testing configuration with float64 tensors and folders under tmp"""
    root = tmp_path_factory.mktemp('runtime')

    class UnitTestConfig(TestingConfig):
        RESULTS_FOLDER = root / 'results'
        CACHE_FOLDER = root / 'cache'
        LOG_FILE = root / 'logs' / 'tests.log'
        DTYPE = 'float64'

    return create_app(config_class=UnitTestConfig)


@pytest.fixture(autouse=True)
def float64(runtime):
    # CLI tests call create_app('testing') which switches back to float32
    torch.set_default_dtype(torch.float64)
    torch.use_deterministic_algorithms(False)
    yield


@pytest.fixture
def cache(tmp_path):
    return ArtifactCache(type('CacheConfig', (), {'CACHE_FOLDER': tmp_path / 'cache'}))


# === WORLDS ===

def tiny_world(seed=3, complexity='small', n_views=5, res=(16, 16), clip_length=3):
    scene = generate_scene(seed, complexity)
    traj = make_trajectory(n_views=n_views, radius=4.0, elevation_deg=20.0, azimuth_span_deg=40.0)
    return scene, traj, render_views(scene, traj, res, clip_length=clip_length)


@pytest.fixture
def world():
    """(scene, trajectory, views): one sphere, 5 views at 16×16 in two clips"""
    return tiny_world()


@pytest.fixture
def views(world):
    return world[2]


@pytest.fixture
def medium_world():
    return tiny_world(seed=11, complexity='medium', n_views=4, res=(24, 24), clip_length=4)


# === DENOISERS ===

def tiny_denoiser_config(timesteps=50):
    return DenoiserConfig(channels=8, depth=1, heads=2, latent_downscale=2,
                          cond_dims=(16, 8), timesteps=timesteps)


@pytest.fixture
def teacher():
    """Untrained multi-view denoiser on a 50-step linear schedule"""
    return NVSService().build_teacher(tiny_denoiser_config(50), T=50, generator=torch_generator(0))


@pytest.fixture
def editor():
    """Untrained editor on a 4-step EDM schedule"""
    return EditorService().build_editor(tiny_denoiser_config(4), n_codes=6, T=4, generator=torch_generator(1))


@pytest.fixture
def sampler():
    return SamplerConfig(s_T=2.0, s_I=1.5, steps=4, refl_range=(3, 4))
