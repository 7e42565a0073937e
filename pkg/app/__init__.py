# app/__init__.py
# Builds the runtime context of the toolkit: logging, numeric mode and the
# shared artifact cache

import logging

import torch

from config import get_config
from app.utils.error_handler import setup_logging
from app.models.artifact_cache import ArtifactCache

__version__ = '0.1.0'

# Shared artifact cache, created by create_app()
artifact_cache = None
app_config = None

logger = logging.getLogger(__name__)


def configure_numerics(config_class):
    """
    Apply the numeric mode of a configuration

    Deterministic mode means float64 tensors, deterministic kernels and a
    single intra-op thread.
    """
    dtype = torch.float64 if config_class.DTYPE == 'float64' else torch.float32
    torch.set_default_dtype(dtype)
    torch.use_deterministic_algorithms(bool(config_class.DETERMINISTIC))
    if config_class.NUM_THREADS:
        torch.set_num_threads(int(config_class.NUM_THREADS))


def create_app(config_name=None, config_class=None):
    """
    Initialise the toolkit

    Args:
        config_name (str, optional): key of the config registry
        config_class (type, optional): explicit configuration class

    Returns:
        type: the configuration class in use
    """
    global artifact_cache, app_config

    config_class = config_class or get_config(config_name)
    setup_logging(config_class)
    configure_numerics(config_class)

    artifact_cache = ArtifactCache(config_class)
    app_config = config_class
    logger.info(f"toolkit ready (dtype={config_class.DTYPE}, deterministic={config_class.DETERMINISTIC}, "
                f"cache={config_class.CACHE_FOLDER})")
    return config_class
