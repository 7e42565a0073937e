# config.py
# Runtime configuration of the consistedit toolkit
# Defines the parameters for the different environments (development, tests, deterministic runs)

import os           # Environment variables
import sys          # Detect a frozen (PyInstaller) executable
from pathlib import Path


class Config:
    """
    Base runtime configuration

    Holds every default the application needs at runtime. The other classes
    inherit from it and override a handful of values.
    """

    # === APPLICATION PATHS ===
    if getattr(sys, 'frozen', False):
        BASE_DIR = Path(sys.executable).parent
    else:
        BASE_DIR = Path(__file__).parent

    RESULTS_FOLDER = Path(os.environ.get('CONSISTEDIT_RESULTS', BASE_DIR / 'results'))  # One sub-folder per experiment
    CACHE_FOLDER = Path(os.environ.get('CONSISTEDIT_CACHE', BASE_DIR / 'cache'))        # Pretrained teacher/editor/embedder checkpoints

    # === LOGGING ===
    LOG_LEVEL = os.environ.get('LOG_LEVEL', 'INFO')
    LOG_FILE = BASE_DIR / 'logs' / 'consistedit.log'

    # === NUMERICS ===
    DETERMINISTIC = False
    DTYPE = 'float32'
    DEVICE = os.environ.get('CONSISTEDIT_DEVICE', 'cpu')
    NUM_THREADS = int(os.environ.get('CONSISTEDIT_THREADS', '0'))  # 0 = let torch decide

    # === PROGRESS BARS ===
    SHOW_PROGRESS = True


class DevelopmentConfig(Config):
    """
    Configuration used on a workstation

    Same numerics as the base class, more verbose logs.
    """
    LOG_LEVEL = os.environ.get('LOG_LEVEL', 'DEBUG')


class TestingConfig(Config):
    """
    Configuration used by the automated tests

    Writes results and caches into separate folders so the tests never touch
    real experiment outputs.
    """
    RESULTS_FOLDER = Config.BASE_DIR / 'test_results'
    CACHE_FOLDER = Config.BASE_DIR / 'test_cache'
    LOG_LEVEL = 'WARNING'
    SHOW_PROGRESS = False


class DeterministicConfig(Config):
    """
    64-bit deterministic configuration

    Selected whenever DISCO3D_DETERMINISTIC=1 (or CONSISTEDIT_DETERMINISTIC=1). Identical config + seed then
    reproduce metrics.csv byte for byte.
    """
    DETERMINISTIC = True
    DTYPE = 'float64'
    NUM_THREADS = 1


# === CONFIGURATION REGISTRY ===
DETERMINISTIC_ENV_VARS = ('DISCO3D_DETERMINISTIC', 'CONSISTEDIT_DETERMINISTIC')

config = {
    'development': DevelopmentConfig,
    'testing': TestingConfig,
    'deterministic': DeterministicConfig,
    'default': Config,
}


def get_config(name=None):
    """
    Return the configuration class matching the environment

    DISCO3D_DETERMINISTIC=1 (alias CONSISTEDIT_DETERMINISTIC=1) always wins; otherwise the explicit name, then
    CONSISTEDIT_ENV, selects the entry of the registry (unknown names fall back
    to the default).

    Returns:
        Class: the configuration class

    Example:
        config_class = get_config()
    """
    if any(os.environ.get(var) == '1' for var in DETERMINISTIC_ENV_VARS):
        return DeterministicConfig

    env = name or os.environ.get('CONSISTEDIT_ENV', 'default')
    return config.get(env, config['default'])
