# app/services/base_service.py
# Base class of every service of the toolkit
# Gives access to the shared artifact cache and standardises operation logging
# and numerical sanity checks

import logging
import math
from abc import ABC

import torch

from app.utils.error_handler import DataProcessingError, NumericalError

logger = logging.getLogger(__name__)


class BaseService(ABC):
    """
    Abstract base of the services

    Services are the operation layer between the CLI controllers and the
    domain models. They share:
    - the artifact cache (pretrained denoisers, embedder, stage outputs)
    - "<Service> - <operation>: <details>" log records
    - finiteness checks that turn NaN/inf into NumericalError
    """

    def __init__(self, cache=None):
        self._cache = cache

    @property
    def cache(self):
        """
        Artifact cache given at construction, else the one built by create_app()

        Raises:
            DataProcessingError: when no cache is available
        """
        if self._cache is None:
            from app import artifact_cache
            self._cache = artifact_cache
        if self._cache is None:
            raise DataProcessingError("artifact cache not initialised (call create_app first)")
        return self._cache

    @property
    def has_cache(self):
        if self._cache is None:
            from app import artifact_cache
            self._cache = artifact_cache
        return self._cache is not None

    @property
    def show_progress(self):
        """tqdm bars only when the toolkit runs with a config asking for them"""
        from app import app_config
        return bool(app_config is not None and app_config.SHOW_PROGRESS)

    def _log_operation(self, operation, details=""):
        service_name = self.__class__.__name__
        logger.info(f"{service_name} - {operation}: {details}")

    def _check_finite(self, name, value, **diagnostics):
        """
        Raise NumericalError when a loss or tensor holds NaN or inf

        Args:
            name (str): what is being checked (e.g. "L_reg")
            value (float | torch.Tensor): value to check
            **diagnostics: context stored on the exception (iteration, t, ...)
        """
        if torch.is_tensor(value):
            finite = bool(torch.isfinite(value).all())
        else:
            finite = math.isfinite(float(value))
        if not finite:
            diagnostics = {'quantity': name, **diagnostics}
            logger.error(f"{self.__class__.__name__} - non-finite {name}: {diagnostics}")
            raise NumericalError(f"non-finite {name}", diagnostics=diagnostics)
