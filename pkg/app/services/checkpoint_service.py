# app/services/checkpoint_service.py
# Checkpoint persistence: model state ↔ named arrays (DC3K files) with the
# schedule, network sizes and the experiment config hash in the header

import logging
from pathlib import Path

import numpy as np
import torch

from app.models.nets import DenoiserConfig, EditorDenoiser, MultiViewDenoiser, attach_lora
from app.models.schedule import schedule_from_dict
from app.services.base_service import BaseService
from app.services.editor_service import EditorHandle
from app.services.file_lock_service import file_lock_service
from app.services.nvs_service import TeacherHandle
from app.utils.error_handler import DataProcessingError
from app.utils.formats import read_named_arrays, write_named_arrays

logger = logging.getLogger(__name__)

MODEL_KINDS = ('teacher', 'editor')


def state_to_arrays(model):
    """state_dict (parameters and buffers) → dict of numpy arrays"""
    return {name: tensor.detach().cpu().numpy().copy() for name, tensor in model.state_dict().items()}


def arrays_to_state(model, arrays):
    """
    Load named arrays into a model, keeping the stored dtypes

    Raises:
        DataProcessingError: missing or unexpected entries
    """
    state = {name: torch.from_numpy(np.array(value)) for name, value in arrays.items()}
    expected = set(model.state_dict())
    missing = expected - set(state)
    unexpected = set(state) - expected
    if missing or unexpected:
        raise DataProcessingError(
            f"checkpoint does not fit the model (missing {sorted(missing)[:5]}, unexpected {sorted(unexpected)[:5]})"
        )
    model.load_state_dict(state)
    return model


def handle_meta(kind, handle, config_hash=None, **extra):
    """Header describing how to rebuild a denoiser handle"""
    meta = {
        'kind': kind,
        'denoiser': handle.model.config.to_dict(),
        'schedule': handle.schedule.to_dict(),
        'lora_rank': int(handle.lora_rank),
        'config_hash': config_hash,
        'history': [float(v) for v in handle.history],
        **extra,
    }
    if kind == 'editor':
        meta['n_codes'] = int(handle.model.n_codes)
        meta['sigma_data'] = float(handle.model.sigma_data)
    return meta


def build_handle(arrays, meta):
    """Rebuild a TeacherHandle or EditorHandle from checkpoint content"""
    kind = meta.get('kind')
    if kind not in MODEL_KINDS:
        raise DataProcessingError(f"checkpoint kind {kind!r} is not a denoiser")
    config = DenoiserConfig.from_dict(meta['denoiser'])
    schedule = schedule_from_dict(meta['schedule'])
    rank = int(meta.get('lora_rank', 0))
    if kind == 'teacher':
        model = MultiViewDenoiser(config)
        if rank:
            attach_lora(model, 'temporal', rank)
    else:
        model = EditorDenoiser(config, meta['n_codes'], schedule, meta.get('sigma_data', 0.5))
        if rank:
            attach_lora(model, 'self_attention', rank)
    arrays_to_state(model, arrays)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    handle_class = TeacherHandle if kind == 'teacher' else EditorHandle
    return handle_class(model, schedule, rank, list(meta.get('history', [])))


class CheckpointService(BaseService):
    """Saving and loading of denoisers, on disk and through the artifact cache"""

    def save(self, path, kind, handle, config_hash=None, **extra):
        """
        Write a denoiser checkpoint atomically

        Returns:
            Path: the written file
        """
        path = Path(path)
        arrays = state_to_arrays(handle.model)
        meta = handle_meta(kind, handle, config_hash, **extra)
        file_lock_service.atomic_write(path, lambda tmp: write_named_arrays(tmp, arrays, meta))
        self._log_operation("save", f"{kind} → {path} ({len(arrays)} arrays)")
        return path

    def load(self, path, expected_hash=None):
        """
        Read a denoiser checkpoint

        A config hash differing from expected_hash is logged as a warning, the
        checkpoint is still returned.
        """
        path = Path(path)
        if not path.exists():
            raise DataProcessingError(f"checkpoint {path} does not exist")
        with file_lock_service.file_lock(path):
            arrays, meta = read_named_arrays(path)
        self._warn_on_hash(path, meta, expected_hash)
        return build_handle(arrays, meta)

    # === ARTIFACT CACHE ===

    def cache_handle(self, kind, key, handle, config_hash=None, model_kind=None, **extra):
        """Store a denoiser under (kind, key); model_kind defaults to kind (e.g. kind "stage1" holds teachers)"""
        arrays = state_to_arrays(handle.model)
        meta = handle_meta(model_kind or kind, handle, config_hash, **extra)
        return self.cache.put(kind, key, arrays, meta)

    def cached_handle(self, kind, key):
        """Denoiser stored under (kind, key), None when absent"""
        entry = self.cache.get(kind, key)
        if entry is None:
            return None
        arrays, meta = entry
        self._log_operation("cached_handle", f"{kind}/{key}")
        return build_handle(arrays, meta)

    @staticmethod
    def _warn_on_hash(path, meta, expected_hash):
        stored = meta.get('config_hash')
        if expected_hash is not None and stored != expected_hash:
            logger.warning(f"checkpoint {path} was written under config hash {str(stored)[:12]}, "
                           f"current config hash is {expected_hash[:12]}")
