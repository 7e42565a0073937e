# app/models/artifact_cache.py
# Lazy, mtime-aware cache of trained artifacts (pretrained denoisers, toy
# embedder, Stage-1 teachers) keyed by (kind, config hash)

import logging
from pathlib import Path

from app.services.file_lock_service import file_lock_service
from app.utils.error_handler import DataProcessingError
from app.utils.formats import read_named_arrays, write_named_arrays

logger = logging.getLogger(__name__)

ARTIFACT_SUFFIX = '.dc3k'


class ArtifactCache:
    """
    Artifact store shared by all experiments

    Entries are loaded on first access and kept in memory; an entry is reloaded
    when its file is newer than the last load (another worker rewrote it).
    """

    def __init__(self, config):
        self.config = config
        self.folder = Path(config.CACHE_FOLDER)
        self._entries = {}
        self._last_load_time = {}

    def path_for(self, kind, key):
        return self.folder / kind / f"{key}{ARTIFACT_SUFFIX}"

    def exists(self, kind, key):
        return self.path_for(kind, key).exists()

    def get(self, kind, key):
        """
        Arrays and metadata of an entry, None when absent

        Returns:
            tuple | None: (dict of numpy arrays, meta dict)
        """
        path = self.path_for(kind, key)
        if not path.exists():
            return None
        if self._should_reload(kind, key):
            self._load(kind, key)
        return self._entries[(kind, key)]

    def put(self, kind, key, arrays, meta):
        """Write an entry atomically under its file lock and keep it in memory"""
        path = self.path_for(kind, key)
        file_lock_service.atomic_write(path, lambda tmp: write_named_arrays(tmp, arrays, meta))
        self._entries[(kind, key)] = (arrays, meta)
        self._last_load_time[(kind, key)] = path.stat().st_mtime
        logger.info(f"cached {kind}/{key} ({len(arrays)} arrays)")
        return path

    def invalidate(self, kind=None):
        """Drop in-memory entries (all of them, or one kind)"""
        for entry in [e for e in self._entries if kind is None or e[0] == kind]:
            self._entries.pop(entry, None)
            self._last_load_time.pop(entry, None)

    def entries(self):
        """Description of every entry on disk"""
        if not self.folder.exists():
            return []
        rows = []
        for path in sorted(self.folder.glob(f"*/*{ARTIFACT_SUFFIX}")):
            stat = path.stat()
            rows.append({
                'kind': path.parent.name,
                'key': path.stem,
                'bytes': stat.st_size,
                'modified': stat.st_mtime,
                'loaded': (path.parent.name, path.stem) in self._entries,
            })
        return rows

    def _should_reload(self, kind, key):
        return (kind, key) not in self._entries or self._file_has_changed(kind, key)

    def _file_has_changed(self, kind, key):
        try:
            last_modified = self.path_for(kind, key).stat().st_mtime
        except OSError as e:
            logger.warning(f"cannot stat {kind}/{key}: {e}")
            return True
        return last_modified > self._last_load_time.get((kind, key), 0)

    def _load(self, kind, key):
        path = self.path_for(kind, key)
        try:
            with file_lock_service.file_lock(path):
                arrays, meta = read_named_arrays(path)
        except OSError as e:
            raise DataProcessingError(f"cannot read cached artifact {path}: {e}")
        self._entries[(kind, key)] = (arrays, meta)
        self._last_load_time[(kind, key)] = path.stat().st_mtime
        logger.info(f"loaded {kind}/{key} from cache")
