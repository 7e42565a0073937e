# app/services/file_lock_service.py
# Cross-process file locking for the artifact cache and results directories
# Parallel seed workers share the cache, so every write goes through here

import json
import logging
import os
import tempfile
import threading
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Callable, Dict

from filelock import FileLock, Timeout

from app.utils.error_handler import DataProcessingError

logger = logging.getLogger(__name__)


class FileLockService:
    """
    Locks backed by the filelock package plus atomic writes

    A lock on <file> is the sidecar <file>.lock. Writes go to a temporary file
    in the same directory and are moved into place with os.replace.
    """

    def __init__(self):
        self._locks: Dict[str, FileLock] = {}
        self._locks_guard = threading.Lock()

    def _get_lock(self, file_path: Path) -> FileLock:
        key = str(Path(file_path).absolute())
        with self._locks_guard:
            if key not in self._locks:
                Path(key).parent.mkdir(parents=True, exist_ok=True)
                self._locks[key] = FileLock(key + '.lock')
            return self._locks[key]

    @contextmanager
    def file_lock(self, file_path: Path, timeout: float = 60.0):
        """
        Hold the lock of a file

        Usage:
            with file_lock_service.file_lock(path):
                ...
        """
        lock = self._get_lock(file_path)
        try:
            lock.acquire(timeout=timeout)
        except Timeout:
            raise DataProcessingError(f"could not lock {file_path} within {timeout}s")
        logger.debug(f"lock acquired for {file_path}")
        try:
            yield
        finally:
            lock.release()
            logger.debug(f"lock released for {file_path}")

    def atomic_write(self, file_path: Path, writer: Callable[[Path], None], timeout: float = 60.0):
        """
        Run writer(tmp_path) then move the temporary file onto file_path, under the lock
        """
        file_path = Path(file_path)
        file_path.parent.mkdir(parents=True, exist_ok=True)
        with self.file_lock(file_path, timeout=timeout):
            fd, tmp_name = tempfile.mkstemp(dir=file_path.parent, suffix='.tmp')
            os.close(fd)
            tmp_path = Path(tmp_name)
            try:
                writer(tmp_path)
                os.replace(tmp_path, file_path)
            finally:
                if tmp_path.exists():
                    tmp_path.unlink()

    def safe_json_write(self, file_path: Path, data: Any, timeout: float = 60.0) -> bool:
        """
        Atomic JSON write

        Returns:
            bool: True when the file was written
        """
        def _write(tmp_path):
            with open(tmp_path, 'w', encoding='utf-8') as f:
                json.dump(data, f, ensure_ascii=False, indent=2, sort_keys=True)

        try:
            self.atomic_write(file_path, _write, timeout=timeout)
            return True
        except (OSError, DataProcessingError, TypeError) as e:
            logger.error(f"JSON write failed for {file_path}: {e}")
            return False


# Process-wide instance
file_lock_service = FileLockService()
