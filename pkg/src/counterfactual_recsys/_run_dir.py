import json
import os
from collections.abc import Generator
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Optional

import filelock

from counterfactual_recsys._logging import logger
from counterfactual_recsys.error import RunLockedError


class LockedRunDirectory:
    """Paths of a run directory, handed out only while its lock is held."""

    def __init__(self, root: Path) -> None:
        self.root = root

    @property
    def split_dir(self) -> Path:
        return self.root / "split"

    @property
    def oracle_dir(self) -> Path:
        return self.root / "oracle"

    def sweep_dir(self, index: int) -> Path:
        return self.oracle_dir / f"seed_{index}"

    @property
    def checkpoint_dir(self) -> Path:
        return self.root / "checkpoints"

    @property
    def train_log_path(self) -> Path:
        return self.root / "train_log.jsonl"

    @property
    def report_dir(self) -> Path:
        return self.root / "reports"

    @property
    def resolved_config_path(self) -> Path:
        return self.root / "resolved_config.json"

    def write_json(self, path: Path, data: dict[str, Any]) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8") as f:
            json.dump(data, f, indent="  ", sort_keys=True)
            f.write("\n")

    def read_json(self, path: Path) -> Optional[dict[str, Any]]:
        try:
            with path.open("r", encoding="utf-8") as f:
                data: dict[str, Any] = json.load(f)
        except FileNotFoundError:
            return None
        return data


class RunDirectory:
    """A run directory written by exactly one command at a time.

    `lock_timeout_seconds` bounds how long a command waits for another one holding the directory; None waits
    forever.
    """

    def __init__(self, root: Optional[Path], lock_timeout_seconds: Optional[float] = None) -> None:
        self.root = root if root is not None else get_default_run_dir()
        self.root.mkdir(parents=True, exist_ok=True)
        self.lock_timeout_seconds = lock_timeout_seconds
        self._lock = filelock.FileLock(self.root / "run.lock")

    @property
    def lock_path(self) -> Path:
        return Path(self._lock.lock_file)

    @contextmanager
    def lock(self) -> Generator[LockedRunDirectory, None, None]:
        if not _try_lock(self._lock):
            logger.info("run directory %s is in use by another command, waiting for it", self.root)
            try:
                self._lock.acquire(timeout=-1 if self.lock_timeout_seconds is None else self.lock_timeout_seconds)
            except filelock.Timeout:
                msg = (
                    f"run directory {self.root} was still in use after {self.lock_timeout_seconds:g}s. "
                    "Wait for the other command to finish or choose another directory with --out"
                )
                raise RunLockedError(msg) from None
        logger.debug("holding %s", self.lock_path)
        try:
            yield LockedRunDirectory(self.root)
        finally:
            self._lock.release()


def _try_lock(lock: filelock.FileLock) -> bool:
    try:
        lock.acquire(blocking=False)
    except filelock.Timeout:
        return False
    return True


def get_default_run_dir() -> Path:
    run_dir = os.environ.get("CFRECSYS_OUT_DIR", None)
    if run_dir:
        return Path(run_dir)
    return Path.cwd() / "runs" / "default"
