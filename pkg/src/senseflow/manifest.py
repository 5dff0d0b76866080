"""Run manifest: resolved config, artifact list and per-stage resources."""

from __future__ import annotations

import fcntl
import json
import logging
import tempfile
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import psutil

from . import __version__

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"


def _safe_write_json(path: Path, data: dict) -> bool:
    """Atomic, locked write of a JSON document.

    Uses flock + temp file + rename so concurrent writers never leave a
    partially written manifest behind.
    """
    path = Path(path)
    lock_path = path.with_suffix(path.suffix + ".lock")
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        with open(lock_path, "w") as lock_fd:
            fcntl.flock(lock_fd, fcntl.LOCK_EX)
            tmp_path: Path | None = None
            try:
                fd = tempfile.NamedTemporaryFile(
                    mode="w", dir=path.parent, suffix=".tmp", delete=False
                )
                tmp_path = Path(fd.name)
                json.dump(data, fd, indent=2, sort_keys=True)
                fd.flush()
                fd.close()
                tmp_path.rename(path)
                return True
            except OSError:
                if tmp_path is not None:
                    tmp_path.unlink(missing_ok=True)
                return False
            finally:
                fcntl.flock(lock_fd, fcntl.LOCK_UN)
    except OSError:
        return False


def read_json(path: Path) -> dict | None:
    """Parsed JSON object at ``path``, or None if missing or invalid."""
    path = Path(path)
    if not path.exists():
        return None
    try:
        with path.open() as f:
            data = json.load(f)
    except (json.JSONDecodeError, OSError):
        return None
    return data if isinstance(data, dict) else None


@dataclass
class StageRecord:
    seconds: float
    rss_mb: float


@dataclass
class RunManifest:
    config: dict
    version: str = __version__
    arrays: list[str] = field(default_factory=list)
    stages: dict[str, StageRecord] = field(default_factory=dict)

    def add_array(self, name: str) -> None:
        if name not in self.arrays:
            self.arrays.append(name)

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "config": self.config,
            "arrays": sorted(self.arrays),
            "stages": {k: {"seconds": v.seconds, "rss_mb": v.rss_mb} for k, v in self.stages.items()},
        }

    @classmethod
    def from_dict(cls, data: dict) -> RunManifest:
        stages = {
            k: StageRecord(float(v.get("seconds", 0.0)), float(v.get("rss_mb", 0.0)))
            for k, v in data.get("stages", {}).items()
        }
        return cls(data.get("config", {}), data.get("version", ""), list(data.get("arrays", [])), stages)

    def save(self, run_dir: Path) -> None:
        path = Path(run_dir) / MANIFEST_NAME
        if not _safe_write_json(path, self.to_dict()):
            raise OSError(f"could not write {path}")

    @classmethod
    def load(cls, run_dir: Path) -> RunManifest | None:
        data = read_json(Path(run_dir) / MANIFEST_NAME)
        return None if data is None else cls.from_dict(data)

    @contextmanager
    def stage(self, name: str) -> Iterator[None]:
        """Record wall time and resident memory of the enclosed block."""
        proc = psutil.Process()
        start = time.perf_counter()
        logger.info("stage %s started", name)
        try:
            yield
        finally:
            seconds = time.perf_counter() - start
            rss = proc.memory_info().rss / 2 ** 20
            previous = self.stages.get(name)
            if previous is not None:
                seconds += previous.seconds
                rss = max(rss, previous.rss_mb)
            self.stages[name] = StageRecord(seconds, rss)
            logger.info("stage %s finished in %.2f s (rss %.0f MiB)", name, seconds, rss)
