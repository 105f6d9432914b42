"""The on-disk data repository: directory layout, run lock and stage records."""
from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

from filelock import FileLock, Timeout

LAYOUT = ("datasets", "detections", "crops", "features", "models", "maps", "reports", "runs", "predictions")


class RepositoryBusy(RuntimeError):
    pass


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def digest_json(obj: Any) -> str:
    return sha256_bytes(json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str).encode("utf-8"))


def write_atomic(path: Path, data: bytes | str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    with os.fdopen(fd, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


@dataclass
class StageRecord:
    name: str
    key: str
    outputs: dict[str, str] = field(default_factory=dict)  # relative path -> sha256
    cache_hit: bool = False
    stale: bool = False

    @property
    def digest(self) -> str:
        return digest_json(self.outputs)

    def to_dict(self) -> dict:
        return {"name": self.name, "key": self.key, "digest": self.digest, "outputs": self.outputs,
                "cache_hit": self.cache_hit, "stale": self.stale}


class Repository:
    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)

    def init(self) -> "Repository":
        for d in LAYOUT:
            (self.root / d).mkdir(parents=True, exist_ok=True)
        (self.root / "runs" / "stages").mkdir(exist_ok=True)
        return self

    def __getattr__(self, name: str) -> Path:
        if name in LAYOUT:
            return self.root / name
        raise AttributeError(name)

    def rel(self, path: Path) -> str:
        return Path(path).relative_to(self.root).as_posix()

    def lock(self, timeout: float = 0) -> FileLock:
        lock = FileLock(str(self.root / ".lock"), timeout=timeout)
        try:
            lock.acquire()
        except Timeout:
            raise RepositoryBusy(f"another pipeline run holds {self.root / '.lock'}") from None
        return lock

    # stage records live in runs/stages/<name>-<key>.json
    def _record_path(self, name: str, key: str) -> Path:
        return self.root / "runs" / "stages" / f"{name}-{key}.json"

    def cached_stage(self, name: str, key: str) -> StageRecord | None:
        p = self._record_path(name, key)
        if not p.exists():
            return None
        try:
            doc = json.loads(p.read_text(encoding="utf-8"))
        except ValueError:
            return None
        outputs = doc.get("outputs", {})
        for rel, digest in outputs.items():
            f = self.root / rel
            if not f.exists() or sha256_file(f) != digest:
                return None
        return StageRecord(name, key, outputs, cache_hit=True)

    def record_stage(self, name: str, key: str, files: Iterable[Path]) -> StageRecord:
        outputs = {self.rel(f): sha256_file(f) for f in sorted(files)}
        rec = StageRecord(name, key, outputs)
        write_atomic(self._record_path(name, key), json.dumps({"name": name, "key": key, "outputs": outputs}, indent=1, sort_keys=True) + "\n")
        return rec
