"""Content-addressed artifact store.

Each artifact lives in ``<root>/objects/<key[:2]>/<key>/`` where ``key`` is the
SHA-256 of (stage name, stage config hash, input artifact keys). ``index.json``
maps keys to records holding the producing config hash, seeds, inputs and the
SHA-256 of every file written.
"""

from __future__ import annotations

import hashlib
import json
import os
import shutil
import tempfile
from dataclasses import dataclass
from pathlib import Path

from filelock import FileLock

from .data import sha256_file


class StaleArtifactError(RuntimeError):
    pass


def artifact_key(stage: str, config_hash: str, inputs: dict[str, str] | None = None) -> str:
    payload = json.dumps({"stage": stage, "config": config_hash, "inputs": inputs or {}}, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()


@dataclass
class ArtifactRecord:
    key: str
    stage: str
    config_hash: str
    seeds: dict
    inputs: dict
    files: dict
    meta: dict

    def to_dict(self) -> dict:
        return self.__dict__.copy()


class ArtifactStore:
    def __init__(self, root: str | Path):
        self.root = Path(root)
        (self.root / "objects").mkdir(parents=True, exist_ok=True)
        self._lock = FileLock(str(self.root / ".index.lock"))

    @property
    def index_path(self) -> Path:
        return self.root / "index.json"

    def _read_index(self) -> dict:
        if not self.index_path.exists():
            return {}
        return json.loads(self.index_path.read_text())

    def path(self, key: str) -> Path:
        return self.root / "objects" / key[:2] / key

    def record(self, key: str) -> ArtifactRecord | None:
        rec = self._read_index().get(key)
        return ArtifactRecord(**rec) if rec else None

    def has(self, key: str) -> bool:
        return self.record(key) is not None and self.path(key).is_dir()

    def verify(self, key: str) -> ArtifactRecord:
        """Re-hash every file of an artifact; raise if any differs from the index."""
        rec = self.record(key)
        if rec is None:
            raise KeyError(key)
        base = self.path(key)
        for name, digest in rec.files.items():
            p = base / name
            if not p.exists() or sha256_file(p) != digest:
                raise StaleArtifactError(f"artifact {key[:12]} ({rec.stage}): {name} does not match its recorded hash")
        return rec

    def staging(self) -> Path:
        """A scratch directory on the store's filesystem, to be passed to :meth:`commit`."""
        return Path(tempfile.mkdtemp(prefix=".stage-", dir=self.root))

    def commit(
        self, key: str, staged: Path, stage: str, config_hash: str, seeds: dict, inputs: dict, meta: dict | None = None
    ) -> ArtifactRecord:
        files = {
            str(p.relative_to(staged)): sha256_file(p) for p in sorted(staged.rglob("*")) if p.is_file()
        }
        rec = ArtifactRecord(key, stage, config_hash, seeds, inputs, files, meta or {})
        dest = self.path(key)
        with self._lock:
            if dest.exists():
                shutil.rmtree(dest)
            dest.parent.mkdir(parents=True, exist_ok=True)
            os.replace(staged, dest)
            index = self._read_index()
            index[key] = rec.to_dict()
            tmp = self.index_path.with_suffix(".tmp")
            tmp.write_text(json.dumps(index, indent=1, sort_keys=True))
            os.replace(tmp, self.index_path)
        return rec

    def find(self, stage: str) -> list[ArtifactRecord]:
        return [ArtifactRecord(**r) for r in self._read_index().values() if r["stage"] == stage]

    def lineage(self, key: str) -> list[ArtifactRecord]:
        """The artifact and every upstream artifact it was derived from, depth first."""
        seen, out, todo = set(), [], [key]
        while todo:
            k = todo.pop()
            if k in seen:
                continue
            seen.add(k)
            rec = self.record(k)
            if rec is None:
                raise KeyError(f"artifact {k} missing from index")
            out.append(rec)
            todo.extend(rec.inputs.values())
        return out
