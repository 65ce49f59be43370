"""Content hashes and run manifests."""
from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import __version__


def git_blob_hash(path) -> str:
    """SHA-1 of ``b"blob <size>\\0" + content``, as ``git hash-object`` computes it."""
    data = Path(path).read_bytes()
    h = hashlib.sha1()
    h.update(b"blob %d\0" % len(data))
    h.update(data)
    return h.hexdigest()


@dataclass
class RunManifest:
    config: dict
    artifacts: dict[str, str] = field(default_factory=dict)   # relative path -> hash
    tool_version: str = __version__
    started: str = ""
    finished: str = ""
    stages: list[str] = field(default_factory=list)

    def add(self, root: Path, path: Path) -> None:
        self.artifacts[str(Path(path).relative_to(root))] = git_blob_hash(path)

    def verify(self, root: Path) -> list[str]:
        """Artifacts that are missing or whose content changed."""
        bad = []
        for rel, digest in self.artifacts.items():
            p = Path(root) / rel
            if not p.exists() or git_blob_hash(p) != digest:
                bad.append(rel)
        return bad

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), sort_keys=True, indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))


def now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")
