"""Run manifests: what a command was given and what it wrote.

Everything in a manifest except ``timestamps`` is a pure function of the
command, its options, the seed and the input bytes, so two runs with the
same inputs produce manifests that differ only there.
"""
from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

from .errors import InvalidParameter

MANIFEST_NAME = "manifest.json"


def tool_version() -> str:
    from . import __version__
    return __version__


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def tree_sha256(path) -> str:
    """Hash of a file, or of a directory's relative paths and file contents.

    Manifests inside the tree are skipped: their timestamps would make the
    hash of an otherwise identical dataset differ between runs.
    """
    p = Path(path)
    if p.is_file():
        return file_sha256(p)
    if not p.is_dir():
        raise InvalidParameter(f"input not found: {p}")
    h = hashlib.sha256()
    for f in sorted(q for q in p.rglob("*") if q.is_file() and q.name != MANIFEST_NAME):
        h.update(f.relative_to(p).as_posix().encode() + b"\0")
        h.update(file_sha256(f).encode())
    return h.hexdigest()


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


@dataclass
class RunManifest:
    command: str
    options: dict
    config: dict
    seed: int
    inputs: dict = field(default_factory=dict)       # label -> {"path", "sha256"}
    artifacts: dict = field(default_factory=dict)    # relative path -> sha256
    timestamps: dict = field(default_factory=dict)
    version: str = field(default_factory=tool_version)

    @property
    def run_id(self) -> str:
        key = canonical_json({"command": self.command, "options": self.options, "config": self.config,
                              "seed": self.seed,
                              "inputs": {k: v["sha256"] for k, v in sorted(self.inputs.items())},
                              "version": self.version})
        return hashlib.sha256(key.encode()).hexdigest()[:16]

    def add_input(self, label: str, path) -> None:
        if path is None:
            return
        self.inputs[label] = {"path": os.fspath(path), "sha256": tree_sha256(path)}

    def record_artifacts(self, out_dir) -> None:
        out = Path(out_dir)
        self.artifacts = {f.relative_to(out).as_posix(): file_sha256(f)
                          for f in sorted(q for q in out.rglob("*") if q.is_file())
                          if f.name != MANIFEST_NAME}

    def to_dict(self) -> dict:
        return {"run_id": self.run_id, "command": self.command, "options": self.options,
                "config": self.config, "seed": self.seed, "inputs": self.inputs,
                "artifacts": self.artifacts, "timestamps": self.timestamps, "version": self.version}

    def write(self, out_dir) -> Path:
        path = Path(out_dir) / MANIFEST_NAME
        path.write_text(canonical_json(self.to_dict()))
        return path

    @classmethod
    def read(cls, path) -> "RunManifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        try:
            d = json.loads(path.read_text())
            m = cls(d["command"], d["options"], d["config"], int(d["seed"]), d.get("inputs", {}),
                    d.get("artifacts", {}), d.get("timestamps", {}), d.get("version", ""))
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise InvalidParameter(f"cannot read manifest {path}: {exc}") from None
        if d.get("run_id") not in (None, m.run_id):
            raise InvalidParameter(f"manifest {path} was edited: run_id does not match its contents")
        return m


def now_utc() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
