"""Run manifests: enough resolved state to re-execute a command byte-identically.

Manifests are written before any output and carry no timestamps, so a rerun
with the same inputs produces the same manifest bytes.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

from .errors import ConfigError


def sha256_file(path) -> str:
    if not Path(path).is_file():
        raise ConfigError(f"input file not found: {path}")
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass(frozen=True)
class RunManifest:
    command: str
    config: dict
    seeds: tuple[int, ...]
    version: str
    input_hashes: dict = field(default_factory=dict)
    output_paths: tuple[str, ...] = ()

    def write(self, path) -> None:
        payload = asdict(self)
        payload["seeds"] = list(self.seeds)
        payload["output_paths"] = list(self.output_paths)
        Path(path).write_text(
            json.dumps(payload, sort_keys=True, indent=2) + "\n",
            encoding="utf-8",
        )


def load_manifest(path) -> RunManifest:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    return RunManifest(
        command=data["command"],
        config=data["config"],
        seeds=tuple(data["seeds"]),
        version=data["version"],
        input_hashes=data.get("input_hashes", {}),
        output_paths=tuple(data.get("output_paths", ())),
    )
