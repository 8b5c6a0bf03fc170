"""
Run manifests written next to every mutating command's output.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from vl_instruct import __version__

_BLOCK = 1 << 20


def file_digest(path: Union[str, Path]) -> str:
    """SHA-256 of a file's bytes, read in 1 MiB blocks."""
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for block in iter(lambda: handle.read(_BLOCK), b""):
            digest.update(block)
    return digest.hexdigest()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def manifest_path(out: Union[str, Path]) -> Path:
    return Path(f"{out}.manifest.json")


@dataclass
class RunManifest:
    """
    What produced an output: tool version, arguments, settings hash, seeds,
    input digests, timestamps and output counts.

    Reruns with the same inputs produce identical manifests apart from the
    two timestamps.
    """

    command: List[str]
    config_hash: str
    tool_version: str = __version__
    seeds: Dict[str, int] = field(default_factory=dict)
    inputs: Dict[str, str] = field(default_factory=dict)
    outputs: Dict[str, int] = field(default_factory=dict)
    jobs: int = 1
    options: Dict[str, Any] = field(default_factory=dict)
    started_at: str = field(default_factory=_now)
    finished_at: Optional[str] = None

    def add_input(self, path: Union[str, Path]) -> None:
        self.inputs[str(path)] = file_digest(path)

    def finish(self, **outputs: int) -> None:
        self.outputs.update(outputs)
        self.finished_at = _now()

    def to_json(self) -> Dict[str, Any]:
        return asdict(self)

    def write(self, out: Union[str, Path]) -> Path:
        """Write ``<out>.manifest.json`` and return its path."""
        path = manifest_path(out)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as handle:
            json.dump(self.to_json(), handle, indent=2, sort_keys=True, ensure_ascii=False)
            handle.write("\n")
        return path
