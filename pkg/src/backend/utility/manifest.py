"""
manifest.py

The ``manifest.json`` every run directory carries: command, resolved
config, seed, timestamps, artefact list with hashes and a version string.
"""

from __future__ import annotations

import json
import logging
import subprocess
from dataclasses import dataclass, field
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path
from typing import Any

from src.backend.config import MANIFEST_NAME
from src.backend.data.matrix_io import ManifestEntry
from src.backend.errors import ArtifactError

logger = logging.getLogger(__name__)

PROJECT_ROOT = Path(__file__).resolve().parents[3]
PACKAGE_NAME = "tritower"
FALLBACK_VERSION = "0.1.0"


def utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def version_string() -> str:
    """``git describe`` of the checkout, else the installed package version."""
    try:
        result = subprocess.run(
            ["git", "describe", "--tags", "--always", "--dirty"],
            cwd=PROJECT_ROOT,
            capture_output=True,
            text=True,
            timeout=5,
            check=False,
        )
        described = result.stdout.strip()
        if result.returncode == 0 and described:
            return described
    except (OSError, subprocess.SubprocessError):
        pass
    try:
        return metadata.version(PACKAGE_NAME)
    except metadata.PackageNotFoundError:
        return FALLBACK_VERSION


@dataclass
class RunManifest:
    command: str
    config: dict[str, Any]
    seed: int
    started_at: str | None = None
    finished_at: str | None = None
    artifacts: list[ManifestEntry] = field(default_factory=list)
    files: dict[str, str] = field(default_factory=dict)
    version: str = field(default_factory=version_string)
    extra: dict[str, Any] = field(default_factory=dict)

    def entry(self, name: str) -> ManifestEntry:
        for item in self.artifacts:
            if item.name == name:
                return item
        raise ArtifactError(f"manifest of {self.command!r} lists no artefact named {name!r}")

    def has_entry(self, name: str) -> bool:
        return any(item.name == name for item in self.artifacts)

    def as_dict(self) -> dict[str, Any]:
        return {
            "command": self.command,
            "config": self.config,
            "seed": self.seed,
            "started_at": self.started_at,
            "finished_at": self.finished_at,
            "version": self.version,
            "artifacts": [item.as_dict() for item in self.artifacts],
            "files": self.files,
            "extra": self.extra,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RunManifest":
        try:
            return cls(
                command=str(data["command"]),
                config=dict(data.get("config") or {}),
                seed=int(data.get("seed", 0)),
                started_at=data.get("started_at"),
                finished_at=data.get("finished_at"),
                artifacts=[ManifestEntry.from_dict(item) for item in data.get("artifacts", [])],
                files=dict(data.get("files") or {}),
                version=str(data.get("version", FALLBACK_VERSION)),
                extra=dict(data.get("extra") or {}),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ArtifactError(f"malformed manifest: {exc}") from None

    def write(self, directory: str | Path) -> Path:
        target = Path(directory) / MANIFEST_NAME
        text = json.dumps(self.as_dict(), indent=2) + "\n"
        try:
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_text(text, encoding="utf-8")
        except OSError as exc:
            raise ArtifactError(f"could not write {target}: {exc}") from exc
        logger.debug("Wrote manifest %s", target)
        return target

    @classmethod
    def read(cls, directory: str | Path, *, expect: str | None = None) -> "RunManifest":
        source = Path(directory) / MANIFEST_NAME
        if not source.is_file():
            raise ArtifactError(f"no {MANIFEST_NAME} in {Path(directory)}")
        try:
            data = json.loads(source.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ArtifactError(f"could not read {source}: {exc}") from exc
        manifest = cls.from_dict(data)
        if expect is not None and manifest.command != expect:
            raise ArtifactError(f"{Path(directory)} holds a {manifest.command!r} run, expected {expect!r}")
        return manifest
