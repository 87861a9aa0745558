"""Versioned prompt registry backed by plain-text template files and a JSON manifest."""

from __future__ import annotations

import json
import os
import re
import tempfile
import threading
from importlib import resources
from pathlib import Path

STAGES = ("decompose", "step", "conclude")
ROLES = ("planner", "executor", "concluder")
OVERLAYS = (
    "reflection_decompose",
    "reflection_step",
    "reflection_conclude",
    "few_shot_step",
    "few_shot_conclude",
)


class PromptError(ValueError):
    pass


class UnknownVersion(PromptError):
    pass


def _builtin_root() -> Path:
    return Path(str(resources.files("radabench").joinpath("templates")))


def _read(path: Path) -> str:
    return path.read_text(encoding="utf-8").removesuffix("\n")


class PromptRegistry:
    """Named prompt versions.

    Built-in versions live in the package; user versions are written to
    ``user_dir`` with their own manifest. New versions are never activated
    automatically.
    """

    def __init__(self, user_dir: str | Path | None = None):
        self.root = _builtin_root()
        self.user_dir = Path(user_dir) if user_dir else None
        self._lock = threading.Lock()
        self._manifest = json.loads((self.root / "manifest.json").read_text(encoding="utf-8"))

    def _user_manifest(self) -> dict:
        if self.user_dir is None:
            return {"versions": {}, "active": None}
        path = self.user_dir / "manifest.json"
        if not path.exists():
            return {"versions": {}, "active": None}
        return json.loads(path.read_text(encoding="utf-8"))

    def versions(self) -> list[str]:
        return list(self._manifest["versions"]) + list(self._user_manifest()["versions"])

    @property
    def active(self) -> str:
        return self._user_manifest().get("active") or self._manifest["active"]

    def get(self, version: str) -> dict[str, str]:
        if version in self._manifest["versions"]:
            entry, base = self._manifest["versions"][version], self.root
        else:
            user = self._user_manifest()["versions"]
            if version not in user:
                raise UnknownVersion(version)
            entry, base = user[version], self.user_dir
        return {name: _read(base / rel) for name, rel in entry["files"].items()}

    def overlay(self, name: str) -> str:
        if name not in OVERLAYS:
            raise PromptError(f"unknown overlay {name!r}")
        return _read(self.root / "overlays" / f"{name}.txt")

    def generation(self, kind: str) -> str:
        return _read(self.root / "generation" / f"{kind}.txt")

    def next_version_name(self, parent: str) -> str:
        base = re.sub(r"-(base|r\d+)$", "", parent)
        m = re.search(r"-r(\d+)$", parent)
        n = int(m.group(1)) + 1 if m else 1
        name = f"{base}-r{n}"
        while name in self.versions():
            n += 1
            name = f"{base}-r{n}"
        return name

    def add_version(self, name: str, templates: dict[str, str], parent: str, note: str = "") -> str:
        if self.user_dir is None:
            raise PromptError("registry has no writable user directory")
        missing = [s for s in STAGES if s not in templates]
        if missing:
            raise PromptError(f"version {name} lacks stages {missing}")
        with self._lock:
            if name in self.versions():
                raise PromptError(f"version {name} already exists")
            vdir = self.user_dir / name
            vdir.mkdir(parents=True, exist_ok=True)
            files = {}
            for stage in STAGES:
                (vdir / f"{stage}.txt").write_text(templates[stage] + "\n", encoding="utf-8")
                files[stage] = f"{name}/{stage}.txt"
            manifest = self._user_manifest()
            manifest["versions"][name] = {"kind": "stages", "parent": parent, "note": note, "files": files}
            _atomic_json(self.user_dir / "manifest.json", manifest)
        return name

    def activate(self, name: str) -> None:
        """Explicit human selection of a version."""
        if name not in self.versions():
            raise UnknownVersion(name)
        if self.user_dir is None:
            raise PromptError("registry has no writable user directory")
        with self._lock:
            manifest = self._user_manifest()
            manifest["active"] = name
            _atomic_json(self.user_dir / "manifest.json", manifest)


def _atomic_json(path: Path, data: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".manifest-")
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


_DEFAULT: PromptRegistry | None = None


def default_registry() -> PromptRegistry:
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = PromptRegistry()
    return _DEFAULT
