"""Run manifests: every output directory gets one, recording the effective
configuration hash, seed, prompt version, tool version, and timestamps.

Outputs themselves never embed wall-clock time (mock runs use a fixed epoch
timestamp), so two runs with the same configuration hash are byte-identical;
the manifest is the only file that differs, and only in its timestamps.
"""

from __future__ import annotations

import hashlib
import json
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .prompting import PROMPT_VERSION


def utc_now() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def config_hash(settings: dict) -> str:
    canonical = json.dumps(settings, sort_keys=True, ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def write_manifest(path: str | Path, *, command: str, settings: dict,
                   seed: int | None = None, mock: bool = False,
                   started_at: str, finished_at: str | None = None,
                   extra: dict | None = None) -> dict:
    """Write a manifest JSON file; `path` may be a directory (manifest.json
    inside it) or an explicit file path."""
    path = Path(path)
    if path.is_dir() or not path.suffix:
        path.mkdir(parents=True, exist_ok=True)
        path = path / "manifest.json"
    manifest = {
        "command": command,
        "config_hash": config_hash(settings),
        "settings": settings,
        "seed": seed,
        "prompt_version": PROMPT_VERSION,
        "tool_version": __version__,
        "mock": mock,
        "started_at": started_at,
        "finished_at": finished_at or utc_now(),
    }
    if extra:
        manifest.update(extra)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, ensure_ascii=False, indent=2) + "\n", encoding="utf-8")
    return manifest
